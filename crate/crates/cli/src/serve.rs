//! Line-delimited JSON serving over stdin/stdout or TCP.
//!
//! Request: `{"task": …, "s1": …, "s2": …}` (`s2` for pair tasks only).
//! Response: `{"task": …, "prediction": …, "probs": […]}` where the
//! prediction is the class name (the class index when names are unknown)
//! or the clipped score; regression responses carry no `probs`. A bad
//! request gets `{"error": …}` and the loop continues.
//!
//! Over TCP every client has its own reader thread; one batcher thread owns
//! the inference path and answers whatever requests are pending, from any
//! client, with a single mixed-task forward pass.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};
use warp_core::registry::{Request, TaskRegistry};
use warp_core::trainer::Prediction;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireRequest {
    task: String,
    s1: String,
    #[serde(default)]
    s2: Option<String>,
}

#[derive(Debug, Serialize)]
#[serde(untagged)]
enum WirePrediction {
    Class(String),
    Index(usize),
    Score(f64),
}

#[derive(Debug, Serialize)]
#[serde(untagged)]
enum WireResponse {
    Ok {
        task: String,
        prediction: WirePrediction,
        #[serde(skip_serializing_if = "Option::is_none")]
        probs: Option<Vec<f64>>,
    },
    Err {
        #[serde(skip_serializing_if = "Option::is_none")]
        task: Option<String>,
        error: String,
    },
}

fn to_line(r: &WireResponse) -> String {
    serde_json::to_string(r).expect("response serializes")
}

fn parse(registry: &TaskRegistry<'_, f32>, line: &str) -> Result<Request, String> {
    let r: WireRequest = serde_json::from_str(line).map_err(|e| format!("malformed request: {e}"))?;
    let v = registry.vocab();
    Ok(Request { task: r.task, s1: v.encode(&r.s1), s2: r.s2.as_deref().map(|s| v.encode(s)) })
}

/// Answer a batch of request lines with one forward pass over the valid
/// ones; the output has one response line per input line.
pub fn handle_lines(registry: &TaskRegistry<'_, f32>, lines: &[String]) -> Vec<String> {
    let parsed: Vec<Result<Request, String>> = lines.iter().map(|l| parse(registry, l)).collect();
    let requests: Vec<Request> = parsed.iter().filter_map(|p| p.as_ref().ok().cloned()).collect();
    let mut answers = registry.multi_task_infer(&requests).into_iter().zip(requests);
    parsed
        .into_iter()
        .map(|p| {
            let resp = match p {
                Err(error) => WireResponse::Err { task: None, error },
                Ok(_) => {
                    let (answer, req) = answers.next().expect("one answer per valid request");
                    match answer {
                        Err(e) => WireResponse::Err { task: Some(req.task), error: e.to_string() },
                        Ok(a) => {
                            let classes = registry.task(&a.task).map(|t| t.classes.as_slice()).unwrap_or_default();
                            let (prediction, probs) = match a.prediction {
                                Prediction::Class { label, probs } => {
                                    let p = classes.get(label).map_or(WirePrediction::Index(label), |c| WirePrediction::Class(c.clone()));
                                    (p, Some(probs))
                                }
                                Prediction::Score(s) => (WirePrediction::Score(s), None),
                            };
                            WireResponse::Ok { task: a.task, prediction, probs }
                        }
                    }
                }
            };
            to_line(&resp)
        })
        .collect()
}

/// Serve one request per line until end of input.
pub fn serve_stream(registry: &TaskRegistry<'_, f32>, input: impl BufRead, mut output: impl Write) -> std::io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let out = handle_lines(registry, &[line]);
        writeln!(output, "{}", out[0])?;
        output.flush()?;
    }
    Ok(())
}

type Job = (String, mpsc::Sender<String>);

fn batcher(registry: &TaskRegistry<'_, f32>, jobs: mpsc::Receiver<Job>, max_batch: usize) {
    while let Ok(first) = jobs.recv() {
        let mut batch = vec![first];
        while batch.len() < max_batch {
            match jobs.try_recv() {
                Ok(j) => batch.push(j),
                Err(_) => break,
            }
        }
        let lines: Vec<String> = batch.iter().map(|(l, _)| l.clone()).collect();
        for ((_, reply), resp) in batch.into_iter().zip(handle_lines(registry, &lines)) {
            // a client that hung up no longer wants its answer
            let _ = reply.send(resp);
        }
    }
}

fn client(stream: TcpStream, jobs: mpsc::Sender<Job>) -> std::io::Result<()> {
    let mut writer = stream.try_clone()?;
    let (tx, rx) = mpsc::channel();
    for line in BufReader::new(stream).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if jobs.send((line, tx.clone())).is_err() {
            break;
        }
        let resp = rx.recv().map_err(|_| std::io::Error::other("batcher stopped"))?;
        writeln!(writer, "{resp}")?;
        writer.flush()?;
    }
    Ok(())
}

/// Accept clients on `listener` until `max_clients` have connected (forever
/// when `None`), then return once they have all disconnected.
pub fn serve_tcp(registry: &TaskRegistry<'_, f32>, listener: &TcpListener, max_batch: usize, max_clients: Option<usize>) -> std::io::Result<()> {
    let (jobs_tx, jobs_rx) = mpsc::channel::<Job>();
    std::thread::scope(|s| {
        s.spawn(move || batcher(registry, jobs_rx, max_batch.max(1)));
        let mut accepted = 0;
        for stream in listener.incoming() {
            let stream = stream?;
            let jobs = jobs_tx.clone();
            s.spawn(move || {
                if let Err(e) = client(stream, jobs) {
                    eprintln!("client error: {e}");
                }
            });
            accepted += 1;
            if max_clients.is_some_and(|m| accepted >= m) {
                break;
            }
        }
        // the batcher exits once every client has dropped its sender
        drop(jobs_tx);
        Ok(())
    })
}
