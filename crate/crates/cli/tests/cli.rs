use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::{Command, Output};

use warp_cli::checkpoint::{load_warp, save_lm, save_warp, WarpCheckpoint};
use warp_cli::serve::{handle_lines, serve_tcp};
use warp_cli::task::{load_task, write_task, TaskDir};
use warp_core::data::synthetic::{generate_synthetic, SyntheticKind};
use warp_core::lm::{FrozenLm, LmConfig};
use warp_core::registry::TaskRegistry;
use warp_core::rng;
use warp_core::template::Template;
use warp_core::tensor::Tensor;
use warp_core::trainer::{init_params, Head, HeadSpec, InitStrategy, WarpParameters};
use warp_core::vocab::Vocab;

fn warp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_warp")).args(args).current_dir(dir).output().unwrap()
}

fn small_lm() -> FrozenLm<f32> {
    let c = LmConfig { embed_dim: 16, num_layers: 1, num_heads: 2, ffn_dim: 32, max_positions: 48, ..LmConfig::default() };
    FrozenLm::init(c, 5).unwrap()
}

#[test]
fn task_directories_round_trip() {
    let v = Vocab::synthetic(256).unwrap();
    for kind in [SyntheticKind::KeywordSentiment, SyntheticKind::PairMatch, SyntheticKind::PairScore] {
        let t = generate_synthetic(kind, &v, 20, 10, 3).unwrap();
        let mut test = t.dev.clone();
        test.split = warp_core::data::Split::Test;
        let dir = TaskDir { spec: t.spec, train: t.train, dev: t.dev, test: Some(test) };
        let tmp = tempfile::tempdir().unwrap();
        write_task(tmp.path(), &dir, &v).unwrap();
        assert_eq!(load_task(tmp.path(), &v).unwrap(), dir, "{kind:?}");
    }
}

#[test]
fn zero_epoch_train_writes_the_initial_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let v = Vocab::synthetic(256).unwrap();
    let lm = small_lm();
    save_lm(&tmp.path().join("lm.wlmc"), &lm).unwrap();
    let syn = generate_synthetic(SyntheticKind::KeywordSentiment, &v, 16, 8, 1).unwrap();
    let dir = TaskDir { spec: syn.spec, train: syn.train, dev: syn.dev, test: None };
    write_task(&tmp.path().join("task"), &dir, &v).unwrap();

    let out = warp(tmp.path(), &["train", "--task", "task", "--lm", "lm.wlmc", "--epochs", "0", "--prompts", "3", "--seed", "4", "--out", "z.warp"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let c = load_warp(&tmp.path().join("z.warp")).unwrap();
    let expected = init_params(&InitStrategy::Mask, &lm, &v, 3, HeadSpec::Classes(2), rng::derive(4, 0)).unwrap();
    assert_eq!(c.params, expected);
    assert_eq!(c.task, dir.spec.name);
}

#[test]
fn params_counts_trainable_scalars() {
    let tmp = tempfile::tempdir().unwrap();
    let params = WarpParameters::new(Tensor::zeros(vec![0, 1024]), Head::Verbalizer(Tensor::zeros(vec![3, 1024]))).unwrap();
    let ckpt = WarpCheckpoint { task: "three-way".into(), template: "[CLS] {s1} [MASK] [SEP]".into(), params };
    save_warp(&tmp.path().join("k0.warp"), &ckpt).unwrap();
    let out = warp(tmp.path(), &["params", "--warp", "k0.warp"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), "3072\n");
}

#[test]
fn flag_errors_name_the_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let cases: [(&[&str], &str); 4] = [
        (&["train", "--task", "t", "--lm", "l", "--lr", "NaN", "--seed", "1", "--out", "o"], "--lr"),
        (&["fewshot", "--task", "t", "--lm", "l", "--lrs", "1e-3,-1", "--seed", "1", "--out", "o"], "--lrs"),
        (&["synth", "--kind", "bogus", "--seed", "1", "--out", "o"], "--kind"),
        (&["train", "--task", "t", "--lm", "l", "--seed", "x", "--out", "o"], "--seed"),
    ];
    for (args, flag) in cases {
        let out = warp(tmp.path(), args);
        assert!(!out.status.success(), "{args:?}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(flag), "{args:?}: {err}");
    }
}

#[test]
fn concurrent_tcp_clients_match_sequential_answers() {
    let lm = small_lm();
    let v = Vocab::synthetic(256).unwrap();
    let mut reg = TaskRegistry::new(&lm, v.clone());
    let p = init_params(&InitStrategy::StatsRandom, &lm, &v, 2, HeadSpec::Classes(2), 1).unwrap();
    reg.register("one", Template::default_for(1, 2), p, vec!["neg".into(), "pos".into()]).unwrap();
    let p = init_params(&InitStrategy::StatsRandom, &lm, &v, 1, HeadSpec::Classes(3), 2).unwrap();
    reg.register("two", Template::default_for(2, 1), p, Vec::new()).unwrap();

    let words = ["good", "bad", "the", "film", "was", "it"];
    let requests = |client: usize| -> Vec<String> {
        (0..40)
            .map(|i| {
                let s1 = words[(i + client) % words.len()];
                if (i + client) % 3 == 0 {
                    format!(r#"{{"task": "two", "s1": "{s1} {s1}", "s2": "the film"}}"#)
                } else if i % 11 == 5 {
                    r#"{"task": "missing", "s1": "x"}"#.to_string()
                } else {
                    format!(r#"{{"task": "one", "s1": "it was {s1}"}}"#)
                }
            })
            .collect()
    };
    let expected: Vec<Vec<String>> = (0..2).map(|c| requests(c).iter().map(|l| handle_lines(&reg, &[l.clone()]).remove(0)).collect()).collect();

    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let got: Vec<Vec<String>> = std::thread::scope(|s| {
        s.spawn(|| serve_tcp(&reg, &listener, 16, Some(2)).unwrap());
        let clients: Vec<_> = (0..2)
            .map(|c| {
                let lines = requests(c);
                s.spawn(move || {
                    let mut stream = TcpStream::connect(addr).unwrap();
                    let mut reader = BufReader::new(stream.try_clone().unwrap());
                    let mut answers = Vec::new();
                    for l in lines {
                        writeln!(stream, "{l}").unwrap();
                        let mut a = String::new();
                        reader.read_line(&mut a).unwrap();
                        answers.push(a.trim_end().to_string());
                    }
                    answers
                })
            })
            .collect();
        clients.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for (g, e) in got.iter().flatten().zip(expected.iter().flatten()) {
        let (g, e): (serde_json::Value, serde_json::Value) = (serde_json::from_str(g).unwrap(), serde_json::from_str(e).unwrap());
        for key in ["task", "prediction", "error"] {
            assert_eq!(g.get(key), e.get(key), "{g} vs {e}");
        }
        let probs = |v: &serde_json::Value| v.get("probs").map(|p| p.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect::<Vec<_>>());
        match (probs(&g), probs(&e)) {
            (Some(a), Some(b)) => assert!(a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-5), "{g} vs {e}"),
            (a, b) => assert_eq!(a, b),
        }
    }
    assert_eq!(got.iter().map(Vec::len).sum::<usize>(), 80);
}
