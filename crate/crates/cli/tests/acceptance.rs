//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits nonzero if any attainable criterion fails.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use warp_cli::runner::Threaded;
use warp_core::analysis::{nearest_tokens, storage_cost, trainable_census, Approach, StorageModel};
use warp_core::autodiff::finite_difference_check;
use warp_core::data::synthetic::{generate_synthetic, manual_words, SyntheticKind};
use warp_core::data::{compute_metric, Label, MetricName};
use warp_core::fewshot::{ensemble_predict, run_seeds, select_lr, train_ensemble, FewShotPlan, VoteMode};
use warp_core::lm::{pretrain_toy, FrozenLm, LmConfig, MixedInput, PretrainConfig};
use warp_core::registry::{Request, TaskRegistry};
use warp_core::rng;
use warp_core::template::Template;
use warp_core::tensor::Tensor;
use warp_core::trainer::optim::stlr;
use warp_core::trainer::probe::linear_probe_baseline;
use warp_core::trainer::{
    evaluate, init_params, loss_and_grads, prepare_inputs, train, Head, HeadSpec, InitStrategy, Prediction, TrainConfig,
    WarpParameters,
};
use warp_core::vocab::Vocab;

/// A failed check. `unattainable` marks a requirement that contradicts
/// another one; it is reported as FAIL but does not fail the run.
struct Failure {
    detail: String,
    unattainable: bool,
}

impl From<String> for Failure {
    fn from(detail: String) -> Self {
        Self { detail, unattainable: false }
    }
}

type Check = Result<String, Failure>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail.into())
    }
}

struct Shared {
    vocab: Vocab,
    lm: FrozenLm<f32>,
}

fn shared() -> Shared {
    let vocab = Vocab::synthetic(256).unwrap();
    let base = generate_synthetic(SyntheticKind::KeywordSentiment, &vocab, 0, 0, 0).unwrap();
    let (lm, report) = pretrain_toy(&base.corpus, LmConfig::default(), &PretrainConfig::default()).unwrap();
    println!(
        "info: shared LM pretrained, held-out masked-token accuracy {:.3} over {} tokens",
        report.heldout_accuracy, report.heldout_masked
    );
    Shared { vocab, lm }
}

fn tiny_lm() -> FrozenLm<f64> {
    let c = LmConfig { vocab_size: 64, embed_dim: 16, num_layers: 1, num_heads: 2, ffn_dim: 32, max_positions: 32, ..LmConfig::default() };
    FrozenLm::init(c, 11).unwrap()
}

fn gradient_check() -> Check {
    let lm = tiny_lm();
    let v = Vocab::synthetic(64).unwrap();
    let mut worst = 0.0f64;
    let mut entries = 0;
    let cases: [(u8, usize, HeadSpec); 3] = [
        (1, 4, HeadSpec::Classes(2)),
        (2, 3, HeadSpec::Classes(3)),
        (2, 2, HeadSpec::Regression { clip: (1.0, 5.0) }),
    ];
    for (case, (ns, k, head)) in cases.into_iter().enumerate() {
        let t = Template::default_for(ns, k);
        let sents: [(&[u32], &[u32]); 3] = [(&[30, 31, 40, 41], &[50, 33]), (&[50, 33], &[34, 35, 36]), (&[44], &[45, 46, 47, 48])];
        let xs: Vec<MixedInput> =
            sents.iter().map(|(a, b)| t.apply(&v, a, (ns == 2).then_some(*b), k).unwrap()).collect();
        let labels: Vec<Label> = match head {
            HeadSpec::Classes(c) => (0..xs.len()).map(|i| Label::Class(i % c)).collect(),
            HeadSpec::Regression { .. } => vec![Label::Score(1.5), Label::Score(4.0), Label::Score(2.25)],
        };
        let p0 = init_params(&InitStrategy::StatsRandom, &lm, &v, k, head, 20 + case as u64).unwrap();
        let mut params: Vec<Tensor<f64>> = p0.tensors().into_iter().cloned().collect();
        entries += params.iter().map(Tensor::len).sum::<usize>();
        if let Head::Regression { weight, .. } = &p0.head {
            // the default regression init has a zero weight row; move off it
            params[1] = Tensor::from_fn(weight.shape().to_vec(), |i| ((i as f64) * 0.37).sin() * 0.5);
        }
        let err = finite_difference_check(
            |ts| {
                let head = match &p0.head {
                    Head::Verbalizer(_) => Head::Verbalizer(ts[1].clone()),
                    Head::Regression { clip, .. } => Head::Regression { weight: ts[1].clone(), bias: ts[2].clone(), clip: *clip },
                };
                let p = WarpParameters::new(ts[0].clone(), head)?;
                let refs: Vec<&MixedInput> = xs.iter().collect();
                loss_and_grads(&lm, &p, &refs, &labels)
            },
            &mut params,
            1e-6,
        )
        .map_err(|e| e.to_string())?;
        worst = worst.max(err);
    }
    ensure(worst <= 1e-4, format!("max relative error {worst:.2e} over {entries} entries"))
}

fn frozen_invariance(s: &Shared) -> Check {
    let syn = generate_synthetic(SyntheticKind::KeywordSentiment, &s.vocab, 256, 256, 1).unwrap();
    let before = s.lm.fingerprint();
    let snapshot: Vec<Vec<f32>> = s.lm.tensors().iter().map(|(_, t)| t.data().to_vec()).collect();
    let cfg = TrainConfig { epochs: 20, lr_max: 3e-3, seed: 1, ..TrainConfig::default() };
    let out = train(&s.lm, &syn.spec, &s.vocab, &syn.train, &syn.dev, &cfg).map_err(|e| e.to_string())?;
    let after = s.lm.fingerprint();
    let same = s.lm.tensors().iter().zip(&snapshot).all(|((_, t), d)| t.data() == d.as_slice());
    let acc = out.history.iter().filter_map(|h| h.metric).fold(0.0f64, f64::max);
    ensure(
        before == after && same,
        format!("sha256 {} before and after, best dev accuracy {acc:.3}", hex(&after)),
    )
}

fn hex(b: &[u8]) -> String {
    b.iter().take(8).map(|x| format!("{x:02x}")).collect::<String>() + "…"
}

fn trend(s: &Shared) -> Check {
    let (mut ordered, mut beats) = (0, 0);
    let mut rows = Vec::new();
    for seed in 1..=10u64 {
        let syn = generate_synthetic(SyntheticKind::KeywordSentiment, &s.vocab, 256, 256, seed).unwrap();
        let cfg = TrainConfig { seed, lr_max: 3e-3, epochs: 20, ..TrainConfig::default() };
        let mut acc = [0.0; 3];
        for (slot, k) in [8, 1, 0].into_iter().enumerate() {
            let mut spec = syn.spec.clone();
            spec.template = Template::default_for(1, k).render();
            let out = train(&s.lm, &spec, &s.vocab, &syn.train, &syn.dev, &cfg).map_err(|e| e.to_string())?;
            let t = spec.validate().unwrap();
            acc[slot] = evaluate(&s.lm, &out.params, &t, &s.vocab, &syn.dev, MetricName::Accuracy).unwrap().0.value;
        }
        let probe = linear_probe_baseline(&s.lm, &syn.spec, &syn.train, &syn.dev, &cfg).map_err(|e| e.to_string())?;
        let probe = probe.metric.map_or(0.0, |m| m.value);
        ordered += usize::from(acc[0] >= acc[1] && acc[1] >= acc[2]);
        beats += usize::from(acc[0] > probe);
        rows.push(format!("{:.3}/{:.3}/{:.3} vs {probe:.3}", acc[0], acc[1], acc[2]));
    }
    println!("info: trend per seed (K=8/1/0 vs probe): {}", rows.join(", "));
    ensure(ordered >= 8 && beats >= 8, format!("ordering held in {ordered}/10 seeds, K=8 beat the probe in {beats}/10"))
}

fn accounting() -> Check {
    let census = |k: usize, c: usize, e: usize| {
        let p = WarpParameters::new(Tensor::<f32>::zeros(vec![k, e]), Head::Verbalizer(Tensor::zeros(vec![c, e]))).unwrap();
        trainable_census(&p)
    };
    let mut failures = Vec::new();
    for (k, c, want) in [(0, 3, 3072), (1, 3, 4096), (8, 2, 10240), (8, 3, 11264)] {
        let got = census(k, c, 1024);
        if got != want {
            failures.push(format!("census(K={k},C={c}) = {got}, expected {want}"));
        }
    }
    // hand-evaluated: M=10, M0=6, N=3, E=4, E'=2, C=5, K=7
    let s = StorageModel { m: Some(10), m0: Some(6), n: Some(3), e: Some(4), e_adapter: Some(2), c: Some(5), k: Some(7) };
    let expected = [
        (Approach::LinearProbe, 70),
        (Approach::FullFineTune, 30),
        (Approach::SingleLayer, 118),
        (Approach::Distilled, 18),
        (Approach::Adapters, 34),
        (Approach::Warp, 154),
    ];
    for (approach, want) in expected {
        let got = storage_cost(approach, &s).map_err(|e| e.to_string())?;
        if got != want {
            failures.push(format!("{approach:?} = {got}, expected {want}"));
        }
    }
    let mut r = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let [m, m0, n, e, ea, c, k] = [0; 7].map(|_| r.random_range(0..5000u64));
        let s = StorageModel { m: Some(m), m0: Some(m0), n: Some(n), e: Some(e), e_adapter: Some(ea), c: Some(c), k: Some(k) };
        let want = [m + e * c * n, m * n, m + n * e * e + n * e * c, m0 * n, m + n * e * ea, m + n * e * c + n * e * k];
        for (approach, want) in expected.iter().map(|(a, _)| *a).zip(want) {
            if storage_cost(approach, &s).ok() != Some(want) {
                failures.push(format!("{approach:?} at {s:?}"));
            }
        }
    }
    if !failures.is_empty() {
        return Err(failures.join("; ").into());
    }
    // Required as 4096, but E·(K+C) = 1024·3 here, and the same count must
    // give 3072 for K=0, C=3. 4096 is the K=1 bound for three-class tasks,
    // checked above.
    let k1c2 = census(1, 2, 1024);
    if k1c2 != 4096 {
        return Err(Failure {
            detail: format!(
                "census(K=1,C=2,E=1024) = {k1c2}, required 4096; E·(K+C) = 1024·(1+2), and 4096 = census(K=1,C=3). \
                 Other checks (3072, 4096 at C=3, six storage formulas) pass"
            ),
            unattainable: true,
        });
    }
    Ok("3072, 4096 and six storage formulas".into())
}

fn schedule() -> Check {
    let mut failures = Vec::new();
    let mut expect = |what: &str, got: f64, want: f64| {
        if (got - want).abs() > 1e-15 {
            failures.push(format!("{what}: {got} != {want}"));
        }
    };
    let f = |step, total| stlr(step, total, 0.06, 0.003).unwrap();
    expect("step 0", f(0, 100), 0.0);
    expect("step T", f(100, 100), 0.0);
    expect("step w", f(6, 100), 0.003);
    expect("step 53", f(53, 100), 0.003 * (100.0 - 53.0) / (100.0 - 6.0));
    expect("step 53 literal", f(53, 100), 0.0015);
    for total in [17usize, 50, 333, 1000] {
        let w = (0.06 * total as f64).ceil() as usize;
        expect("endpoint 0", stlr(0, total, 0.06, 1.0).unwrap(), 0.0);
        expect("endpoint T", stlr(total, total, 0.06, 1.0).unwrap(), 0.0);
        expect("peak", stlr(w, total, 0.06, 1.0).unwrap(), 1.0);
    }
    ensure(failures.is_empty(), if failures.is_empty() { "endpoints, peak and 0.0015 at step 53".into() } else { failures.join("; ") })
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    (xs[(n - 1) / 2] + xs[n / 2]) / 2.0
}

fn few_shot(s: &Shared) -> Check {
    const RUNS: usize = 20;
    let runner = Threaded::available();
    let (prompt_words, class_words) = manual_words(SyntheticKind::KeywordSentiment);
    let manual = InitStrategy::ManualText { prompt_words: prompt_words.clone(), verbalizer_words: class_words };
    let template = format!("[CLS] {{s1}} {} [MASK] [SEP]", (1..=prompt_words.len()).map(|i| format!("[P_{i}]")).collect::<Vec<_>>().join(" "));
    let (mut vote_ok, mut init_ok) = (0, 0);
    let mut rows = Vec::new();
    for seed in 1..=10u64 {
        let syn = generate_synthetic(SyntheticKind::KeywordSentiment, &s.vocab, 32, 256, 100 + seed).unwrap();
        let mut means = [0.0; 2];
        for (slot, init) in [manual.clone(), InitStrategy::Mask].into_iter().enumerate() {
            let mut spec = syn.spec.clone();
            spec.template = template.clone();
            spec.init = init.clone();
            let base = TrainConfig { epochs: 20, init, early_stopping: false, ..TrainConfig::default() };
            let plan = FewShotPlan { n_runs: RUNS, ..FewShotPlan::new(vec![1e-3, 3e-3, 1e-2], base.clone(), seed) };
            let sel = select_lr(&s.lm, &spec, &s.vocab, &syn.train, &plan, &runner).map_err(|e| e.to_string())?;
            let seeds = run_seeds(rng::derive(seed, 1), RUNS);
            let ens = train_ensemble(&s.lm, &spec, &s.vocab, &syn.train, &base, sel.lr, &seeds, &runner).map_err(|e| e.to_string())?;
            let t = spec.validate().unwrap();
            let mut accs: Vec<f64> = ens
                .members
                .iter()
                .map(|m| evaluate(&s.lm, m, &t, &s.vocab, &syn.dev, MetricName::Accuracy).unwrap().0.value)
                .collect();
            means[slot] = accs.iter().sum::<f64>() / RUNS as f64;
            if slot == 0 {
                let med = median(&mut accs);
                let inputs = prepare_inputs(&t, &s.vocab, &syn.dev.examples, s.lm.config.max_positions).unwrap();
                let labels = ensemble_predict(&s.lm, &ens, &inputs, VoteMode::Majority).unwrap();
                let preds: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
                let ens_acc = compute_metric(MetricName::Accuracy, &preds, &syn.dev.golds()).unwrap().value;
                vote_ok += usize::from(ens_acc >= med);
                rows.push(format!("vote {ens_acc:.3} median {med:.3}"));
            }
        }
        init_ok += usize::from(means[0] >= means[1]);
        let last = rows.last_mut().unwrap();
        *last += &format!(" manual {:.3} mask {:.3}", means[0], means[1]);
    }
    println!("info: few-shot per seed: {}", rows.join("; "));
    ensure(
        vote_ok >= 8 && init_ok >= 8,
        format!("vote >= median in {vote_ok}/10 seeds, manual init >= mask init in {init_ok}/10"),
    )
}

fn random_words(r: &mut ChaCha8Rng, v: &Vocab, max: usize) -> Vec<u32> {
    let n = r.random_range(1..=max);
    (0..n).map(|_| r.random_range(5..v.len() as u32)).collect()
}

fn serving(s: &Shared) -> Check {
    let mut reg = TaskRegistry::new(&s.lm, s.vocab.clone());
    let tasks: [(&str, u8, usize, HeadSpec); 4] = [
        ("single", 1, 8, HeadSpec::Classes(2)),
        ("pair", 2, 4, HeadSpec::Classes(2)),
        ("three", 2, 2, HeadSpec::Classes(3)),
        ("score", 2, 1, HeadSpec::Regression { clip: (1.0, 5.0) }),
    ];
    for (i, (name, ns, k, head)) in tasks.iter().enumerate() {
        let mut p = init_params(&InitStrategy::StatsRandom, &s.lm, &s.vocab, *k, *head, 40 + i as u64).unwrap();
        if let Head::Regression { weight, .. } = &mut p.head {
            *weight = Tensor::from_fn(weight.shape().to_vec(), |j| ((j as f32) * 0.61).cos() * 0.2);
        }
        reg.register(name, Template::default_for(*ns, *k), p, Vec::new()).map_err(|e| e.to_string())?;
    }
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let requests: Vec<Request> = (0..1000)
        .map(|_| {
            let (name, ns, ..) = tasks[r.random_range(0..tasks.len())];
            let s1 = random_words(&mut r, &s.vocab, 20);
            let s2 = (ns == 2).then(|| random_words(&mut r, &s.vocab, 20));
            Request { task: name.into(), s1, s2 }
        })
        .collect();
    let (mut max_diff, mut mismatched, mut batches, mut start) = (0.0f32, 0, 0, 0);
    while start < requests.len() {
        let end = (start + r.random_range(1..=64)).min(requests.len());
        let answers = reg.multi_task_infer(&requests[start..end]);
        for (req, mixed) in requests[start..end].iter().zip(answers) {
            let mixed = mixed.map_err(|e| e.to_string())?;
            let single = reg.infer_single(req).map_err(|e| e.to_string())?;
            for (a, b) in mixed.outputs.iter().zip(&single.outputs) {
                max_diff = max_diff.max((a - b).abs());
            }
            let same = match (&mixed.prediction, &single.prediction) {
                (Prediction::Class { label: a, .. }, Prediction::Class { label: b, .. }) => a == b,
                (Prediction::Score(a), Prediction::Score(b)) => (a - b).abs() <= 1e-5,
                _ => false,
            };
            mismatched += usize::from(!same || mixed.outputs.len() != single.outputs.len());
        }
        batches += 1;
        start = end;
    }
    ensure(
        mismatched == 0 && max_diff <= 1e-5,
        format!("1000 requests in {batches} mixed batches, {mismatched} prediction mismatches, max |diff| {max_diff:.2e}"),
    )
}

/// Confusion matrix `m[pred][gold]` over `k` classes.
fn confusion(p: &[usize], g: &[usize], k: usize) -> Vec<Vec<f64>> {
    let mut m = vec![vec![0.0; k]; k];
    for (&a, &b) in p.iter().zip(g) {
        m[a][b] += 1.0;
    }
    m
}

/// Gorodkin's R_K written directly over the confusion matrix.
fn matthews_oracle(m: &[Vec<f64>]) -> f64 {
    let k = m.len();
    let mut num = 0.0;
    for a in 0..k {
        for b in 0..k {
            for c in 0..k {
                num += m[a][a] * m[c][b] - m[b][a] * m[a][c];
            }
        }
    }
    let row = |i: usize| m[i].iter().sum::<f64>();
    let col = |j: usize| m.iter().map(|r| r[j]).sum::<f64>();
    let total: f64 = (0..k).map(row).sum();
    let d1: f64 = (0..k).map(|i| row(i) * (total - row(i))).sum();
    let d2: f64 = (0..k).map(|j| col(j) * (total - col(j))).sum();
    if d1 * d2 == 0.0 {
        0.0
    } else {
        num / (d1 * d2).sqrt()
    }
}

fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let flat = |v: &[f64]| v.iter().all(|a| *a == v[0]);
    if flat(x) || flat(y) {
        return 0.0;
    }
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

fn metric_oracles() -> Check {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = r.random_range(2..=30);
        let k = r.random_range(2..=4);
        let p: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let g: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let (pf, gf): (Vec<f64>, Vec<f64>) = (p.iter().map(|&a| a as f64).collect(), g.iter().map(|&a| a as f64).collect());
        let m = confusion(&p, &g, k);
        let trace: f64 = (0..k).map(|i| m[i][i]).sum();
        let bp: Vec<usize> = p.iter().map(|&a| a.min(1)).collect();
        let bg: Vec<usize> = g.iter().map(|&a| a.min(1)).collect();
        let b = confusion(&bp, &bg, 2);
        let (tp, fp, fneg) = (b[1][1], b[1][0], b[0][1]);
        let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fneg) };
        let bpf: Vec<f64> = bp.iter().map(|&a| a as f64).collect();
        let bgf: Vec<f64> = bg.iter().map(|&a| a as f64).collect();
        let x: Vec<f64> = (0..n).map(|_| r.random_range(0.0..5.0)).collect();
        let y: Vec<f64> = x.iter().map(|a| if r.random_bool(0.1) { 2.5 } else { a * r.random_range(-1.0..1.0) + r.random_range(0.0..2.0) }).collect();
        let mse = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64;
        let checks = [
            (MetricName::Accuracy, &pf, &gf, trace / n as f64),
            (MetricName::Matthews, &pf, &gf, matthews_oracle(&m)),
            (MetricName::Matthews, &bpf, &bgf, matthews_oracle(&b)),
            (MetricName::F1, &bpf, &bgf, f1),
            (MetricName::Pearson, &x, &y, pearson_oracle(&x, &y)),
            (MetricName::Mse, &x, &y, mse),
        ];
        for (metric, a, b, want) in checks {
            let got = compute_metric(metric, a, b).map_err(|e| e.to_string())?.value;
            worst = worst.max((got - want).abs());
        }
    }
    ensure(worst <= 1e-12, format!("100 instances x 5 metrics, max |diff| {worst:.2e}"))
}

fn nearest_oracle() -> Check {
    let v = Vocab::synthetic(256).unwrap();
    let e = 16;
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let mut words: Tensor<f32> = Tensor::from_fn(vec![256, e], |_| r.random_range(-1.0f32..1.0));
    // duplicate and scaled rows force exact ties; one zero row
    for (dst, src, scale) in [(200usize, 10usize, 1.0f32), (201, 10, 3.0), (100, 50, 0.5)] {
        let row = words.row(src).unwrap().to_vec();
        words.row_mut(dst).unwrap().iter_mut().zip(row).for_each(|(d, s)| *d = s * scale);
    }
    words.row_mut(7).unwrap().fill(0.0);
    let mut bad = 0;
    for q in 0..100 {
        let query: Vec<f32> = if q % 10 == 0 {
            words.row(10 + q / 10).unwrap().to_vec()
        } else {
            (0..e).map(|_| r.random_range(-1.0f32..1.0)).collect()
        };
        let k = r.random_range(1..=20);
        let got = nearest_tokens(&query, &words, &v, k).map_err(|e| e.to_string())?;
        // exhaustive: compute every cosine, then pick the best remaining k times
        let qn = query.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let mut sims: Vec<Option<f64>> = (0..256)
            .map(|i| {
                let row = words.row(i).unwrap();
                let rn = row.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
                let dot: f64 = row.iter().zip(&query).map(|(&a, &b)| a as f64 * b as f64).sum();
                Some(if rn == 0.0 { 0.0 } else { dot / (qn * rn) })
            })
            .collect();
        let mut want = Vec::new();
        for _ in 0..k {
            let mut best: Option<(usize, f64)> = None;
            for (i, s) in sims.iter().enumerate() {
                if let Some(s) = *s {
                    if best.is_none_or(|(_, b)| s > b) {
                        best = Some((i, s));
                    }
                }
            }
            let (i, s) = best.unwrap();
            sims[i] = None;
            want.push((i as u32, s));
        }
        let same = got.len() == k
            && got.iter().zip(&want).all(|(n, (id, s))| n.id == *id && n.similarity == *s && n.word == v.word(*id));
        bad += usize::from(!same);
    }
    ensure(bad == 0, format!("100 queries, {bad} differ from the exhaustive ranking"))
}

fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn run_cli(dir: &Path, args: &[&str], stdin: Option<&str>) -> Result<Vec<u8>, String> {
    let mut child = Command::new(env!("CARGO_BIN_EXE_warp"))
        .args(args)
        .current_dir(dir)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| e.to_string())?;
    let mut input = child.stdin.take().unwrap();
    input.write_all(stdin.unwrap_or("").as_bytes()).map_err(|e| e.to_string())?;
    drop(input);
    let out = child.wait_with_output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("`warp {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out.stdout)
}

const CLI_SCRIPT: &[&[&str]] = &[
    &["synth", "--train", "32", "--dev", "32", "--seed", "7", "--out", "task"],
    &[
        "pretrain-lm", "--corpus", "task/corpus.txt", "--embed-dim", "16", "--layers", "1", "--heads", "2", "--ffn-dim", "32",
        "--max-positions", "48", "--steps", "30", "--batch-size", "8", "--seed", "3", "--out", "lm.wlmc",
    ],
    &[
        "train", "--task", "task", "--lm", "lm.wlmc", "--lr", "3e-3", "--epochs", "2", "--prompts", "4", "--seed", "5", "--out",
        "a.warp", "--history", "history.jsonl",
    ],
    &["eval", "--task", "task", "--lm", "lm.wlmc", "--warp", "a.warp", "--predictions", "pred.txt"],
    &[
        "fewshot", "--task", "task", "--lm", "lm.wlmc", "--runs", "2", "--lrs", "1e-3,1e-2", "--epochs", "1", "--prompts", "2",
        "--seed", "9", "--threads", "2", "--out", "ens",
    ],
    &["eval", "--task", "task", "--lm", "lm.wlmc", "--ensemble", "ens", "--predictions", "pred_ens.txt"],
    &["interpret", "--warp", "a.warp", "--lm", "lm.wlmc", "--top-k", "3", "--task", "task"],
    &["params", "--warp", "a.warp"],
    &["predict-constant", "--task", "task", "--predictions", "constant.txt"],
    &["serve", "--lm", "lm.wlmc", "--warp", "a.warp", "--task", "task"],
];

const SERVE_INPUT: &str = "{\"task\": \"keyword-sentiment\", \"s1\": \"the good film\"}\n\
                           {\"task\": \"nope\", \"s1\": \"x\"}\n\
                           not json\n";

fn cli_determinism() -> Check {
    let run = || -> Result<(BTreeMap<String, Vec<u8>>, Vec<Vec<u8>>), String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut outputs = Vec::new();
        for args in CLI_SCRIPT {
            let stdin = (args[0] == "serve").then_some(SERVE_INPUT);
            outputs.push(run_cli(dir.path(), args, stdin)?);
        }
        Ok((snapshot(dir.path()), outputs))
    };
    let (files_a, out_a) = run()?;
    let (files_b, out_b) = run()?;
    let differing: Vec<&String> = files_a.keys().filter(|k| files_a.get(*k) != files_b.get(*k)).collect();
    let stdout_diff: Vec<&str> = CLI_SCRIPT.iter().zip(out_a.iter().zip(&out_b)).filter(|(_, (a, b))| a != b).map(|(c, _)| c[0]).collect();
    let detail = format!(
        "{} commands, {} artifacts; differing artifacts {differing:?}, differing stdout {stdout_diff:?}",
        CLI_SCRIPT.len(),
        files_a.len()
    );
    ensure(files_a.keys().eq(files_b.keys()) && differing.is_empty() && stdout_diff.is_empty(), detail)
}

fn main() {
    let (mut failed, mut unattainable) = (0, 0);
    let mut report = |id: usize, name: &str, budget: Duration, check: &mut dyn FnMut() -> Check| {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(&mut *check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()).into())
        });
        let took = start.elapsed();
        let (pass, known, mut detail) = match result {
            Ok(d) => (true, false, d),
            Err(f) => (false, f.unattainable, f.detail),
        };
        let in_time = took <= budget;
        if !in_time {
            detail += &format!("; over the {}s budget", budget.as_secs());
        }
        let verdict = if pass && in_time { "PASS" } else { "FAIL" };
        if verdict == "FAIL" {
            if known && in_time {
                unattainable += 1;
                detail += " (unattainable as stated; does not fail the run)";
            } else {
                failed += 1;
            }
        }
        println!("{verdict} {id:>2} {name}: {detail} [{:.1}s]", took.as_secs_f64());
    };
    let secs = Duration::from_secs;

    report(1, "gradient correctness", secs(30), &mut gradient_check);
    report(4, "parameter accounting", secs(1), &mut accounting);
    report(5, "schedule exactness", secs(1), &mut schedule);
    report(8, "metric oracles", secs(1), &mut metric_oracles);
    report(9, "nearest-token interpretation", secs(1), &mut nearest_oracle);
    report(10, "CLI determinism", secs(60), &mut cli_determinism);

    let start = Instant::now();
    let s = shared();
    println!("info: shared LM pretraining took {:.1}s", start.elapsed().as_secs_f64());
    report(2, "frozen invariance", secs(120), &mut || frozen_invariance(&s));
    report(3, "trend reproduction", secs(600), &mut || trend(&s));
    report(6, "few-shot protocol", secs(600), &mut || few_shot(&s));
    report(7, "serving equivalence", secs(60), &mut || serving(&s));

    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    if unattainable > 0 {
        println!("all attainable criteria passed; {unattainable} reported as unattainable");
    } else {
        println!("all criteria passed");
    }
}
