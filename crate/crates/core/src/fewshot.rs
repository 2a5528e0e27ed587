//! Few-shot protocol: learning-rate selection over repeated random
//! train/dev splits, last-checkpoint training, and majority-vote ensembles.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::data::{compute_metric, Dataset, MetricName, Split, TaskSpec};
use crate::error::{Error, Result};
use crate::lm::{argmax, FrozenLm, MixedInput};
use crate::rng;
use crate::tensor::Scalar;
use crate::trainer::{predict_inputs, prepare_inputs, train, Prediction, TrainConfig, WarpParameters};
use crate::vocab::Vocab;

/// Executes independent jobs `0..n`, possibly in parallel. Results must be
/// returned in job order.
pub trait Runner {
    fn run_all<R: Send>(&self, n: usize, job: &(dyn Fn(usize) -> R + Sync)) -> Vec<R>;
}

/// Runs jobs one after another.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Runner for Sequential {
    fn run_all<R: Send>(&self, n: usize, job: &(dyn Fn(usize) -> R + Sync)) -> Vec<R> {
        (0..n).map(job).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotPlan {
    pub candidate_lrs: Vec<f64>,
    pub n_runs: usize,
    /// Examples in the training half of each split; the rest form dev.
    pub split_train: usize,
    /// Recipe shared by all runs; `lr_max` and `seed` are set per run and
    /// early stopping is always off.
    pub base: TrainConfig,
    pub seed: u64,
}

impl FewShotPlan {
    pub fn new(candidate_lrs: Vec<f64>, base: TrainConfig, seed: u64) -> Self {
        Self { candidate_lrs, n_runs: 20, split_train: 16, base, seed }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrSelection {
    pub lr: f64,
    /// `(lr, mean dev metric)` in ascending lr order.
    pub means: Vec<(f64, f64)>,
}

fn run_config(base: &TrainConfig, lr: f64, seed: u64) -> TrainConfig {
    TrainConfig { lr_max: lr, seed, early_stopping: false, ..base.clone() }
}

/// Split `data` into train/dev halves with a seeded shuffle.
pub fn random_split(data: &Dataset, split_train: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if split_train == 0 || split_train >= data.len() {
        return Err(Error::Config(format!("cannot take {split_train} training examples out of {}", data.len())));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut rng::seeded(seed));
    let pick = |ids: &[usize], split| Dataset { split, examples: ids.iter().map(|&i| data.examples[i].clone()).collect() };
    Ok((pick(&idx[..split_train], Split::Train), pick(&idx[split_train..], Split::Dev)))
}

/// Value that stands in for the metric of a diverged run.
fn failure_value(metric: MetricName) -> f64 {
    if metric.higher_is_better() {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Pick the learning rate with the best mean dev metric. Run `i` uses the
/// same split and seed for every candidate; a diverged run scores 0. Ties
/// go to the smaller learning rate.
pub fn select_lr<T: Scalar + Send + Sync, R: Runner>(
    model: &FrozenLm<T>,
    task: &TaskSpec,
    vocab: &Vocab,
    data: &Dataset,
    plan: &FewShotPlan,
    runner: &R,
) -> Result<LrSelection> {
    if plan.candidate_lrs.is_empty() {
        return Err(Error::Config("no candidate learning rates".into()));
    }
    if plan.n_runs == 0 {
        return Err(Error::Config("n_runs must be at least 1".into()));
    }
    let mut lrs = plan.candidate_lrs.clone();
    lrs.sort_by(f64::total_cmp);
    lrs.dedup();
    let template = task.validate()?;
    let metric = plan.base.validation_metric;
    let n = plan.n_runs;
    let job = |j: usize| -> Result<f64> {
        let (lr, run) = (lrs[j / n], (j % n) as u64);
        let (tr, dev) = random_split(data, plan.split_train, rng::derive(plan.seed, 2 * run))?;
        let cfg = run_config(&plan.base, lr, rng::derive(plan.seed, 2 * run + 1));
        match train(model, task, vocab, &tr, &Dataset { split: Split::Dev, examples: Vec::new() }, &cfg) {
            Ok(out) => {
                let inputs = prepare_inputs(&template, vocab, &dev.examples, model.config.max_positions)?;
                let values: Vec<f64> = predict_inputs(model, &out.params, &inputs)?.iter().map(Prediction::value).collect();
                let v = compute_metric(metric, &values, &dev.golds())?.value;
                Ok(if v.is_finite() { v } else { failure_value(metric) })
            }
            Err(Error::Diverged { .. }) => Ok(failure_value(metric)),
            Err(e) => Err(e),
        }
    };
    let scores = runner.run_all(lrs.len() * n, &job).into_iter().collect::<Result<Vec<f64>>>()?;
    let means: Vec<(f64, f64)> =
        lrs.iter().enumerate().map(|(i, &lr)| (lr, scores[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64)).collect();
    let mut best = means[0];
    for &(lr, m) in &means[1..] {
        let better = if metric.higher_is_better() { m > best.1 } else { m < best.1 };
        if better {
            best = (lr, m);
        }
    }
    Ok(LrSelection { lr: best.0, means })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble<T: Scalar = f32> {
    pub task: String,
    pub template: String,
    pub lr: f64,
    pub seeds: Vec<u64>,
    pub members: Vec<WarpParameters<T>>,
}

impl<T: Scalar> Ensemble<T> {
    pub fn new(task: String, template: String, lr: f64, seeds: Vec<u64>, members: Vec<WarpParameters<T>>) -> Result<Self> {
        let first = members.first().ok_or_else(|| Error::Invalid("an ensemble needs at least one member".into()))?;
        let key = |p: &WarpParameters<T>| (p.embed_dim(), p.prompt_count(), p.num_outputs(), p.is_regression());
        if members.iter().any(|m| key(m) != key(first)) {
            return Err(Error::Shape("ensemble members differ in shape".into()));
        }
        if seeds.len() != members.len() {
            return Err(Error::Invalid("one seed per member required".into()));
        }
        Ok(Self { task, template, lr, seeds, members })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Train one member per seed on all of `data` with learning rate `lr`,
/// keeping the last checkpoint of each run.
pub fn train_ensemble<T: Scalar + Send + Sync, R: Runner>(
    model: &FrozenLm<T>,
    task: &TaskSpec,
    vocab: &Vocab,
    data: &Dataset,
    base: &TrainConfig,
    lr: f64,
    seeds: &[u64],
    runner: &R,
) -> Result<Ensemble<T>> {
    let empty = Dataset { split: Split::Dev, examples: Vec::new() };
    let job = |i: usize| train(model, task, vocab, data, &empty, &run_config(base, lr, seeds[i])).map(|o| o.params);
    let members = runner.run_all(seeds.len(), &job).into_iter().collect::<Result<Vec<_>>>()?;
    Ensemble::new(task.name.clone(), task.template.clone(), lr, seeds.to_vec(), members)
}

/// `n` consecutive run seeds starting at `base`.
pub fn run_seeds(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| base.wrapping_add(i)).collect()
}

/// Plurality label; ties go to the lowest class index.
pub fn majority_vote(votes: &[usize], num_classes: usize) -> Result<usize> {
    if votes.is_empty() {
        return Err(Error::Invalid("no votes".into()));
    }
    let mut counts = alloc::vec![0usize; num_classes];
    for &v in votes {
        *counts.get_mut(v).ok_or(Error::Index { index: v, len: num_classes })? += 1;
    }
    Ok(argmax(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VoteMode {
    /// One vote per member.
    #[default]
    Majority,
    /// Argmax of the summed member probabilities.
    ProbabilitySum,
}

/// Ensemble label for each input. Classification members only.
pub fn ensemble_predict<T: Scalar>(
    model: &FrozenLm<T>,
    ensemble: &Ensemble<T>,
    inputs: &[MixedInput],
    mode: VoteMode,
) -> Result<Vec<usize>> {
    let c = ensemble.members[0].num_outputs();
    if ensemble.members[0].is_regression() {
        return Err(Error::Invalid("voting needs a classification ensemble".into()));
    }
    let per_member = ensemble
        .members
        .iter()
        .map(|m| predict_inputs(model, m, inputs))
        .collect::<Result<Vec<Vec<Prediction>>>>()?;
    (0..inputs.len())
        .map(|i| match mode {
            VoteMode::Majority => {
                let votes: Vec<usize> = per_member.iter().map(|p| p[i].value() as usize).collect();
                majority_vote(&votes, c)
            }
            VoteMode::ProbabilitySum => {
                let mut sum = alloc::vec![0.0f64; c];
                for p in &per_member {
                    if let Prediction::Class { probs, .. } = &p[i] {
                        sum.iter_mut().zip(probs).for_each(|(s, q)| *s += q);
                    }
                }
                Ok(argmax(&sum))
            }
        })
        .collect()
}
