//! Prompt and verbalizer parameters, the objective through the frozen LM,
//! and the optimization loop.
//!
//! Class logits are `Θᵛ · f(x)` where `f(x)` is the MLM-head feature at the
//! `[MASK]` position of the templated input. Training minimizes the mean
//! cross-entropy (mean squared error for a regression head) with Adam, a
//! slanted triangular schedule and global-norm gradient clipping. Only the
//! prompt matrix and the head ever change.

pub mod optim;
pub mod probe;

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, NodeId};
use crate::data::{bucket_batches, compute_metric, Dataset, Example, Label, MetricName, MetricValue, TaskSpec};
use crate::error::{Error, Result};
use crate::lm::{argmax, FrozenLm, MixedInput};
use crate::rng;
use crate::tensor::{softmax, Scalar, Tensor};
use crate::template::{truncate, Template};
use crate::vocab::Vocab;
use optim::{clip_global_norm, stlr, Adam, AdamConfig};

/// Output head over the `[MASK]` feature vector.
#[derive(Debug, Clone, PartialEq)]
pub enum Head<T: Scalar = f32> {
    /// `[C, E]` verbalizer embeddings; logits are dot products, no bias.
    Verbalizer(Tensor<T>),
    /// `[1, E]` weight and `[1]` bias. Scores are clipped to `clip` only at
    /// inference.
    Regression { weight: Tensor<T>, bias: Tensor<T>, clip: (f64, f64) },
}

/// The trainable state: prompt embeddings `[K, E]` and the head.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpParameters<T: Scalar = f32> {
    pub prompts: Tensor<T>,
    pub head: Head<T>,
}

impl<T: Scalar> WarpParameters<T> {
    /// Every tensor of a parameter set is trainable; the flag is set here
    /// whatever the inputs carried.
    pub fn new(prompts: Tensor<T>, head: Head<T>) -> Result<Self> {
        let mut p = Self { prompts, head };
        p.check()?;
        p.tensors_mut().into_iter().for_each(|t| t.set_requires_grad(true));
        Ok(p)
    }

    fn check(&self) -> Result<()> {
        let (_, e) = self.prompts.dims2()?;
        match &self.head {
            Head::Verbalizer(v) => {
                let (c, ve) = v.dims2()?;
                if c == 0 || ve != e {
                    return Err(Error::Shape(format!("verbalizer {:?} for embed dim {e}", v.shape())));
                }
            }
            Head::Regression { weight, bias, clip } => {
                if weight.shape() != [1, e] || bias.shape() != [1] {
                    return Err(Error::Shape(format!(
                        "regression head {:?}/{:?} for embed dim {e}",
                        weight.shape(),
                        bias.shape()
                    )));
                }
                if !(clip.0 < clip.1) {
                    return Err(Error::Config(format!("clip range {clip:?} is empty")));
                }
            }
        }
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        self.prompts.shape()[1]
    }

    pub fn prompt_count(&self) -> usize {
        self.prompts.shape()[0]
    }

    /// Number of classes, or 1 for a regression head.
    pub fn num_outputs(&self) -> usize {
        match &self.head {
            Head::Verbalizer(v) => v.shape()[0],
            Head::Regression { .. } => 1,
        }
    }

    pub fn is_regression(&self) -> bool {
        matches!(self.head, Head::Regression { .. })
    }

    /// Trainable tensors in a fixed order: prompts, then head tensors.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.prompts];
        match &self.head {
            Head::Verbalizer(v) => out.push(v),
            Head::Regression { weight, bias, .. } => {
                out.push(weight);
                out.push(bias);
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.prompts];
        match &mut self.head {
            Head::Verbalizer(v) => out.push(v),
            Head::Regression { weight, bias, .. } => {
                out.push(weight);
                out.push(bias);
            }
        }
        out
    }

    pub fn set_trainable(&mut self, on: bool) {
        for t in self.tensors_mut() {
            t.set_requires_grad(on);
        }
    }

    /// Trainable scalar count: `E·(K+C)`, or `E·K + E + 1` for regression.
    pub fn census(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> WarpParameters<U> {
        let head = match &self.head {
            Head::Verbalizer(v) => Head::Verbalizer(v.cast()),
            Head::Regression { weight, bias, clip } => {
                Head::Regression { weight: weight.cast(), bias: bias.cast(), clip: *clip }
            }
        };
        WarpParameters { prompts: self.prompts.cast(), head }
    }
}

/// Where warm-start parameters come from. Paths are resolved to loaded
/// parameters by the caller before initialization.
#[derive(Debug, Clone, PartialEq)]
pub enum WarmSource {
    Path(String),
    Loaded(Box<WarpParameters<f32>>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitStrategy {
    /// Every prompt and verbalizer row copies the `[MASK]` embedding.
    Mask,
    /// Rows drawn i.i.d. from a normal with the per-dimension mean and
    /// variance of the word-embedding matrix.
    StatsRandom,
    /// Rows copy the embeddings of the named words (K prompt words, C
    /// verbalizer words).
    ManualText { prompt_words: Vec<String>, verbalizer_words: Vec<String> },
    /// Rows copied from previously trained parameters.
    WarmStart(WarmSource),
}

impl InitStrategy {
    /// `mask`, `random`, `manual:<prompt words>|<verbalizer words>` or
    /// `warm:<path>`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "mask" {
            return Ok(Self::Mask);
        }
        if s == "random" {
            return Ok(Self::StatsRandom);
        }
        if let Some(rest) = s.strip_prefix("manual:") {
            let (p, v) = rest
                .split_once('|')
                .ok_or_else(|| Error::Config("manual init needs `prompt words|verbalizer words`".into()))?;
            let words = |x: &str| x.split_whitespace().map(str::to_string).collect();
            return Ok(Self::ManualText { prompt_words: words(p), verbalizer_words: words(v) });
        }
        if let Some(path) = s.strip_prefix("warm:") {
            if path.is_empty() {
                return Err(Error::Config("warm init needs a path".into()));
            }
            return Ok(Self::WarmStart(WarmSource::Path(path.to_string())));
        }
        Err(Error::Config(format!("unknown init strategy `{s}`")))
    }
}

impl fmt::Display for InitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Mask => f.write_str("mask"),
            Self::StatsRandom => f.write_str("random"),
            Self::ManualText { prompt_words, verbalizer_words } => {
                write!(f, "manual:{}|{}", prompt_words.join(" "), verbalizer_words.join(" "))
            }
            Self::WarmStart(WarmSource::Path(p)) => write!(f, "warm:{p}"),
            Self::WarmStart(WarmSource::Loaded(_)) => f.write_str("warm:<loaded>"),
        }
    }
}

/// Shape of the head to initialize.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HeadSpec {
    Classes(usize),
    Regression { clip: (f64, f64) },
}

impl HeadSpec {
    pub fn for_task(task: &TaskSpec) -> Self {
        match task.score_range {
            Some(clip) if task.kind.is_regression() => Self::Regression { clip },
            _ => Self::Classes(task.classes.len()),
        }
    }
}

/// Initialize `K` prompts and the head. A regression head always starts at
/// weight 0 and bias at the middle of the clip range. Warm-start copies
/// prompts (K must match) and, when the class count matches, the
/// verbalizers; other verbalizer counts start from `[MASK]`.
pub fn init_params<T: Scalar>(
    strategy: &InitStrategy,
    model: &FrozenLm<T>,
    vocab: &Vocab,
    k: usize,
    head: HeadSpec,
    seed: u64,
) -> Result<WarpParameters<T>> {
    let e = model.config.embed_dim;
    let emb = &model.word_embeddings;
    let row = |id: u32| -> Result<Vec<T>> { Ok(emb.row(id as usize)?.to_vec()) };
    let c = match head {
        HeadSpec::Classes(0) => return Err(Error::Config("a classification head needs at least one class".into())),
        HeadSpec::Classes(c) => c,
        HeadSpec::Regression { .. } => 0,
    };
    let mask_rows = |n: usize| -> Result<Vec<T>> {
        let m = row(model.config.mask_id)?;
        Ok((0..n).flat_map(|_| m.iter().copied()).collect())
    };
    let (prompt_data, verb_data): (Vec<T>, Vec<T>) = match strategy {
        InitStrategy::Mask => (mask_rows(k)?, mask_rows(c)?),
        InitStrategy::StatsRandom => {
            let (v, _) = emb.dims2()?;
            let mut mean = vec![0.0f64; e];
            let mut var = vec![0.0f64; e];
            for r in 0..v {
                for (j, x) in emb.row(r)?.iter().enumerate() {
                    mean[j] += x.to_f64();
                }
            }
            mean.iter_mut().for_each(|m| *m /= v as f64);
            for r in 0..v {
                for (j, x) in emb.row(r)?.iter().enumerate() {
                    let d = x.to_f64() - mean[j];
                    var[j] += d * d;
                }
            }
            let dists = mean
                .iter()
                .zip(&var)
                .map(|(&m, &s)| Normal::new(m, libm::sqrt(s / v as f64)).map_err(|e| Error::Config(format!("{e}"))))
                .collect::<Result<Vec<_>>>()?;
            let mut r = rng::seeded(seed);
            let mut draw = |n: usize| -> Vec<T> {
                (0..n * e).map(|i| T::from_f64(dists[i % e].sample(&mut r))).collect()
            };
            let p = draw(k);
            (p, draw(c))
        }
        InitStrategy::ManualText { prompt_words, verbalizer_words } => {
            if prompt_words.len() != k || verbalizer_words.len() != c {
                return Err(Error::Config(format!(
                    "manual init has {} prompt and {} verbalizer words for K={k}, C={c}",
                    prompt_words.len(),
                    verbalizer_words.len()
                )));
            }
            let rows = |words: &[String]| -> Result<Vec<T>> {
                let mut out = Vec::with_capacity(words.len() * e);
                for w in words {
                    out.extend(row(vocab.require(w)?)?);
                }
                Ok(out)
            };
            (rows(prompt_words)?, rows(verbalizer_words)?)
        }
        InitStrategy::WarmStart(WarmSource::Path(p)) => {
            return Err(Error::Config(format!("warm-start path `{p}` has not been loaded")));
        }
        InitStrategy::WarmStart(WarmSource::Loaded(src)) => {
            if src.embed_dim() != e {
                return Err(Error::Shape(format!("warm-start embed dim {} for model dim {e}", src.embed_dim())));
            }
            if src.prompt_count() != k {
                return Err(Error::Shape(format!("warm-start has {} prompts, template needs {k}", src.prompt_count())));
            }
            let p: Vec<T> = src.prompts.data().iter().map(|x| T::from_f64(x.to_f64())).collect();
            let v = match &src.head {
                Head::Verbalizer(v) if v.shape()[0] == c => v.data().iter().map(|x| T::from_f64(x.to_f64())).collect(),
                _ => mask_rows(c)?,
            };
            (p, v)
        }
    };
    let prompts = Tensor::new(vec![k, e], prompt_data)?.trainable();
    let head = match head {
        HeadSpec::Classes(c) => Head::Verbalizer(Tensor::new(vec![c, e], verb_data)?.trainable()),
        HeadSpec::Regression { clip } => Head::Regression {
            weight: Tensor::zeros(vec![1, e]).trainable(),
            bias: Tensor::new(vec![1], vec![T::from_f64((clip.0 + clip.1) / 2.0)])?.trainable(),
            clip,
        },
    };
    WarpParameters::new(prompts, head)
}

/// Head outputs for one feature vector: `C` logits or one raw score.
pub fn class_logits<T: Scalar>(features: &[T], head: &Head<T>) -> Result<Vec<T>> {
    let dot = |a: &[T], b: &[T]| a.iter().zip(b).fold(T::ZERO, |s, (&x, &y)| s + x * y);
    match head {
        Head::Verbalizer(v) => {
            let (_, e) = v.dims2()?;
            if features.len() != e {
                return Err(Error::Shape(format!("features of dim {} for verbalizer dim {e}", features.len())));
            }
            Ok(v.data().chunks(e).map(|r| dot(r, features)).collect())
        }
        Head::Regression { weight, bias, .. } => {
            if features.len() != weight.len() {
                return Err(Error::Shape(format!("features of dim {} for weight dim {}", features.len(), weight.len())));
            }
            Ok(vec![dot(weight.data(), features) + bias.data()[0]])
        }
    }
}

/// Graph handles for the head tensors.
fn bind_head<'a, T: Scalar>(g: &mut Graph<'a, T>, head: &'a Head<T>) -> Vec<NodeId> {
    match head {
        Head::Verbalizer(v) => vec![g.input(v)],
        Head::Regression { weight, bias, .. } => vec![g.input(weight), g.input(bias)],
    }
}

/// `[n, C]` logits or `[n, 1]` scores from `[n, E]` features.
fn apply_head<T: Scalar>(g: &mut Graph<'_, T>, head: &[NodeId], features: NodeId) -> Result<NodeId> {
    let out = g.matmul_bt(features, head[0])?;
    match head.get(1) {
        Some(&b) => g.add_bias(out, b),
        None => Ok(out),
    }
}

/// Loss node over a batch.
fn loss_node<T: Scalar>(g: &mut Graph<'_, T>, outputs: NodeId, labels: &[Label]) -> Result<NodeId> {
    match labels.first() {
        Some(Label::Score(_)) => {
            let t: Vec<T> = labels.iter().map(|l| T::from_f64(l.as_f64())).collect();
            g.mse(outputs, &t)
        }
        _ => {
            let mut t = Vec::with_capacity(labels.len());
            for l in labels {
                match l {
                    Label::Class(c) => t.push(*c),
                    Label::Score(_) => return Err(Error::Invalid("mixed label kinds in one batch".into())),
                }
            }
            g.cross_entropy(outputs, &t)
        }
    }
}

fn forward_outputs<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    model: &'a FrozenLm<T>,
    params: &'a WarpParameters<T>,
    inputs: &[&MixedInput],
) -> Result<(NodeId, Vec<NodeId>)> {
    let nodes = model.bind(g);
    let p = g.input(&params.prompts);
    let batch: Vec<(&MixedInput, Option<NodeId>)> = inputs.iter().map(|m| (*m, Some(p))).collect();
    let enc = model.encode(g, &nodes, &batch)?;
    let positions: Vec<(usize, usize)> = inputs.iter().enumerate().map(|(b, m)| (b, m.mask_position)).collect();
    let f = model.mlm_features(g, &nodes, &enc, &positions)?;
    let head = bind_head(g, &params.head);
    let out = apply_head(g, &head, f)?;
    let mut trainable = vec![p];
    trainable.extend(head);
    Ok((out, trainable))
}

/// Mean batch loss and its gradient for every trainable tensor, in
/// [`WarpParameters::tensors`] order.
pub fn loss_and_grads<T: Scalar>(
    model: &FrozenLm<T>,
    params: &WarpParameters<T>,
    inputs: &[&MixedInput],
    labels: &[Label],
) -> Result<(f64, Vec<Vec<T>>)> {
    if inputs.is_empty() || inputs.len() != labels.len() {
        return Err(Error::Invalid(format!("batch of {} inputs and {} labels", inputs.len(), labels.len())));
    }
    let mut g = Graph::new();
    let (out, trainable) = forward_outputs(&mut g, model, params, inputs)?;
    let loss = loss_node(&mut g, out, labels)?;
    let value = g.value(loss)[0].to_f64();
    let grads = g.backward(loss)?;
    let sizes = params.tensors().into_iter().map(Tensor::len);
    let flat = trainable
        .iter()
        .zip(sizes)
        .map(|(id, n)| grads.get(*id).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::ZERO; n]))
        .collect();
    Ok((value, flat))
}

/// Fresh optimizer state for `params`.
pub fn optimizer_for<T: Scalar>(params: &WarpParameters<T>) -> Adam<T> {
    Adam::new(AdamConfig::default(), params.tensors().into_iter().map(Tensor::len))
}

/// One update: forward, backward, global-norm clip, Adam. Returns the batch
/// loss before the update. The frozen model is only read.
pub fn training_step<T: Scalar>(
    model: &FrozenLm<T>,
    params: &mut WarpParameters<T>,
    adam: &mut Adam<T>,
    inputs: &[&MixedInput],
    labels: &[Label],
    lr: f64,
    clip_norm: f64,
) -> Result<f64> {
    let step = adam.step as usize + 1;
    let (loss, mut grads) = loss_and_grads(model, params, inputs, labels).map_err(|e| match e {
        Error::NonFinite(d) => Error::Diverged { step, detail: d },
        other => other,
    })?;
    if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::Diverged { step, detail: format!("loss {loss}") });
    }
    let mut views: Vec<&mut [T]> = grads.iter_mut().map(Vec::as_mut_slice).collect();
    clip_global_norm(&mut views, clip_norm);
    let grads_ref: Vec<&[T]> = grads.iter().map(Vec::as_slice).collect();
    let mut tensors = params.tensors_mut();
    let mut data: Vec<&mut [T]> = tensors.iter_mut().map(|t| t.data_mut()).collect();
    adam.step(&mut data, &grads_ref, lr)?;
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub epochs: usize,
    pub warmup_frac: f64,
    pub max_tokens_per_batch: usize,
    pub max_examples_per_batch: usize,
    pub grad_clip_norm: f64,
    pub padding_noise: f64,
    pub seed: u64,
    pub init: InitStrategy,
    pub early_stopping: bool,
    pub validation_metric: MetricName,
    /// Templated inputs longer than this are truncated.
    pub max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-3,
            epochs: 20,
            warmup_frac: 0.06,
            max_tokens_per_batch: 1024,
            max_examples_per_batch: 8,
            grad_clip_norm: 1.0,
            padding_noise: 0.1,
            seed: 0,
            init: InitStrategy::Mask,
            early_stopping: true,
            validation_metric: MetricName::Accuracy,
            max_len: 512,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return Err(Error::Config("warmup_frac must lie in (0, 1)".into()));
        }
        if !(self.lr_max >= 0.0 && self.lr_max.is_finite()) {
            return Err(Error::Config(format!("lr_max {} must be finite and non-negative", self.lr_max)));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::Config("grad_clip_norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Validation metric, when a validation set was evaluated.
    pub metric: Option<f64>,
    /// Learning rate of the last update in the epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome<T: Scalar = f32> {
    pub params: WarpParameters<T>,
    pub history: Vec<EpochRecord>,
    /// Epoch (1-based) whose parameters were returned; 0 means the
    /// initialization.
    pub selected_epoch: usize,
}

/// Apply the template to each example and truncate to `max_len`.
pub fn prepare_inputs(template: &Template, vocab: &Vocab, examples: &[Example], max_len: usize) -> Result<Vec<MixedInput>> {
    let k = template.prompt_count();
    examples
        .iter()
        .map(|ex| {
            let m = template.apply(vocab, &ex.s1, ex.s2.as_deref(), k)?;
            truncate(&m, max_len)
        })
        .collect()
}

fn is_better(metric: MetricName, candidate: f64, best: f64) -> bool {
    if metric.higher_is_better() {
        candidate > best
    } else {
        candidate < best
    }
}

/// Train on `train_set` and evaluate on `dev` after each epoch.
pub fn train<T: Scalar>(
    model: &FrozenLm<T>,
    task: &TaskSpec,
    vocab: &Vocab,
    train_set: &Dataset,
    dev: &Dataset,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    let template = task.validate()?;
    let max_len = config.max_len.min(model.config.max_positions);
    let dev_inputs = prepare_inputs(&template, vocab, &dev.examples, max_len)?;
    let dev_golds = dev.golds();
    let metric = config.validation_metric;
    let mut evaluator = |_: usize, p: &WarpParameters<T>| -> Result<f64> {
        let preds = predict_inputs(model, p, &dev_inputs)?;
        let values: Vec<f64> = preds.iter().map(Prediction::value).collect();
        Ok(compute_metric(metric, &values, &dev_golds)?.value)
    };
    let eval: Option<&mut dyn FnMut(usize, &WarpParameters<T>) -> Result<f64>> =
        if dev.is_empty() { None } else { Some(&mut evaluator) };
    train_with_evaluator(model, task, vocab, train_set, config, eval)
}

/// Like [`train`] with a caller-supplied per-epoch validation function.
pub fn train_with_evaluator<T: Scalar>(
    model: &FrozenLm<T>,
    task: &TaskSpec,
    vocab: &Vocab,
    train_set: &Dataset,
    config: &TrainConfig,
    mut evaluate: Option<&mut dyn FnMut(usize, &WarpParameters<T>) -> Result<f64>>,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let template = task.validate()?;
    if train_set.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    if config.early_stopping && evaluate.is_none() && config.epochs > 0 {
        return Err(Error::Config("early stopping needs a non-empty validation set".into()));
    }
    if model.tensors().iter().any(|(_, t)| t.requires_grad()) {
        return Err(Error::Config("language model weights must be frozen".into()));
    }
    let k = template.prompt_count();
    let mut params = init_params(&config.init, model, vocab, k, HeadSpec::for_task(task), rng::derive(config.seed, 0))?;
    if config.epochs == 0 {
        return Ok(TrainOutcome { params, history: Vec::new(), selected_epoch: 0 });
    }
    let max_len = config.max_len.min(model.config.max_positions);
    let inputs = prepare_inputs(&template, vocab, &train_set.examples, max_len)?;
    let lengths: Vec<usize> = inputs.iter().map(MixedInput::len).collect();
    let plans = (0..config.epochs)
        .map(|ep| {
            bucket_batches(
                &lengths,
                config.max_tokens_per_batch,
                config.max_examples_per_batch,
                config.padding_noise,
                rng::derive(config.seed, 1 + ep as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let total: usize = plans.iter().map(Vec::len).sum();
    let mut adam = optimizer_for(&params);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, WarpParameters<T>)> = None;
    let mut step = 0;
    for (ep, plan) in plans.iter().enumerate() {
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for batch in plan {
            step += 1;
            lr = stlr(step, total, config.warmup_frac, config.lr_max)?;
            let xs: Vec<&MixedInput> = batch.iter().map(|&i| &inputs[i]).collect();
            let ys: Vec<Label> = batch.iter().map(|&i| train_set.examples[i].label).collect();
            loss_sum += training_step(model, &mut params, &mut adam, &xs, &ys, lr, config.grad_clip_norm)?;
        }
        let epoch = ep + 1;
        let metric = match evaluate.as_mut() {
            Some(f) => Some(f(epoch, &params)?),
            None => None,
        };
        history.push(EpochRecord { epoch, mean_loss: loss_sum / plan.len().max(1) as f64, metric, lr });
        if let (true, Some(m)) = (config.early_stopping, metric) {
            let replace = match &best {
                None => true,
                Some((b, _, _)) => is_better(config.validation_metric, m, *b),
            };
            if replace {
                best = Some((m, epoch, params.clone()));
            }
        }
    }
    match best {
        Some((_, epoch, p)) => Ok(TrainOutcome { params: p, history, selected_epoch: epoch }),
        None => Ok(TrainOutcome { params, history, selected_epoch: config.epochs }),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Class { label: usize, probs: Vec<f64> },
    Score(f64),
}

impl Prediction {
    /// Class index or score as `f64`, the form metrics consume.
    pub fn value(&self) -> f64 {
        match self {
            Self::Class { label, .. } => *label as f64,
            Self::Score(s) => *s,
        }
    }

    /// Turn raw head outputs into a prediction: argmax over the softmax
    /// (ties to the lowest index) or the clipped score.
    pub fn from_outputs<T: Scalar>(outputs: &[T], head: &Head<T>) -> Result<Self> {
        match head {
            Head::Verbalizer(_) => {
                let probs: Vec<f64> = softmax(outputs)?.iter().map(|p| p.to_f64()).collect();
                Ok(Self::Class { label: argmax(&probs), probs })
            }
            Head::Regression { clip, .. } => {
                let raw = outputs.first().ok_or_else(|| Error::Shape("empty regression output".into()))?.to_f64();
                if !raw.is_finite() {
                    return Err(Error::NonFinite("regression output".into()));
                }
                Ok(Self::Score(raw.clamp(clip.0, clip.1)))
            }
        }
    }
}

/// Examples per inference graph.
pub const INFER_CHUNK: usize = 32;

/// Raw head outputs (logits or unclipped score) for each input.
pub fn head_outputs<T: Scalar>(model: &FrozenLm<T>, params: &WarpParameters<T>, inputs: &[MixedInput]) -> Result<Vec<Vec<T>>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(INFER_CHUNK) {
        let refs: Vec<&MixedInput> = chunk.iter().collect();
        let mut g = Graph::new();
        let (o, _) = forward_outputs(&mut g, model, params, &refs)?;
        let c = params.num_outputs();
        out.extend(g.value(o).chunks(c).map(<[T]>::to_vec));
    }
    Ok(out)
}

pub fn predict_inputs<T: Scalar>(
    model: &FrozenLm<T>,
    params: &WarpParameters<T>,
    inputs: &[MixedInput],
) -> Result<Vec<Prediction>> {
    head_outputs(model, params, inputs)?.iter().map(|o| Prediction::from_outputs(o, &params.head)).collect()
}

/// Predict one example.
pub fn predict<T: Scalar>(
    model: &FrozenLm<T>,
    params: &WarpParameters<T>,
    template: &Template,
    vocab: &Vocab,
    s1: &[u32],
    s2: Option<&[u32]>,
) -> Result<Prediction> {
    let m = template.apply(vocab, s1, s2, params.prompt_count())?;
    let m = truncate(&m, model.config.max_positions)?;
    let mut p = predict_inputs(model, params, core::slice::from_ref(&m))?;
    Ok(p.remove(0))
}

/// Score `params` on a dataset.
pub fn evaluate<T: Scalar>(
    model: &FrozenLm<T>,
    params: &WarpParameters<T>,
    template: &Template,
    vocab: &Vocab,
    dataset: &Dataset,
    metric: MetricName,
) -> Result<(MetricValue, Vec<Prediction>)> {
    let inputs = prepare_inputs(template, vocab, &dataset.examples, model.config.max_positions)?;
    let preds = predict_inputs(model, params, &inputs)?;
    let values: Vec<f64> = preds.iter().map(Prediction::value).collect();
    Ok((compute_metric(metric, &values, &dataset.golds())?, preds))
}
