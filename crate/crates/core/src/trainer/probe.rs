//! Frozen-feature baseline: a linear layer over the mean of the last-layer
//! hidden states of the sentence tokens.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::Graph;
use crate::data::{bucket_batches, compute_metric, Dataset, Example, Label, MetricValue, TaskSpec};
use crate::error::{Error, Result};
use crate::lm::{FrozenLm, MixedInput};
use crate::rng;
use crate::tensor::{Scalar, Tensor};
use crate::template::truncate;
use crate::vocab;

use super::optim::{clip_global_norm, stlr, Adam, AdamConfig};
use super::{apply_head, loss_node, EpochRecord, Head, HeadSpec, Prediction, TrainConfig, INFER_CHUNK};

/// `[CLS] s1 [SEP]` or `[CLS] s1 [SEP] s2 [SEP]`, truncated to `max_len`.
pub fn probe_input(ex: &Example, max_len: usize) -> Result<MixedInput> {
    let mut tokens = vec![vocab::CLS];
    let mut sentence = vec![0u8];
    tokens.extend(&ex.s1);
    sentence.extend(core::iter::repeat_n(1, ex.s1.len()));
    tokens.push(vocab::SEP);
    sentence.push(0);
    if let Some(s2) = &ex.s2 {
        tokens.extend(s2);
        sentence.extend(core::iter::repeat_n(2, s2.len()));
        tokens.push(vocab::SEP);
        sentence.push(0);
    }
    let mut m = MixedInput::from_tokens(&tokens, 0);
    m.sentence = sentence;
    truncate(&m, max_len)
}

/// Sentence representation: mean of last-layer hidden states over the
/// non-special (sentence) positions of each input.
pub fn mean_features<T: Scalar>(model: &FrozenLm<T>, inputs: &[MixedInput]) -> Result<Vec<Vec<T>>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(INFER_CHUNK) {
        let mut g = Graph::new();
        let nodes = model.bind(&mut g);
        let batch: Vec<_> = chunk.iter().map(|m| (m, None)).collect();
        let enc = model.encode(&mut g, &nodes, &batch)?;
        let groups: Vec<Vec<usize>> = chunk
            .iter()
            .enumerate()
            .map(|(b, m)| {
                let base = b * enc.layout.seq_len;
                m.sentence.iter().enumerate().filter(|(_, &s)| s != 0).map(|(j, _)| base + j).collect()
            })
            .collect();
        let mean = g.segment_mean(enc.hidden, &groups)?;
        out.extend(g.value(mean).chunks(model.config.embed_dim).map(<[T]>::to_vec));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutcome<T: Scalar = f32> {
    pub head: Head<T>,
    /// Validation metric of the returned head (`None` without a dev set).
    pub metric: Option<MetricValue>,
    pub history: Vec<EpochRecord>,
}

fn probe_outputs<T: Scalar>(head: &Head<T>, features: &[Vec<T>]) -> Result<Vec<Prediction>> {
    features
        .iter()
        .map(|f| Prediction::from_outputs(&super::class_logits(f, head)?, head))
        .collect()
}

/// Train a linear head on frozen mean-pooled features with the same
/// optimizer recipe as prompt training (bucketing, schedule, clipping,
/// Adam, early stopping). The head starts at zero.
pub fn linear_probe_baseline<T: Scalar>(
    model: &FrozenLm<T>,
    task: &TaskSpec,
    train_set: &Dataset,
    dev: &Dataset,
    config: &TrainConfig,
) -> Result<ProbeOutcome<T>> {
    config.validate()?;
    task.validate()?;
    if train_set.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    if config.early_stopping && dev.is_empty() && config.epochs > 0 {
        return Err(Error::Config("early stopping needs a non-empty validation set".into()));
    }
    let e = model.config.embed_dim;
    let max_len = config.max_len.min(model.config.max_positions);
    let prep = |d: &Dataset| -> Result<Vec<MixedInput>> { d.examples.iter().map(|x| probe_input(x, max_len)).collect() };
    let train_inputs = prep(train_set)?;
    let train_feats = mean_features(model, &train_inputs)?;
    let dev_feats = mean_features(model, &prep(dev)?)?;
    let golds = dev.golds();

    let mut head = match HeadSpec::for_task(task) {
        HeadSpec::Classes(c) => Head::Verbalizer(Tensor::zeros(vec![c, e]).trainable()),
        HeadSpec::Regression { clip } => Head::Regression {
            weight: Tensor::zeros(vec![1, e]).trainable(),
            bias: Tensor::new(vec![1], vec![T::from_f64((clip.0 + clip.1) / 2.0)])?.trainable(),
            clip,
        },
    };
    let head_tensors = |h: &Head<T>| -> Vec<usize> {
        match h {
            Head::Verbalizer(v) => vec![v.len()],
            Head::Regression { weight, bias, .. } => vec![weight.len(), bias.len()],
        }
    };
    let mut adam = Adam::new(AdamConfig::default(), head_tensors(&head));
    let lengths: Vec<usize> = train_inputs.iter().map(MixedInput::len).collect();
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
    let evaluate = |h: &Head<T>| -> Result<Option<MetricValue>> {
        if dev.is_empty() {
            return Ok(None);
        }
        let values: Vec<f64> = probe_outputs(h, &dev_feats)?.iter().map(Prediction::value).collect();
        Ok(Some(compute_metric(config.validation_metric, &values, &golds)?))
    };

    let mut history = Vec::new();
    let mut best: Option<(MetricValue, Head<T>)> = None;
    let mut step = 0;
    for (ep, plan) in plans.iter().enumerate() {
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for batch in plan {
            step += 1;
            lr = stlr(step, total, config.warmup_frac, config.lr_max)?;
            let data: Vec<T> = batch.iter().flat_map(|&i| train_feats[i].iter().copied()).collect();
            let labels: Vec<Label> = batch.iter().map(|&i| train_set.examples[i].label).collect();
            let mut grads = {
                let mut g = Graph::new();
                let x = g.constant(vec![batch.len(), e], data)?;
                let nodes = match &head {
                    Head::Verbalizer(v) => vec![g.input(v)],
                    Head::Regression { weight, bias, .. } => vec![g.input(weight), g.input(bias)],
                };
                let out = apply_head(&mut g, &nodes, x)?;
                let loss = loss_node(&mut g, out, &labels)?;
                let value = g.value(loss)[0].to_f64();
                if !value.is_finite() {
                    return Err(Error::Diverged { step, detail: alloc::format!("probe loss {value}") });
                }
                loss_sum += value;
                let gr = g.backward(loss)?;
                nodes.iter().map(|id| gr.get(*id).map(<[T]>::to_vec).unwrap_or_default()).collect::<Vec<_>>()
            };
            let mut views: Vec<&mut [T]> = grads.iter_mut().map(Vec::as_mut_slice).collect();
            clip_global_norm(&mut views, config.grad_clip_norm);
            let grads_ref: Vec<&[T]> = grads.iter().map(Vec::as_slice).collect();
            let mut params: Vec<&mut [T]> = match &mut head {
                Head::Verbalizer(v) => vec![v.data_mut()],
                Head::Regression { weight, bias, .. } => vec![weight.data_mut(), bias.data_mut()],
            };
            adam.step(&mut params, &grads_ref, lr)?;
        }
        let m = evaluate(&head)?;
        history.push(EpochRecord {
            epoch: ep + 1,
            mean_loss: loss_sum / plan.len().max(1) as f64,
            metric: m.map(|v| v.value),
            lr,
        });
        if let (true, Some(m)) = (config.early_stopping, m) {
            let replace = match &best {
                None => true,
                Some((b, _)) => super::is_better(config.validation_metric, m.value, b.value),
            };
            if replace {
                best = Some((m, head.clone()));
            }
        }
    }
    match best {
        Some((m, h)) => Ok(ProbeOutcome { head: h, metric: Some(m), history }),
        None => {
            let metric = evaluate(&head)?;
            Ok(ProbeOutcome { head, metric, history })
        }
    }
}

/// Predictions of a trained probe head.
pub fn probe_predict<T: Scalar>(model: &FrozenLm<T>, head: &Head<T>, examples: &[Example]) -> Result<Vec<Prediction>> {
    let inputs: Vec<MixedInput> =
        examples.iter().map(|x| probe_input(x, model.config.max_positions)).collect::<Result<_>>()?;
    probe_outputs(head, &mean_features(model, &inputs)?)
}
