//! Many tasks over one frozen backbone.
//!
//! Every task contributes its prompt matrix and head. The heads are stacked
//! into one `[ΣC_t, E]` matrix (a regression head contributes its weight
//! row), so a mixed batch needs one encoder pass and one matrix product;
//! each request then reads only its task's slice of the outputs.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::lm::{FrozenLm, MixedInput};
use crate::tensor::{Scalar, Tensor};
use crate::template::{truncate, Template};
use crate::trainer::{Head, Prediction, WarpParameters};
use crate::vocab::Vocab;

#[derive(Debug, Clone, PartialEq)]
pub struct TaskEntry<T: Scalar = f32> {
    pub name: String,
    pub template: Template,
    pub params: WarpParameters<T>,
    /// Class names (empty for regression).
    pub classes: Vec<String>,
    /// First row of this task in the stacked head matrix.
    pub offset: usize,
}

#[derive(Debug)]
pub struct TaskRegistry<'m, T: Scalar = f32> {
    model: &'m FrozenLm<T>,
    vocab: Vocab,
    tasks: Vec<TaskEntry<T>>,
    by_name: BTreeMap<String, usize>,
    heads: Tensor<T>,
}

/// One inference request.
#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub task: String,
    pub s1: Vec<u32>,
    pub s2: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Answer<T: Scalar = f32> {
    pub task: String,
    /// Raw head outputs: class logits, or the unclipped score.
    pub outputs: Vec<T>,
    pub prediction: Prediction,
}

impl<'m, T: Scalar> TaskRegistry<'m, T> {
    pub fn new(model: &'m FrozenLm<T>, vocab: Vocab) -> Self {
        let e = model.config.embed_dim;
        Self { model, vocab, tasks: Vec::new(), by_name: BTreeMap::new(), heads: Tensor::zeros(vec![0, e]) }
    }

    pub fn register(&mut self, name: &str, template: Template, params: WarpParameters<T>, classes: Vec<String>) -> Result<()> {
        let e = self.model.config.embed_dim;
        if params.embed_dim() != e {
            return Err(Error::Shape(format!("task `{name}` has embed dim {}, model has {e}", params.embed_dim())));
        }
        if template.prompt_count() != params.prompt_count() {
            return Err(Error::Shape(format!(
                "task `{name}`: template has {} prompt slots, parameters have {}",
                template.prompt_count(),
                params.prompt_count()
            )));
        }
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("task `{name}` registered twice")));
        }
        let rows = match &params.head {
            Head::Verbalizer(v) => v.data(),
            Head::Regression { weight, .. } => weight.data(),
        };
        let offset = self.heads.shape()[0];
        let mut data = self.heads.data().to_vec();
        data.extend_from_slice(rows);
        self.heads = Tensor::new(vec![offset + params.num_outputs(), e], data)?;
        self.by_name.insert(name.into(), self.tasks.len());
        self.tasks.push(TaskEntry { name: name.into(), template, params, classes, offset });
        Ok(())
    }

    pub fn model(&self) -> &FrozenLm<T> {
        self.model
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn tasks(&self) -> &[TaskEntry<T>] {
        &self.tasks
    }

    pub fn task(&self, name: &str) -> Option<&TaskEntry<T>> {
        self.by_name.get(name).map(|&i| &self.tasks[i])
    }

    /// The stacked `[ΣC_t, E]` head matrix.
    pub fn stacked_heads(&self) -> &Tensor<T> {
        &self.heads
    }

    /// Task-specific scalars held: `Σ E·(K_t + C_t)` (plus one bias per
    /// regression task).
    pub fn footprint(&self) -> usize {
        self.tasks.iter().map(|t| t.params.census()).sum()
    }

    fn prepare(&self, r: &Request) -> Result<(usize, MixedInput)> {
        let &i = self.by_name.get(&r.task).ok_or_else(|| Error::UnknownTask(r.task.clone()))?;
        let t = &self.tasks[i];
        let m = t.template.apply(&self.vocab, &r.s1, r.s2.as_deref(), t.params.prompt_count())?;
        let m = truncate(&m, self.model.config.max_positions)?;
        self.model.validate_input(&m, t.params.prompt_count())?;
        Ok((i, m))
    }

    /// Answer a mixed batch with one padded forward pass. Requests that
    /// fail (unknown task, bad input) get their own error; the rest of the
    /// batch is unaffected.
    pub fn multi_task_infer(&self, requests: &[Request]) -> Vec<Result<Answer<T>>> {
        let prepared: Vec<Result<(usize, MixedInput)>> = requests.iter().map(|r| self.prepare(r)).collect();
        let ok: Vec<(usize, &(usize, MixedInput))> =
            prepared.iter().enumerate().filter_map(|(i, p)| p.as_ref().ok().map(|p| (i, p))).collect();
        let mut answers: Vec<Option<Result<Answer<T>>>> = prepared
            .iter()
            .map(|p| match p {
                Ok(_) => None,
                Err(e) => Some(Err(e.clone())),
            })
            .collect();
        if !ok.is_empty() {
            match self.forward(&ok) {
                Ok(rows) => {
                    for ((req, (task, _)), row) in ok.iter().zip(rows) {
                        answers[*req] = Some(self.answer(*task, row));
                    }
                }
                Err(e) => {
                    for (req, _) in &ok {
                        answers[*req] = Some(Err(e.clone()));
                    }
                }
            }
        }
        answers.into_iter().map(|a| a.unwrap_or_else(|| Err(Error::Invalid("request was not answered".into())))).collect()
    }

    /// Stacked-head outputs, one `ΣC_t` row per prepared request.
    fn forward(&self, batch: &[(usize, &(usize, MixedInput))]) -> Result<Vec<Vec<T>>> {
        let mut g = Graph::new();
        let nodes = self.model.bind(&mut g);
        let mut prompt_nodes: BTreeMap<usize, NodeId> = BTreeMap::new();
        for (_, (task, _)) in batch {
            if !prompt_nodes.contains_key(task) {
                let id = g.input(&self.tasks[*task].params.prompts);
                prompt_nodes.insert(*task, id);
            }
        }
        let enc_batch: Vec<(&MixedInput, Option<NodeId>)> =
            batch.iter().map(|(_, (task, m))| (m, Some(prompt_nodes[task]))).collect();
        let enc = self.model.encode(&mut g, &nodes, &enc_batch)?;
        let positions: Vec<(usize, usize)> = batch.iter().enumerate().map(|(b, (_, (_, m)))| (b, m.mask_position)).collect();
        let f = self.model.mlm_features(&mut g, &nodes, &enc, &positions)?;
        let heads = g.input(&self.heads);
        let out = g.matmul_bt(f, heads)?;
        let width = self.heads.shape()[0];
        Ok(g.value(out).chunks(width).map(<[T]>::to_vec).collect())
    }

    fn answer(&self, task: usize, row: Vec<T>) -> Result<Answer<T>> {
        let t = &self.tasks[task];
        let mut outputs = row[t.offset..t.offset + t.params.num_outputs()].to_vec();
        if let Head::Regression { bias, .. } = &t.params.head {
            outputs[0] += bias.data()[0];
        }
        let prediction = Prediction::from_outputs(&outputs, &t.params.head)?;
        Ok(Answer { task: t.name.clone(), outputs, prediction })
    }

    /// Reference path: one request, its own task head only.
    pub fn infer_single(&self, request: &Request) -> Result<Answer<T>> {
        let (i, m) = self.prepare(request)?;
        let t = &self.tasks[i];
        let outputs = crate::trainer::head_outputs(self.model, &t.params, core::slice::from_ref(&m))?.remove(0);
        let prediction = Prediction::from_outputs(&outputs, &t.params.head)?;
        Ok(Answer { task: t.name.clone(), outputs, prediction })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::LmConfig;
    use crate::trainer::{init_params, HeadSpec, InitStrategy};

    fn setup(model: &FrozenLm<f32>) -> TaskRegistry<'_, f32> {
        let v = Vocab::synthetic(64).unwrap();
        let mut reg = TaskRegistry::new(model, v.clone());
        let specs: [(&str, u8, usize, HeadSpec, u64); 3] = [
            ("a", 1, 2, HeadSpec::Classes(2), 1),
            ("b", 2, 4, HeadSpec::Classes(3), 2),
            ("c", 2, 1, HeadSpec::Regression { clip: (1.0, 5.0) }, 3),
        ];
        for (name, ns, k, head, seed) in specs {
            let mut p = init_params(&InitStrategy::StatsRandom, model, &v, k, head, seed).unwrap();
            if let Head::Regression { weight, .. } = &mut p.head {
                weight.data_mut().iter_mut().enumerate().for_each(|(i, w)| *w = (i as f32 * 0.7).sin());
            }
            reg.register(name, Template::default_for(ns, k), p, Vec::new()).unwrap();
        }
        reg
    }

    fn model() -> FrozenLm<f32> {
        let c = LmConfig { vocab_size: 64, embed_dim: 16, num_layers: 1, num_heads: 2, ffn_dim: 32, max_positions: 32, ..Default::default() };
        FrozenLm::init(c, 8).unwrap()
    }

    #[test]
    fn offsets_partition_stacked_heads() {
        let m = model();
        let reg = setup(&m);
        assert_eq!(reg.stacked_heads().shape(), &[6, 16]);
        let offs: Vec<usize> = reg.tasks().iter().map(|t| t.offset).collect();
        assert_eq!(offs, vec![0, 2, 5]);
        assert_eq!(reg.footprint(), 16 * (2 + 2) + 16 * (4 + 3) + (16 + 16 + 1));
    }

    #[test]
    fn mixed_batch_equals_single_inference() {
        let m = model();
        let reg = setup(&m);
        let req = |t: &str, n: u32| Request {
            task: t.into(),
            s1: (30..30 + n).collect(),
            s2: if t == "a" { None } else { Some(vec![40, 41]) },
        };
        let reqs = vec![req("a", 3), req("b", 5), req("zzz", 1), req("c", 2), req("a", 7)];
        let out = reg.multi_task_infer(&reqs);
        assert_eq!(out[2], Err(Error::UnknownTask("zzz".into())));
        for (r, a) in reqs.iter().zip(&out) {
            if r.task == "zzz" {
                continue;
            }
            let single = reg.infer_single(r).unwrap();
            assert_eq!(a.as_ref().unwrap(), &single);
        }
        assert_eq!(reg.multi_task_infer(&reqs[..1])[0].as_ref().unwrap(), &reg.infer_single(&reqs[0]).unwrap());
    }

    #[test]
    fn registration_errors() {
        let m = model();
        let mut reg = setup(&m);
        let v = Vocab::synthetic(64).unwrap();
        let p = init_params(&InitStrategy::Mask, &m, &v, 2, HeadSpec::Classes(2), 0).unwrap();
        assert!(reg.register("a", Template::default_for(1, 2), p.clone(), Vec::new()).is_err());
        assert!(reg.register("d", Template::default_for(1, 3), p, Vec::new()).is_err());
    }
}
