//! A miniature masked language model.
//!
//! BERT-style post-norm encoder: word + position embeddings, layer norm,
//! `num_layers` blocks of multi-head attention and a GELU feed-forward
//! layer, then an MLM head (dense, GELU, layer norm) whose output is the
//! feature vector at a position. Vocabulary logits are
//! `features · word_embeddingsᵀ` (weight-tied decoder, no bias).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, NodeId, SeqLayout};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Scalar, Tensor};
use crate::trainer::optim::{clip_global_norm, stlr, Adam, AdamConfig};
use crate::vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub cls_id: u32,
    pub sep_id: u32,
    pub mask_id: u32,
    pub pad_id: u32,
    /// Test mode: the MLM head returns the hidden state unchanged.
    pub identity_head: bool,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            embed_dim: 32,
            num_layers: 2,
            num_heads: 4,
            ffn_dim: 64,
            max_positions: 64,
            cls_id: vocab::CLS,
            sep_id: vocab::SEP,
            mask_id: vocab::MASK,
            pad_id: vocab::PAD,
            identity_head: false,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.embed_dim == 0 || self.max_positions == 0 || self.ffn_dim == 0 {
            return bad("sizes must be positive".into());
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(format!("embed_dim {} not divisible by num_heads {}", self.embed_dim, self.num_heads));
        }
        let ids = [self.cls_id, self.sep_id, self.mask_id, self.pad_id];
        for (i, &a) in ids.iter().enumerate() {
            if a as usize >= self.vocab_size {
                return bad(format!("special id {a} outside vocabulary of {}", self.vocab_size));
            }
            if ids[i + 1..].contains(&a) {
                return bad(format!("special id {a} used twice"));
            }
        }
        Ok(())
    }
}

/// One input position: a frozen vocabulary row or a row of the prompt
/// matrix bound to this input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Token(u32),
    Prompt(u32),
}

/// A templated input sequence. `sentence` tags which slots came from which
/// input sentence (1 or 2), used by truncation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixedInput {
    pub slots: Vec<Slot>,
    pub sentence: Vec<u8>,
    pub mask_position: usize,
}

impl MixedInput {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn from_tokens(tokens: &[u32], mask_position: usize) -> Self {
        Self {
            slots: tokens.iter().map(|&t| Slot::Token(t)).collect(),
            sentence: vec![0; tokens.len()],
            mask_position,
        }
    }

    pub fn prompt_count(&self) -> usize {
        self.slots.iter().filter(|s| matches!(s, Slot::Prompt(_))).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<T: Scalar> {
    pub q_w: Tensor<T>,
    pub q_b: Tensor<T>,
    pub k_w: Tensor<T>,
    pub k_b: Tensor<T>,
    pub v_w: Tensor<T>,
    pub v_b: Tensor<T>,
    pub o_w: Tensor<T>,
    pub o_b: Tensor<T>,
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub ffn_in_w: Tensor<T>,
    pub ffn_in_b: Tensor<T>,
    pub ffn_out_w: Tensor<T>,
    pub ffn_out_b: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlmHead<T: Scalar> {
    pub dense_w: Tensor<T>,
    pub dense_b: Tensor<T>,
    pub ln_g: Tensor<T>,
    pub ln_b: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenLm<T: Scalar = f32> {
    pub config: LmConfig,
    pub word_embeddings: Tensor<T>,
    pub position_embeddings: Tensor<T>,
    pub emb_ln_g: Tensor<T>,
    pub emb_ln_b: Tensor<T>,
    pub layers: Vec<EncoderLayer<T>>,
    pub head: MlmHead<T>,
}

/// Graph handles for every model weight, in [`FrozenLm::tensors`] order.
#[derive(Debug, Clone)]
pub struct ModelNodes {
    pub ids: Vec<NodeId>,
}

/// Output of [`FrozenLm::encode`]: `[layout.rows(), E]` hidden states.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub hidden: NodeId,
    pub layout: SeqLayout,
}

impl<T: Scalar> FrozenLm<T> {
    /// Random initialization: N(0, 0.1²) embeddings, N(0, 1/fan_in) weight
    /// matrices, zero biases, unit gains.
    pub fn init(config: LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::seeded(seed);
        let normal = Normal::new(0.0f64, 1.0).map_err(|e| Error::Config(format!("{e}")))?;
        let mut draw = |shape: Vec<usize>, std: f64| Tensor::from_fn(shape, |_| T::from_f64(std * normal.sample(&mut r)));
        let (e, f) = (config.embed_dim, config.ffn_dim);
        let zeros = |n: usize| Tensor::zeros(vec![n]);
        let ones = |n: usize| Tensor::from_fn(vec![n], |_| T::ONE);
        let word_embeddings = draw(vec![config.vocab_size, e], 0.1);
        let position_embeddings = draw(vec![config.max_positions, e], 0.1);
        // a [fan_in, out] matrix ~ N(0, 1/fan_in) keeps activation scale
        let mut mat = |shape: Vec<usize>| {
            let std = 1.0 / libm::sqrt(shape[0] as f64);
            draw(shape, std)
        };
        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            layers.push(EncoderLayer {
                q_w: mat(vec![e, e]),
                q_b: zeros(e),
                k_w: mat(vec![e, e]),
                k_b: zeros(e),
                v_w: mat(vec![e, e]),
                v_b: zeros(e),
                o_w: mat(vec![e, e]),
                o_b: zeros(e),
                ln1_g: ones(e),
                ln1_b: zeros(e),
                ffn_in_w: mat(vec![e, f]),
                ffn_in_b: zeros(f),
                ffn_out_w: mat(vec![f, e]),
                ffn_out_b: zeros(e),
                ln2_g: ones(e),
                ln2_b: zeros(e),
            });
        }
        let head = MlmHead { dense_w: mat(vec![e, e]), dense_b: zeros(e), ln_g: ones(e), ln_b: zeros(e) };
        Ok(Self {
            config,
            word_embeddings,
            position_embeddings,
            emb_ln_g: ones(e),
            emb_ln_b: zeros(e),
            layers,
            head,
        })
    }

    /// Named weights in the canonical (checkpoint) order.
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("embeddings.word".into(), &self.word_embeddings),
            ("embeddings.position".into(), &self.position_embeddings),
            ("embeddings.ln.gamma".into(), &self.emb_ln_g),
            ("embeddings.ln.beta".into(), &self.emb_ln_b),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let fields: [(&str, &Tensor<T>); 16] = [
                ("attn.q.weight", &l.q_w),
                ("attn.q.bias", &l.q_b),
                ("attn.k.weight", &l.k_w),
                ("attn.k.bias", &l.k_b),
                ("attn.v.weight", &l.v_w),
                ("attn.v.bias", &l.v_b),
                ("attn.out.weight", &l.o_w),
                ("attn.out.bias", &l.o_b),
                ("attn.ln.gamma", &l.ln1_g),
                ("attn.ln.beta", &l.ln1_b),
                ("ffn.in.weight", &l.ffn_in_w),
                ("ffn.in.bias", &l.ffn_in_b),
                ("ffn.out.weight", &l.ffn_out_w),
                ("ffn.out.bias", &l.ffn_out_b),
                ("ffn.ln.gamma", &l.ln2_g),
                ("ffn.ln.beta", &l.ln2_b),
            ];
            out.extend(fields.into_iter().map(|(n, t)| (format!("layer{i}.{n}"), t)));
        }
        out.push(("mlm_head.dense.weight".into(), &self.head.dense_w));
        out.push(("mlm_head.dense.bias".into(), &self.head.dense_b));
        out.push(("mlm_head.ln.gamma".into(), &self.head.ln_g));
        out.push(("mlm_head.ln.beta".into(), &self.head.ln_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = vec![
            &mut self.word_embeddings,
            &mut self.position_embeddings,
            &mut self.emb_ln_g,
            &mut self.emb_ln_b,
        ];
        for l in self.layers.iter_mut() {
            out.extend([
                &mut l.q_w,
                &mut l.q_b,
                &mut l.k_w,
                &mut l.k_b,
                &mut l.v_w,
                &mut l.v_b,
                &mut l.o_w,
                &mut l.o_b,
                &mut l.ln1_g,
                &mut l.ln1_b,
                &mut l.ffn_in_w,
                &mut l.ffn_in_b,
                &mut l.ffn_out_w,
                &mut l.ffn_out_b,
                &mut l.ln2_g,
                &mut l.ln2_b,
            ]);
        }
        out.extend([&mut self.head.dense_w, &mut self.head.dense_b, &mut self.head.ln_g, &mut self.head.ln_b]);
        out
    }

    /// Expected shape of each weight, in [`FrozenLm::tensors`] order.
    pub fn expected_shapes(config: &LmConfig) -> Vec<Vec<usize>> {
        let (e, f) = (config.embed_dim, config.ffn_dim);
        let mut out = vec![vec![config.vocab_size, e], vec![config.max_positions, e], vec![e], vec![e]];
        for _ in 0..config.num_layers {
            out.extend([
                vec![e, e],
                vec![e],
                vec![e, e],
                vec![e],
                vec![e, e],
                vec![e],
                vec![e, e],
                vec![e],
                vec![e],
                vec![e],
                vec![e, f],
                vec![f],
                vec![f, e],
                vec![e],
                vec![e],
                vec![e],
            ]);
        }
        out.extend([vec![e, e], vec![e], vec![e], vec![e]]);
        out
    }

    /// Rebuild a model from weights given in [`FrozenLm::tensors`] order.
    pub fn from_tensors(config: LmConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let shapes = Self::expected_shapes(&config);
        if tensors.len() != shapes.len() {
            return Err(Error::Shape(format!("expected {} weight arrays, got {}", shapes.len(), tensors.len())));
        }
        for (i, (t, s)) in tensors.iter().zip(&shapes).enumerate() {
            if t.shape() != s.as_slice() {
                return Err(Error::Shape(format!("weight {i}: expected {s:?}, got {:?}", t.shape())));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked above");
        let word_embeddings = next();
        let position_embeddings = next();
        let emb_ln_g = next();
        let emb_ln_b = next();
        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            layers.push(EncoderLayer {
                q_w: next(),
                q_b: next(),
                k_w: next(),
                k_b: next(),
                v_w: next(),
                v_b: next(),
                o_w: next(),
                o_b: next(),
                ln1_g: next(),
                ln1_b: next(),
                ffn_in_w: next(),
                ffn_in_b: next(),
                ffn_out_w: next(),
                ffn_out_b: next(),
                ln2_g: next(),
                ln2_b: next(),
            });
        }
        let head = MlmHead { dense_w: next(), dense_b: next(), ln_g: next(), ln_b: next() };
        Ok(Self { config, word_embeddings, position_embeddings, emb_ln_g, emb_ln_b, layers, head })
    }

    pub fn cast<U: Scalar>(&self) -> FrozenLm<U> {
        let tensors = self.tensors().into_iter().map(|(_, t)| t.cast::<U>()).collect();
        FrozenLm::from_tensors(self.config, tensors).expect("same config and shapes")
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// SHA-256 over every weight's name, shape and bit pattern.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in self.tensors() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_f64().to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn set_trainable(&mut self, on: bool) {
        for t in self.tensors_mut() {
            t.set_requires_grad(on);
        }
    }

    /// Register every weight as a graph leaf (borrowed, no copies).
    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>) -> ModelNodes {
        ModelNodes { ids: self.tensors().into_iter().map(|(_, t)| g.input(t)).collect() }
    }

    /// Check an input against the model before encoding.
    pub fn validate_input(&self, input: &MixedInput, prompt_rows: usize) -> Result<()> {
        if input.is_empty() {
            return Err(Error::Invalid("empty input".into()));
        }
        if input.len() > self.config.max_positions {
            return Err(Error::Invalid(format!(
                "input of length {} exceeds max_positions {}; truncate first",
                input.len(),
                self.config.max_positions
            )));
        }
        if input.mask_position >= input.len() {
            return Err(Error::Index { index: input.mask_position, len: input.len() });
        }
        for s in &input.slots {
            match *s {
                Slot::Token(t) if t as usize >= self.config.vocab_size => {
                    return Err(Error::Index { index: t as usize, len: self.config.vocab_size })
                }
                Slot::Prompt(p) if p as usize >= prompt_rows => {
                    return Err(Error::Index { index: p as usize, len: prompt_rows })
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Encode a padded batch. Each input carries the graph node of the
    /// prompt matrix its `Slot::Prompt` entries index into. Padding rows
    /// are `[PAD]` tokens excluded from attention.
    pub fn encode<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        nodes: &ModelNodes,
        batch: &[(&MixedInput, Option<NodeId>)],
    ) -> Result<Encoded> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let seq_len = batch.iter().map(|(m, _)| m.len()).max().unwrap_or(0);
        let mut sources = vec![nodes.ids[0]];
        let mut picks = Vec::with_capacity(seq_len * batch.len());
        let mut pos_picks = Vec::with_capacity(seq_len * batch.len());
        for (input, prompts) in batch {
            let rows = match prompts {
                Some(p) => {
                    let s = g.shape(*p);
                    if s.len() != 2 || s[1] != self.config.embed_dim {
                        return Err(Error::Shape(format!("prompt matrix {s:?} for embed_dim {}", self.config.embed_dim)));
                    }
                    s[0]
                }
                None => 0,
            };
            self.validate_input(input, rows)?;
            let src = match prompts {
                Some(p) => match sources.iter().position(|s| s == p) {
                    Some(i) => i as u32,
                    None => {
                        sources.push(*p);
                        (sources.len() - 1) as u32
                    }
                },
                None => 0,
            };
            for j in 0..seq_len {
                let pick = match input.slots.get(j) {
                    Some(Slot::Token(t)) => (0, *t),
                    Some(Slot::Prompt(r)) => (src, *r),
                    None => (0, self.config.pad_id),
                };
                picks.push(pick);
                pos_picks.push((0u32, j.min(self.config.max_positions - 1) as u32));
            }
        }
        let layout = SeqLayout { seq_len, lens: batch.iter().map(|(m, _)| m.len()).collect() };
        let words = g.gather(&sources, &picks)?;
        let pos = g.gather(&[nodes.ids[1]], &pos_picks)?;
        let sum = g.add(words, pos)?;
        let mut h = g.layer_norm(sum, nodes.ids[2], nodes.ids[3])?;
        let heads = self.config.num_heads;
        for l in 0..self.config.num_layers {
            let w = &nodes.ids[4 + 16 * l..4 + 16 * (l + 1)];
            let q = g.matmul(h, w[0])?;
            let q = g.add_bias(q, w[1])?;
            let k = g.matmul(h, w[2])?;
            let k = g.add_bias(k, w[3])?;
            let v = g.matmul(h, w[4])?;
            let v = g.add_bias(v, w[5])?;
            let a = g.attention(q, k, v, &layout, heads)?;
            let o = g.matmul(a, w[6])?;
            let o = g.add_bias(o, w[7])?;
            let r = g.add(h, o)?;
            let h1 = g.layer_norm(r, w[8], w[9])?;
            let f = g.matmul(h1, w[10])?;
            let f = g.add_bias(f, w[11])?;
            let f = g.gelu(f);
            let f = g.matmul(f, w[12])?;
            let f = g.add_bias(f, w[13])?;
            let r = g.add(h1, f)?;
            h = g.layer_norm(r, w[14], w[15])?;
        }
        Ok(Encoded { hidden: h, layout })
    }

    /// MLM-head features (pre-decoder) at `(batch index, position)` pairs,
    /// as a `[positions.len(), E]` node. No vocabulary projection happens.
    pub fn mlm_features<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        nodes: &ModelNodes,
        enc: &Encoded,
        positions: &[(usize, usize)],
    ) -> Result<NodeId> {
        let mut picks = Vec::with_capacity(positions.len());
        for &(b, p) in positions {
            let len = *enc.layout.lens.get(b).ok_or(Error::Index { index: b, len: enc.layout.batch() })?;
            if p >= len {
                return Err(Error::Index { index: p, len });
            }
            picks.push((0u32, (b * enc.layout.seq_len + p) as u32));
        }
        let rows = g.gather(&[enc.hidden], &picks)?;
        if self.config.identity_head {
            return Ok(rows);
        }
        let n = nodes.ids.len();
        let d = g.matmul(rows, nodes.ids[n - 4])?;
        let d = g.add_bias(d, nodes.ids[n - 3])?;
        let d = g.gelu(d);
        g.layer_norm(d, nodes.ids[n - 2], nodes.ids[n - 1])
    }

    /// Tied-decoder vocabulary logits `features · word_embeddingsᵀ`.
    pub fn vocab_logits(&self, g: &mut Graph<'_, T>, nodes: &ModelNodes, features: NodeId) -> Result<NodeId> {
        g.matmul_bt(features, nodes.ids[0])
    }

    /// Convenience inference path: hidden states of one input as rows.
    pub fn hidden_states(&self, input: &MixedInput, prompts: Option<&Tensor<T>>) -> Result<Vec<Vec<T>>> {
        let mut g = Graph::new();
        let nodes = self.bind(&mut g);
        let p = prompts.map(|t| g.input(t));
        let enc = self.encode(&mut g, &nodes, &[(input, p)])?;
        let e = self.config.embed_dim;
        Ok(g.value(enc.hidden).chunks(e).take(input.len()).map(|r| r.to_vec()).collect())
    }

    /// Convenience inference path: MLM features at the mask position.
    pub fn features(&self, input: &MixedInput, prompts: Option<&Tensor<T>>) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let nodes = self.bind(&mut g);
        let p = prompts.map(|t| g.input(t));
        let enc = self.encode(&mut g, &nodes, &[(input, p)])?;
        let f = self.mlm_features(&mut g, &nodes, &enc, &[(0, input.mask_position)])?;
        Ok(g.value(f).to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub mask_prob: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Fraction of the corpus held out for the accuracy report.
    pub holdout_frac: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { mask_prob: 0.15, steps: 3000, batch_size: 64, lr: 3e-3, seed: 0, holdout_frac: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub final_loss: f64,
    pub heldout_accuracy: f64,
    pub heldout_masked: usize,
}

fn wrap(config: &LmConfig, tokens: &[u32]) -> Vec<u32> {
    let keep = tokens.len().min(config.max_positions.saturating_sub(2));
    let mut seq = Vec::with_capacity(keep + 2);
    seq.push(config.cls_id);
    seq.extend_from_slice(&tokens[..keep]);
    seq.push(config.sep_id);
    seq
}

/// Replace a random `mask_prob` share of the interior tokens with `[MASK]`
/// (at least one). Returns the masked sequence and the masked positions.
fn mask_sequence(seq: &[u32], config: &LmConfig, mask_prob: f64, r: &mut rng::Rng) -> (Vec<u32>, Vec<usize>) {
    let mut out = seq.to_vec();
    let interior = 1..seq.len().saturating_sub(1);
    let mut masked: Vec<usize> = interior.clone().filter(|_| r.random::<f64>() < mask_prob).collect();
    if masked.is_empty() && !interior.is_empty() {
        masked.push(r.random_range(interior));
    }
    for &p in &masked {
        out[p] = config.mask_id;
    }
    (out, masked)
}

/// Train every LM weight by masked-token prediction on `corpus`, then
/// freeze the model. With `steps == 0` the random initialization is
/// returned unchanged.
pub fn pretrain_toy(corpus: &[Vec<u32>], config: LmConfig, pc: &PretrainConfig) -> Result<(FrozenLm<f32>, PretrainReport)> {
    if corpus.iter().all(|s| s.is_empty()) {
        return Err(Error::Invalid("pretraining corpus is empty".into()));
    }
    if !(pc.mask_prob > 0.0 && pc.mask_prob < 1.0) {
        return Err(Error::Config(format!("mask_prob {} outside (0, 1)", pc.mask_prob)));
    }
    if pc.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    for s in corpus {
        if let Some(&t) = s.iter().find(|&&t| t as usize >= config.vocab_size) {
            return Err(Error::Index { index: t as usize, len: config.vocab_size });
        }
    }
    let mut model = FrozenLm::<f32>::init(config, rng::derive(pc.seed, 0))?;
    let sentences: Vec<&Vec<u32>> = corpus.iter().filter(|s| !s.is_empty()).collect();
    let held = ((sentences.len() as f64 * pc.holdout_frac) as usize).min(sentences.len() - 1);
    let (train, heldout) = sentences.split_at(sentences.len() - held);

    let mut r = rng::seeded(rng::derive(pc.seed, 1));
    let mut adam = Adam::new(AdamConfig::default(), model.tensors().iter().map(|(_, t)| t.len()));
    let mut final_loss = f64::NAN;
    if pc.steps > 0 {
        model.set_trainable(true);
    }
    for step in 1..=pc.steps {
        let seqs: Vec<(Vec<u32>, Vec<usize>, Vec<u32>)> = (0..pc.batch_size)
            .map(|_| {
                let s = wrap(&config, train[r.random_range(0..train.len())]);
                let (m, pos) = mask_sequence(&s, &config, pc.mask_prob, &mut r);
                let targets = pos.iter().map(|&p| s[p]).collect();
                (m, pos, targets)
            })
            .collect();
        let inputs: Vec<MixedInput> = seqs.iter().map(|(m, _, _)| MixedInput::from_tokens(m, 0)).collect();
        let grads_flat;
        {
            let mut g = Graph::new();
            let nodes = model.bind(&mut g);
            let batch: Vec<_> = inputs.iter().map(|m| (m, None)).collect();
            let enc = model.encode(&mut g, &nodes, &batch)?;
            let positions: Vec<(usize, usize)> =
                seqs.iter().enumerate().flat_map(|(b, (_, pos, _))| pos.iter().map(move |&p| (b, p))).collect();
            let targets: Vec<usize> = seqs.iter().flat_map(|(_, _, t)| t.iter().map(|&x| x as usize)).collect();
            let feats = model.mlm_features(&mut g, &nodes, &enc, &positions)?;
            let logits = model.vocab_logits(&mut g, &nodes, feats)?;
            let loss = g.cross_entropy(logits, &targets).map_err(|e| match e {
                Error::NonFinite(d) => Error::Diverged { step, detail: d },
                other => other,
            })?;
            final_loss = g.value(loss)[0] as f64;
            if !final_loss.is_finite() {
                return Err(Error::Diverged { step, detail: format!("loss {final_loss}") });
            }
            let grads = g.backward(loss)?;
            grads_flat = nodes
                .ids
                .iter()
                .map(|id| grads.get(*id).map(|s| s.to_vec()).unwrap_or_default())
                .collect::<Vec<_>>();
        }
        let mut grads = grads_flat;
        let mut tensors = model.tensors_mut();
        let mut views: Vec<&mut [f32]> = grads.iter_mut().map(|g| g.as_mut_slice()).collect();
        clip_global_norm(&mut views, 1.0);
        let lr = stlr(step, pc.steps, 0.06, pc.lr)?;
        let mut params: Vec<&mut [f32]> = tensors.iter_mut().map(|t| t.data_mut()).collect();
        let grads_ref: Vec<&[f32]> = grads.iter().map(|g| g.as_slice()).collect();
        adam.step(&mut params, &grads_ref, lr)?;
    }
    model.set_trainable(false);

    // held-out accuracy with a fixed masking stream
    let mut hr = rng::seeded(rng::derive(pc.seed, 2));
    let mut correct = 0usize;
    let mut total = 0usize;
    for chunk in heldout.chunks(32) {
        let seqs: Vec<(Vec<u32>, Vec<usize>, Vec<u32>)> = chunk
            .iter()
            .map(|s| {
                let s = wrap(&config, s);
                let (m, pos) = mask_sequence(&s, &config, pc.mask_prob, &mut hr);
                let t = pos.iter().map(|&p| s[p]).collect();
                (m, pos, t)
            })
            .collect();
        let inputs: Vec<MixedInput> = seqs.iter().map(|(m, _, _)| MixedInput::from_tokens(m, 0)).collect();
        let mut g = Graph::new();
        let nodes = model.bind(&mut g);
        let batch: Vec<_> = inputs.iter().map(|m| (m, None)).collect();
        let enc = model.encode(&mut g, &nodes, &batch)?;
        let positions: Vec<(usize, usize)> =
            seqs.iter().enumerate().flat_map(|(b, (_, pos, _))| pos.iter().map(move |&p| (b, p))).collect();
        let targets: Vec<u32> = seqs.iter().flat_map(|(_, _, t)| t.iter().copied()).collect();
        let feats = model.mlm_features(&mut g, &nodes, &enc, &positions)?;
        let logits = model.vocab_logits(&mut g, &nodes, feats)?;
        for (row, &t) in g.value(logits).chunks(config.vocab_size).zip(&targets) {
            if argmax(row) == t as usize {
                correct += 1;
            }
            total += 1;
        }
    }
    let heldout_accuracy = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
    Ok((model, PretrainReport { final_loss, heldout_accuracy, heldout_masked: total }))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> LmConfig {
        LmConfig { vocab_size: 64, embed_dim: 16, num_layers: 1, num_heads: 2, ffn_dim: 32, max_positions: 16, ..Default::default() }
    }

    #[test]
    fn config_validation() {
        assert!(LmConfig::default().validate().is_ok());
        assert!(LmConfig { num_heads: 3, ..tiny() }.validate().is_err());
        assert!(LmConfig { mask_id: vocab::CLS, ..tiny() }.validate().is_err());
        assert!(LmConfig { pad_id: 64, ..tiny() }.validate().is_err());
    }

    #[test]
    fn zero_layer_encoder_is_embedding_layer_norm() {
        let cfg = LmConfig { num_layers: 0, ..tiny() };
        let m = FrozenLm::<f64>::init(cfg, 1).unwrap();
        let input = MixedInput::from_tokens(&[1, 9, 3, 2], 2);
        let h = m.hidden_states(&input, None).unwrap();
        for (p, row) in h.iter().enumerate() {
            let tok = [1usize, 9, 3, 2][p];
            let x: Vec<f64> = (0..16).map(|j| m.word_embeddings.row(tok).unwrap()[j] + m.position_embeddings.row(p).unwrap()[j]).collect();
            let mean = x.iter().sum::<f64>() / 16.0;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            for j in 0..16 {
                let want = (x[j] - mean) / (var + 1e-5).sqrt();
                assert!((row[j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encode_is_deterministic_and_ignores_padding() {
        let m = FrozenLm::<f32>::init(tiny(), 5).unwrap();
        let a = MixedInput::from_tokens(&[1, 20, 21, 3, 2], 3);
        let b = MixedInput::from_tokens(&[1, 20, 21, 3, 2, 0, 0], 3);
        let h1 = m.hidden_states(&a, None).unwrap();
        let h2 = m.hidden_states(&a, None).unwrap();
        assert_eq!(h1, h2);
        // same sequence padded inside a batch with a longer neighbour
        let mut g = Graph::new();
        let nodes = m.bind(&mut g);
        let enc = m.encode(&mut g, &nodes, &[(&a, None), (&b, None)]).unwrap();
        let rows = g.value(enc.hidden);
        for p in 0..5 {
            assert_eq!(&rows[p * 16..(p + 1) * 16], h1[p].as_slice());
        }
    }

    #[test]
    fn identity_head_returns_hidden_row() {
        let m = FrozenLm::<f64>::init(LmConfig { identity_head: true, ..tiny() }, 2).unwrap();
        let input = MixedInput::from_tokens(&[1, 30, 3, 2], 2);
        let h = m.hidden_states(&input, None).unwrap();
        assert_eq!(m.features(&input, None).unwrap(), h[2]);
    }

    #[test]
    fn tied_decoder_logits() {
        let m = FrozenLm::<f64>::init(tiny(), 3).unwrap();
        let input = MixedInput::from_tokens(&[1, 30, 3, 2], 2);
        let f = m.features(&input, None).unwrap();
        let mut g = Graph::new();
        let nodes = m.bind(&mut g);
        let enc = m.encode(&mut g, &nodes, &[(&input, None)]).unwrap();
        let feats = m.mlm_features(&mut g, &nodes, &enc, &[(0, 2)]).unwrap();
        let logits = m.vocab_logits(&mut g, &nodes, feats).unwrap();
        for v in 0..64 {
            let want: f64 = f.iter().zip(m.word_embeddings.row(v).unwrap()).map(|(a, b)| a * b).sum();
            assert!((g.value(logits)[v] - want).abs() < 1e-12);
        }
        assert!(m.mlm_features(&mut g, &nodes, &enc, &[(0, 4)]).is_err());
    }

    #[test]
    fn over_length_input_is_rejected() {
        let m = FrozenLm::<f32>::init(tiny(), 3).unwrap();
        let input = MixedInput::from_tokens(&[5; 17], 0);
        assert!(m.features(&input, None).is_err());
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let corpus = vec![vec![10u32, 11, 12]];
        let pc = PretrainConfig { steps: 0, seed: 9, ..Default::default() };
        let (m, _) = pretrain_toy(&corpus, tiny(), &pc).unwrap();
        assert_eq!(m, FrozenLm::<f32>::init(tiny(), rng::derive(9, 0)).unwrap());
        assert!(pretrain_toy(&[], tiny(), &pc).is_err());
        assert!(pretrain_toy(&corpus, tiny(), &PretrainConfig { mask_prob: 1.0, ..pc }).is_err());
    }

    #[test]
    fn pretraining_is_deterministic() {
        let corpus: Vec<Vec<u32>> = (0..40).map(|i| vec![10 + (i % 7), 20, 30 + (i % 3)]).collect();
        let pc = PretrainConfig { steps: 5, batch_size: 4, seed: 4, ..Default::default() };
        let (a, _) = pretrain_toy(&corpus, tiny(), &pc).unwrap();
        let (b, _) = pretrain_toy(&corpus, tiny(), &pc).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert!(a.tensors().iter().all(|(_, t)| !t.requires_grad()));
    }
}
