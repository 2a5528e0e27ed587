//! Nearest-token interpretation of learned embeddings and storage
//! accounting for the ways of serving many tasks.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::template::Template;
use crate::trainer::{Head, WarpParameters};
use crate::vocab::Vocab;

#[derive(Debug, Clone, PartialEq)]
pub struct TokenNeighbor {
    pub id: u32,
    pub word: String,
    pub similarity: f64,
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    libm::sqrt(v.map(|x| x * x).sum())
}

/// The `k` vocabulary rows closest to `embedding` by cosine similarity,
/// descending; equal similarities are ordered by token id. Rows with zero
/// norm have similarity 0.
pub fn nearest_tokens<T: Scalar>(embedding: &[T], words: &Tensor<T>, vocab: &Vocab, k: usize) -> Result<Vec<TokenNeighbor>> {
    let (v, e) = words.dims2()?;
    if embedding.len() != e {
        return Err(Error::Shape(format!("query of dim {} against embeddings of dim {e}", embedding.len())));
    }
    if k > v {
        return Err(Error::Index { index: k, len: v });
    }
    let qn = norm(embedding.iter().map(|x| x.to_f64()));
    if qn == 0.0 {
        return Err(Error::Invalid("cosine similarity of a zero vector is undefined".into()));
    }
    let mut sims: Vec<(f64, u32)> = words
        .data()
        .chunks(e)
        .enumerate()
        .map(|(id, row)| {
            let rn = norm(row.iter().map(|x| x.to_f64()));
            let dot: f64 = row.iter().zip(embedding).map(|(a, b)| a.to_f64() * b.to_f64()).sum();
            let sim = if rn == 0.0 { 0.0 } else { dot / (qn * rn) };
            // adding 0.0 turns -0.0 into 0.0 so orthogonal rows tie by id
            (sim + 0.0, id as u32)
        })
        .collect();
    sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(sims
        .into_iter()
        .take(k)
        .map(|(similarity, id)| TokenNeighbor { id, word: vocab.word(id).to_string(), similarity })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Approach {
    LinearProbe,
    FullFineTune,
    SingleLayer,
    Distilled,
    Adapters,
    Warp,
}

/// Inputs to the storage formulas. `m` is the shared model size, `m0` the
/// distilled model size, `n` the task count, `e` the embedding size, `e_adapter`
/// the adapter bottleneck, `c` the class count and `k` the prompt count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StorageModel {
    pub m: Option<u64>,
    pub m0: Option<u64>,
    pub n: Option<u64>,
    pub e: Option<u64>,
    pub e_adapter: Option<u64>,
    pub c: Option<u64>,
    pub k: Option<u64>,
}

/// Parameters stored to serve `n` tasks:
///
/// | approach      | count          |
/// |---------------|----------------|
/// | linear probe  | `M + E·C·N`    |
/// | fine-tuning   | `M·N`          |
/// | single layer  | `M + N·E·(E+C)`|
/// | distilled     | `M0·N`         |
/// | adapters      | `M + N·E·E'`   |
/// | prompts       | `M + N·E·(C+K)`|
pub fn storage_cost(approach: Approach, s: &StorageModel) -> Result<u64> {
    let get = |v: Option<u64>, name: &str| v.ok_or_else(|| Error::Config(format!("storage model needs `{name}`")));
    let overflow = || Error::Invalid("parameter count overflows u64".into());
    let mul = |a: u64, b: u64| a.checked_mul(b).ok_or_else(overflow);
    let add = |a: u64, b: u64| a.checked_add(b).ok_or_else(overflow);
    match approach {
        Approach::LinearProbe => add(get(s.m, "M")?, mul(mul(get(s.e, "E")?, get(s.c, "C")?)?, get(s.n, "N")?)?),
        Approach::FullFineTune => mul(get(s.m, "M")?, get(s.n, "N")?),
        Approach::SingleLayer => {
            let e = get(s.e, "E")?;
            add(get(s.m, "M")?, mul(mul(get(s.n, "N")?, e)?, add(e, get(s.c, "C")?)?)?)
        }
        Approach::Distilled => mul(get(s.m0, "M0")?, get(s.n, "N")?),
        Approach::Adapters => add(get(s.m, "M")?, mul(mul(get(s.n, "N")?, get(s.e, "E")?)?, get(s.e_adapter, "E'")?)?),
        Approach::Warp => {
            add(get(s.m, "M")?, mul(mul(get(s.n, "N")?, get(s.e, "E")?)?, add(get(s.c, "C")?, get(s.k, "K")?)?)?)
        }
    }
}

/// Trainable scalars of a parameter set.
pub fn trainable_census<T: Scalar>(params: &WarpParameters<T>) -> usize {
    params.census()
}

/// Plain-text table of the nearest words to each prompt embedding, grouped
/// by position relative to the sentences, and to each verbalizer.
pub fn interpretation_report<T: Scalar>(
    params: &WarpParameters<T>,
    template: &Template,
    words: &Tensor<T>,
    vocab: &Vocab,
    classes: &[String],
    top_k: usize,
) -> Result<String> {
    let mut out = String::new();
    let fmt_row = |out: &mut String, label: &str, query: &[T]| -> Result<()> {
        let _ = write!(out, "  {label:<12}");
        match nearest_tokens(query, words, vocab, top_k) {
            Ok(ns) => {
                for n in ns {
                    let _ = write!(out, " {}({:.3})", n.word, n.similarity);
                }
            }
            Err(Error::Invalid(_)) => out.push_str(" (zero vector)"),
            Err(e) => return Err(e),
        }
        out.push('\n');
        Ok(())
    };
    let groups = template.prompt_groups();
    for (g, title) in [(0u8, "before"), (1, "between"), (2, "after")] {
        let members: Vec<usize> = groups.iter().filter(|(_, grp)| *grp == g).map(|(i, _)| *i).collect();
        if members.is_empty() {
            continue;
        }
        let _ = writeln!(out, "prompts ({title})");
        for i in members {
            fmt_row(&mut out, &format!("[P_{i}]"), params.prompts.row(i - 1)?)?;
        }
    }
    match &params.head {
        Head::Verbalizer(v) => {
            let _ = writeln!(out, "verbalizers");
            for c in 0..v.shape()[0] {
                let label = classes.get(c).cloned().unwrap_or_else(|| format!("class {c}"));
                fmt_row(&mut out, &label, v.row(c)?)?;
            }
        }
        Head::Regression { weight, .. } => {
            let _ = writeln!(out, "regression head");
            fmt_row(&mut out, "weight", weight.data())?;
        }
    }
    Ok(out)
}
