//! Length bucketing under token and example caps.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;

/// Group example indices into batches.
///
/// Examples are sorted by length jittered by a uniform factor in
/// `[1 - padding_noise, 1 + padding_noise]`, packed greedily so that
/// `count * longest <= max_tokens` and `count <= max_examples`, and the
/// batch order is shuffled. Every index appears exactly once.
pub fn bucket_batches(
    lengths: &[usize],
    max_tokens: usize,
    max_examples: usize,
    padding_noise: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if max_examples == 0 {
        return Err(Error::Config("max_examples must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&padding_noise) {
        return Err(Error::Config(format!("padding_noise {padding_noise} outside [0, 1)")));
    }
    if let Some((i, &len)) = lengths.iter().enumerate().find(|(_, &l)| l > max_tokens) {
        return Err(Error::Invalid(format!(
            "example {i} has {len} tokens, more than max_tokens {max_tokens}; truncate it first"
        )));
    }
    let mut r = rng::seeded(seed);
    let mut keyed: Vec<(f64, usize)> = lengths
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let jitter = if padding_noise > 0.0 { r.random_range(-padding_noise..=padding_noise) } else { 0.0 };
            (l as f64 * (1.0 + jitter), i)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut longest = 0;
    for (_, i) in keyed {
        let l = lengths[i];
        let fits = current.len() < max_examples && (current.len() + 1) * longest.max(l) <= max_tokens;
        if !fits && !current.is_empty() {
            batches.push(core::mem::take(&mut current));
            longest = 0;
        }
        longest = longest.max(l);
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches.shuffle(&mut r);
    Ok(batches)
}
