//! Adam without weight decay, the slanted triangular learning-rate
//! schedule, and global gradient-norm clipping.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Slanted triangular schedule: linear warm-up over
/// `w = ceil(warmup_frac * total_steps)` steps to `lr_max`, then linear
/// decay to zero at `total_steps`.
pub fn stlr(step: usize, total_steps: usize, warmup_frac: f64, lr_max: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if step > total_steps {
        return Err(Error::Index { index: step, len: total_steps + 1 });
    }
    if !(warmup_frac > 0.0 && warmup_frac < 1.0) {
        return Err(Error::Config("warmup_frac must lie in (0, 1)".into()));
    }
    // the tolerance keeps e.g. 0.06 * 100 from rounding up to 7
    let w = (libm::ceil(warmup_frac * total_steps as f64 - 1e-9).max(1.0) as usize).min(total_steps);
    if step <= w {
        Ok(lr_max * (step as f64 / w as f64))
    } else {
        Ok(lr_max * ((total_steps - step) as f64 / (total_steps - w) as f64))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam state for a fixed list of parameter buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![T::ZERO; n], vec![T::ZERO; n])).unzip();
        Self { config, step: 0, m, v }
    }

    /// One bias-corrected update of every buffer.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape("optimizer state does not match parameter list".into()));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(Error::Shape("optimizer buffer length".into()));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
        let c1 = T::from_f64(1.0 - libm::pow(beta1, self.step as f64));
        let c2 = T::from_f64(1.0 - libm::pow(beta2, self.step as f64));
        let lr = T::from_f64(lr);
        let eps = T::from_f64(eps);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (T::ONE - b1) * gi;
                v[i] = b2 * v[i] + (T::ONE - b2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scale all buffers jointly so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [&mut [T]], max_norm: f64) -> f64 {
    let sq: f64 = grads.iter().flat_map(|g| g.iter()).map(|v| v.to_f64() * v.to_f64()).sum();
    let norm = libm::sqrt(sq);
    if norm > max_norm {
        let s = T::from_f64(max_norm / (norm + 1e-6));
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
