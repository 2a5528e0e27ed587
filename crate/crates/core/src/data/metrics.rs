//! Validation metrics. Predictions and golds are passed as `f64` (class
//! indices for classification).

use alloc::format;
use alloc::vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricName {
    Accuracy,
    /// Binary F1 with class 1 as the positive class.
    F1,
    Matthews,
    Pearson,
    Mse,
}

impl MetricName {
    pub fn name(self) -> &'static str {
        match self {
            Self::Accuracy => "accuracy",
            Self::F1 => "f1",
            Self::Matthews => "matthews",
            Self::Pearson => "pearson",
            Self::Mse => "mse",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(Self::Accuracy),
            "f1" => Ok(Self::F1),
            "matthews" => Ok(Self::Matthews),
            "pearson" => Ok(Self::Pearson),
            "mse" => Ok(Self::Mse),
            _ => Err(Error::Config(format!("unknown metric `{s}`"))),
        }
    }

    pub fn higher_is_better(self) -> bool {
        self != Self::Mse
    }
}

/// A metric value. `degenerate` is set when the statistic is undefined
/// (zero variance or empty denominator) and `value` was defined as 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricValue {
    pub value: f64,
    pub degenerate: bool,
}

impl MetricValue {
    fn ok(value: f64) -> Self {
        Self { value, degenerate: false }
    }

    fn zero() -> Self {
        Self { value: 0.0, degenerate: true }
    }
}

pub fn compute_metric(metric: MetricName, predictions: &[f64], golds: &[f64]) -> Result<MetricValue> {
    if predictions.len() != golds.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            golds.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Invalid("metric over an empty set".into()));
    }
    let n = predictions.len() as f64;
    let pairs = || predictions.iter().zip(golds);
    Ok(match metric {
        MetricName::Accuracy => MetricValue::ok(pairs().filter(|(p, g)| p == g).count() as f64 / n),
        MetricName::Mse => MetricValue::ok(pairs().map(|(p, g)| (p - g) * (p - g)).sum::<f64>() / n),
        MetricName::F1 => {
            let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
            for (&p, &g) in pairs() {
                match (p == 1.0, g == 1.0) {
                    (true, true) => tp += 1.0,
                    (true, false) => fp += 1.0,
                    (false, true) => fneg += 1.0,
                    _ => {}
                }
            }
            let denom = 2.0 * tp + fp + fneg;
            if tp == 0.0 {
                if denom == 0.0 {
                    MetricValue::zero()
                } else {
                    MetricValue::ok(0.0)
                }
            } else {
                MetricValue::ok(2.0 * tp / denom)
            }
        }
        MetricName::Matthews => matthews(predictions, golds)?,
        MetricName::Pearson => pearson(predictions, golds),
    })
}

fn class_index(v: f64) -> Result<usize> {
    if v >= 0.0 && libm::trunc(v) == v && v < 1e6 {
        Ok(v as usize)
    } else {
        Err(Error::Invalid(format!("{v} is not a class index")))
    }
}

/// Multiclass Matthews correlation from the confusion matrix; equals the
/// usual `(TP·TN − FP·FN) / sqrt(...)` for two classes.
fn matthews(predictions: &[f64], golds: &[f64]) -> Result<MetricValue> {
    let mut k = 0;
    for &v in predictions.iter().chain(golds) {
        k = k.max(class_index(v)? + 1);
    }
    let mut pred_count = vec![0.0f64; k];
    let mut gold_count = vec![0.0f64; k];
    let mut correct = 0.0;
    for (&p, &g) in predictions.iter().zip(golds) {
        let (p, g) = (p as usize, g as usize);
        pred_count[p] += 1.0;
        gold_count[g] += 1.0;
        if p == g {
            correct += 1.0;
        }
    }
    let s = predictions.len() as f64;
    let pt: f64 = pred_count.iter().zip(&gold_count).map(|(p, t)| p * t).sum();
    let pp: f64 = pred_count.iter().map(|p| p * p).sum();
    let tt: f64 = gold_count.iter().map(|t| t * t).sum();
    let denom = (s * s - pp) * (s * s - tt);
    if denom <= 0.0 {
        return Ok(MetricValue::zero());
    }
    Ok(MetricValue::ok((correct * s - pt) / libm::sqrt(denom)))
}

fn pearson(x: &[f64], y: &[f64]) -> MetricValue {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return MetricValue::zero();
    }
    MetricValue::ok(sxy / libm::sqrt(sxx * syy))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(metric: MetricName, p: &[f64], g: &[f64]) -> MetricValue {
        compute_metric(metric, p, g).unwrap()
    }

    #[test]
    fn perfect_predictions() {
        let g = [0.0, 1.0, 1.0, 0.0, 2.0];
        assert_eq!(m(MetricName::Accuracy, &g, &g).value, 1.0);
        assert!((m(MetricName::Matthews, &g, &g).value - 1.0).abs() < 1e-12);
        assert!((m(MetricName::Pearson, &g, &g).value - 1.0).abs() < 1e-12);
        assert_eq!(m(MetricName::Mse, &g, &g).value, 0.0);
    }

    #[test]
    fn balanced_confusion() {
        // TP = FP = FN = TN = 1
        let p = [1.0, 1.0, 0.0, 0.0];
        let g = [1.0, 0.0, 1.0, 0.0];
        assert_eq!(m(MetricName::Accuracy, &p, &g).value, 0.5);
        assert_eq!(m(MetricName::Matthews, &p, &g).value, 0.0);
        assert_eq!(m(MetricName::F1, &p, &g).value, 0.5);
    }

    #[test]
    fn degenerate_cases_are_flagged() {
        let r = m(MetricName::Pearson, &[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]);
        assert_eq!(r, MetricValue { value: 0.0, degenerate: true });
        assert!(m(MetricName::Matthews, &[1.0, 1.0], &[0.0, 1.0]).degenerate);
        assert!(m(MetricName::F1, &[0.0, 0.0], &[0.0, 0.0]).degenerate);
        assert!(!m(MetricName::F1, &[0.0, 1.0], &[1.0, 0.0]).degenerate);
    }

    #[test]
    fn input_errors() {
        assert!(compute_metric(MetricName::Accuracy, &[], &[]).is_err());
        assert!(compute_metric(MetricName::Accuracy, &[1.0], &[]).is_err());
        assert!(compute_metric(MetricName::Matthews, &[0.5], &[1.0]).is_err());
    }

    #[test]
    fn names_round_trip() {
        for n in [MetricName::Accuracy, MetricName::F1, MetricName::Matthews, MetricName::Pearson, MetricName::Mse] {
            assert_eq!(MetricName::parse(n.name()).unwrap(), n);
        }
        assert!(!MetricName::Mse.higher_is_better());
    }
}
