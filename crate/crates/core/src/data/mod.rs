//! Task specifications, datasets, synthetic task generation, length
//! bucketing and evaluation metrics.

pub mod batching;
pub mod metrics;
pub mod synthetic;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::template::Template;
use crate::trainer::InitStrategy;

pub use batching::bucket_batches;
pub use metrics::{compute_metric, MetricName, MetricValue};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    SingleSentence,
    SentencePair,
    PairRegression,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::SingleSentence => "single_sentence",
            Self::SentencePair => "sentence_pair",
            Self::PairRegression => "pair_regression",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "single_sentence" => Ok(Self::SingleSentence),
            "sentence_pair" => Ok(Self::SentencePair),
            "pair_regression" => Ok(Self::PairRegression),
            _ => Err(Error::Config(format!("unknown task kind `{s}`"))),
        }
    }

    pub fn num_sentences(self) -> u8 {
        match self {
            Self::SingleSentence => 1,
            _ => 2,
        }
    }

    pub fn is_regression(self) -> bool {
        self == Self::PairRegression
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    /// Class names in label order; empty for regression.
    pub classes: Vec<String>,
    /// Inclusive score range for regression tasks.
    pub score_range: Option<(f64, f64)>,
    pub template: String,
    pub metric: MetricName,
    pub init: InitStrategy,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<Template> {
        if self.name.is_empty() || self.name.chars().any(char::is_whitespace) {
            return Err(Error::Config(format!("task name `{}` must be a non-empty word", self.name)));
        }
        if self.kind.is_regression() {
            match self.score_range {
                Some((lo, hi)) if lo < hi && lo.is_finite() && hi.is_finite() => {}
                _ => return Err(Error::Config("regression task needs a score range lo < hi".into())),
            }
            if !matches!(self.metric, MetricName::Pearson | MetricName::Mse) {
                return Err(Error::Config(format!("metric {} is not valid for regression", self.metric.name())));
            }
        } else {
            if self.classes.is_empty() {
                return Err(Error::Config("classification task needs at least one class".into()));
            }
            if matches!(self.metric, MetricName::Pearson | MetricName::Mse) {
                return Err(Error::Config(format!("metric {} is not valid for classification", self.metric.name())));
            }
            if self.metric == MetricName::F1 && self.classes.len() != 2 {
                return Err(Error::Config("f1 needs exactly two classes".into()));
            }
        }
        let t = Template::parse(&self.template)?;
        if t.num_sentences() != self.kind.num_sentences() {
            return Err(Error::Config(format!(
                "template has {} sentence slot(s) but a {} task has {}",
                t.num_sentences(),
                self.kind.name(),
                self.kind.num_sentences()
            )));
        }
        Ok(t)
    }

    /// Output width of the head: class count, or 1 for regression.
    pub fn num_outputs(&self) -> usize {
        if self.kind.is_regression() {
            1
        } else {
            self.classes.len()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Label {
    Class(usize),
    Score(f64),
}

impl Label {
    pub fn as_f64(self) -> f64 {
        match self {
            Self::Class(c) => c as f64,
            Self::Score(s) => s,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub s1: Vec<u32>,
    pub s2: Option<Vec<u32>>,
    pub label: Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Dev => "dev",
            Self::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "dev" => Ok(Self::Dev),
            "test" => Ok(Self::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn golds(&self) -> Vec<f64> {
        self.examples.iter().map(|e| e.label.as_f64()).collect()
    }

    /// Check every example against the task; the error names the 1-based
    /// record number.
    pub fn validate(&self, spec: &TaskSpec, vocab_size: usize) -> Result<()> {
        for (i, ex) in self.examples.iter().enumerate() {
            check_example(ex, spec, vocab_size).map_err(|e| Error::Invalid(format!("record {}: {e}", i + 1)))?;
        }
        Ok(())
    }
}

pub fn check_example(ex: &Example, spec: &TaskSpec, vocab_size: usize) -> Result<()> {
    let pair = spec.kind.num_sentences() == 2;
    match (&ex.s2, pair) {
        (None, true) => return Err(Error::Invalid("sentence-pair task record is missing s2".into())),
        (Some(_), false) => return Err(Error::Invalid("single-sentence task record has s2".into())),
        _ => {}
    }
    if ex.s1.is_empty() || ex.s2.as_ref().is_some_and(|s| s.is_empty()) {
        return Err(Error::Invalid("empty sentence".into()));
    }
    let toks = ex.s1.iter().chain(ex.s2.iter().flatten());
    if let Some(&t) = toks.into_iter().find(|&&t| t as usize >= vocab_size) {
        return Err(Error::Index { index: t as usize, len: vocab_size });
    }
    match (ex.label, spec.score_range) {
        (Label::Class(c), None) if c < spec.classes.len() => Ok(()),
        (Label::Class(c), None) => Err(Error::Invalid(format!("label {c} outside {} classes", spec.classes.len()))),
        (Label::Score(s), Some((lo, hi))) if s >= lo && s <= hi => Ok(()),
        (Label::Score(s), Some((lo, hi))) => Err(Error::Invalid(format!("score {s} outside [{lo}, {hi}]"))),
        _ => Err(Error::Invalid("label type does not match the task kind".into())),
    }
}
