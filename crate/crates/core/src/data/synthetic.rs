//! Desk-scale synthetic tasks with a matching pretraining corpus.
//!
//! Each generator emits task examples and a corpus drawn from the same
//! sentence distribution, where the corpus spells the label out in words
//! (`... . it was good`, `... ? yes , ...`). A model pretrained on the
//! corpus therefore already associates the deciding tokens with the answer
//! words, which is what prompt training exploits.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;

use super::{Dataset, Example, Label, MetricName, Split, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::template::Template;
use crate::trainer::InitStrategy;
use crate::vocab::Vocab;

/// Corpus sentences generated per task.
pub const CORPUS_SIZE: usize = 4000;

/// Share of keyword sentences containing `not`, which flips the label
/// relative to the keyword polarity.
/// Filler words per task sentence are drawn from `4..=TASK_MAX_FILLERS`.
pub const TASK_MAX_FILLERS: usize = 10;

/// Corpus sentences run longer than task sentences so that pretraining
/// covers the positions task text reaches once prompt slots are inserted.
pub const CORPUS_MAX_FILLERS: usize = 16;

pub const NEGATION_RATE: f64 = 0.25;

/// Prompt count of the generated task's default template.
pub const DEFAULT_PROMPTS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Two to four keywords, all from one of two disjoint sets, decide the
    /// label; a `not` anywhere in the sentence flips it.
    KeywordSentiment,
    /// Whether the two sentences share a planted topic token.
    PairMatch,
    /// Token overlap of the two sentences mapped to a score in [1, 5].
    PairScore,
}

impl SyntheticKind {
    pub const ALL: [Self; 3] = [Self::KeywordSentiment, Self::PairMatch, Self::PairScore];

    pub fn name(self) -> &'static str {
        match self {
            Self::KeywordSentiment => "keyword-sentiment",
            Self::PairMatch => "pair-match",
            Self::PairScore => "pair-score",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown synthetic task `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub corpus: Vec<Vec<u32>>,
    pub spec: TaskSpec,
    pub train: Dataset,
    pub dev: Dataset,
}

struct Gen<'a> {
    vocab: &'a Vocab,
    fillers: Vec<u32>,
}

impl Gen<'_> {
    fn word(&self, w: &str) -> u32 {
        self.vocab.id(w).unwrap_or(crate::vocab::UNK)
    }

    fn fillers(&self, r: &mut Rng, n: usize) -> Vec<u32> {
        (0..n).map(|_| *self.fillers.choose(r).unwrap_or(&crate::vocab::UNK)).collect()
    }

    fn keyword_sentence(&self, r: &mut Rng, label: usize, max_fillers: usize) -> Vec<u32> {
        let l = self.vocab.layout();
        let negated = r.random_bool(NEGATION_RATE);
        let set = if (label == 1) != negated { l.positive.clone() } else { l.negative.clone() };
        // several same-polarity keywords per sentence: a lone keyword among
        // fillers gives masked-token training too little signal to pick up
        let len = r.random_range(4..=max_fillers);
        let mut s = self.fillers(r, len);
        for _ in 0..r.random_range(2..=4) {
            let at = r.random_range(0..=s.len());
            s.insert(at, r.random_range(set.clone()));
        }
        if negated {
            let at = r.random_range(0..=s.len());
            s.insert(at, self.word("not"));
        }
        s
    }

    fn topic_pair(&self, r: &mut Rng, label: usize) -> (Vec<u32>, Vec<u32>) {
        let topics = self.vocab.layout().topics.clone();
        let a = r.random_range(topics.clone());
        let b = if label == 1 {
            a
        } else {
            loop {
                let b = r.random_range(topics.clone());
                if b != a {
                    break b;
                }
            }
        };
        let mut plant = |t: u32| {
            let len = r.random_range(3..=7);
            let mut s = self.fillers(r, len);
            s.insert(r.random_range(0..=len), t);
            s
        };
        (plant(a), plant(b))
    }

    /// Two 5-token sentences sharing `k` tokens; the score is
    /// `1 + 4 * jaccard`.
    fn overlap_pair(&self, r: &mut Rng) -> (Vec<u32>, Vec<u32>, f64) {
        let k = r.random_range(0..=5usize);
        let mut pool = self.fillers.clone();
        pool.shuffle(r);
        let s1: Vec<u32> = pool[..5].to_vec();
        let mut s2: Vec<u32> = s1[..k].to_vec();
        s2.extend_from_slice(&pool[5..10 - k]);
        s2.shuffle(r);
        let jaccard = k as f64 / (10 - k) as f64;
        (s1, s2, 1.0 + 4.0 * jaccard)
    }
}

fn balanced_labels(r: &mut Rng, n: usize) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    labels.shuffle(r);
    labels
}

fn examples(g: &Gen, kind: SyntheticKind, n: usize, r: &mut Rng) -> Vec<Example> {
    match kind {
        SyntheticKind::KeywordSentiment => balanced_labels(r, n)
            .into_iter()
            .map(|y| Example { s1: g.keyword_sentence(r, y, TASK_MAX_FILLERS), s2: None, label: Label::Class(y) })
            .collect(),
        SyntheticKind::PairMatch => balanced_labels(r, n)
            .into_iter()
            .map(|y| {
                let (a, b) = g.topic_pair(r, y);
                Example { s1: a, s2: Some(b), label: Label::Class(y) }
            })
            .collect(),
        SyntheticKind::PairScore => (0..n)
            .map(|_| {
                let (a, b, s) = g.overlap_pair(r);
                Example { s1: a, s2: Some(b), label: Label::Score(s) }
            })
            .collect(),
    }
}

fn corpus_line(g: &Gen, kind: SyntheticKind, r: &mut Rng) -> Vec<u32> {
    match kind {
        SyntheticKind::KeywordSentiment => {
            let y = r.random_range(0..2);
            let mut s = g.keyword_sentence(r, y, CORPUS_MAX_FILLERS);
            let answer = if y == 1 { "good" } else { "bad" };
            s.extend([".", "it", "was", answer].iter().map(|w| g.word(w)));
            s
        }
        SyntheticKind::PairMatch => {
            let y = r.random_range(0..2);
            let (mut a, b) = g.topic_pair(r, y);
            a.extend(["?", if y == 1 { "yes" } else { "no" }, ","].iter().map(|w| g.word(w)));
            a.extend(b);
            a
        }
        SyntheticKind::PairScore => {
            let (mut a, b, score) = g.overlap_pair(r);
            a.extend(["?", if score >= 3.0 { "high" } else { "low" }, ","].iter().map(|w| g.word(w)));
            a.extend(b);
            a
        }
    }
}

/// Generate a task, its train/dev splits and a pretraining corpus. Fully
/// determined by `(kind, vocab size, n_train, n_dev, seed)`.
pub fn generate_synthetic(
    kind: SyntheticKind,
    vocab: &Vocab,
    n_train: usize,
    n_dev: usize,
    seed: u64,
) -> Result<SyntheticTask> {
    if vocab.len() < crate::vocab::MIN_VOCAB {
        return Err(Error::Config(format!("vocabulary of {} words is too small", vocab.len())));
    }
    let g = Gen { vocab, fillers: vocab.layout().fillers.clone().collect() };
    let train = examples(&g, kind, n_train, &mut rng::seeded(rng::derive(seed, 0)));
    let dev = examples(&g, kind, n_dev, &mut rng::seeded(rng::derive(seed, 1)));
    let mut cr = rng::seeded(rng::derive(seed, 2));
    let corpus = (0..CORPUS_SIZE).map(|_| corpus_line(&g, kind, &mut cr)).collect();

    let (task_kind, classes, score_range, metric): (TaskKind, Vec<String>, _, _) = match kind {
        SyntheticKind::KeywordSentiment => (
            TaskKind::SingleSentence,
            ["negative", "positive"].iter().map(|s| s.to_string()).collect(),
            None,
            MetricName::Accuracy,
        ),
        SyntheticKind::PairMatch => (
            TaskKind::SentencePair,
            ["different", "same"].iter().map(|s| s.to_string()).collect(),
            None,
            MetricName::Accuracy,
        ),
        SyntheticKind::PairScore => (TaskKind::PairRegression, Vec::new(), Some((1.0, 5.0)), MetricName::Pearson),
    };
    let spec = TaskSpec {
        name: kind.name().to_string(),
        kind: task_kind,
        classes,
        score_range,
        template: Template::default_for(task_kind.num_sentences(), DEFAULT_PROMPTS).render(),
        metric,
        init: InitStrategy::Mask,
    };
    Ok(SyntheticTask {
        corpus,
        spec,
        train: Dataset { split: Split::Train, examples: train },
        dev: Dataset { split: Split::Dev, examples: dev },
    })
}

/// Manual prompt and verbalizer words that mirror the corpus pattern of a
/// synthetic task, for `ManualText` initialization.
pub fn manual_words(kind: SyntheticKind) -> (Vec<String>, Vec<String>) {
    let w = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    match kind {
        SyntheticKind::KeywordSentiment => (w(&[".", "it", "was"]), w(&["bad", "good"])),
        SyntheticKind::PairMatch => (w(&["?", ","]), w(&["no", "yes"])),
        SyntheticKind::PairScore => (w(&["?", ","]), Vec::new()),
    }
}
