//! Task directories: a `task.conf` of `key = value` lines plus one
//! `{split}.jsonl` per split with records `{"s1": …, "s2": …, "label": …}`.
//!
//! Keys: `name`, `kind`, `classes` (comma separated, classification),
//! `range` (`lo,hi`, regression), `template`, `metric` and `init`. Blank
//! lines and lines starting with `#` are ignored. A classification label
//! is a class name or a class index; a regression label is a number.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use warp_core::data::{check_example, Dataset, Example, Label, MetricName, Split, TaskKind, TaskSpec};
use warp_core::trainer::{InitStrategy, Prediction};
use warp_core::vocab::Vocab;

use crate::error::{format_err, io_err, Error, Result};

pub const CONF_FILE: &str = "task.conf";

const KEYS: [&str; 7] = ["name", "kind", "classes", "range", "template", "metric", "init"];

pub fn parse_conf(text: &str, path: &Path) -> Result<TaskSpec> {
    let mut map: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let record = |message: String| Error::Record { path: path.to_path_buf(), line: i + 1, message };
        let (k, v) = line.split_once('=').ok_or_else(|| record("expected `key = value`".into()))?;
        let k = k.trim();
        if !KEYS.contains(&k) {
            return Err(record(format!("unknown key `{k}`")));
        }
        if map.insert(k, (i + 1, v.trim())).is_some() {
            return Err(record(format!("key `{k}` given twice")));
        }
    }
    let get = |k: &str| map.get(k).map(|&(_, v)| v).ok_or_else(|| format_err(path, format!("missing key `{k}`")));
    let at = |k: &str, e: warp_core::Error| match map.get(k) {
        Some(&(line, _)) => Error::Record { path: path.to_path_buf(), line, message: e.to_string() },
        None => format_err(path, e.to_string()),
    };
    let kind = TaskKind::parse(get("kind")?).map_err(|e| at("kind", e))?;
    let metric = MetricName::parse(get("metric")?).map_err(|e| at("metric", e))?;
    let init = match map.get("init") {
        Some(&(_, v)) => InitStrategy::parse(v).map_err(|e| at("init", e))?,
        None => InitStrategy::Mask,
    };
    let classes = match map.get("classes") {
        Some(&(_, v)) => v.split(',').map(|c| c.trim().to_string()).filter(|c| !c.is_empty()).collect(),
        None => Vec::new(),
    };
    let score_range = match map.get("range") {
        Some(&(line, v)) => {
            let bad = || Error::Record { path: path.to_path_buf(), line, message: format!("range `{v}` is not `lo,hi`") };
            let (lo, hi) = v.split_once(',').ok_or_else(bad)?;
            Some((lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?))
        }
        None => None,
    };
    if kind.is_regression() == !classes.is_empty() {
        let what = if kind.is_regression() { "a regression task takes `range`, not `classes`" } else { "missing key `classes`" };
        return Err(format_err(path, what));
    }
    let spec = TaskSpec { name: get("name")?.to_string(), kind, classes, score_range, template: get("template")?.to_string(), metric, init };
    spec.validate().map_err(|e| format_err(path, e.to_string()))?;
    Ok(spec)
}

pub fn render_conf(spec: &TaskSpec) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "name = {}", spec.name);
    let _ = writeln!(out, "kind = {}", spec.kind.name());
    match spec.score_range {
        Some((lo, hi)) => {
            let _ = writeln!(out, "range = {lo},{hi}");
        }
        None => {
            let _ = writeln!(out, "classes = {}", spec.classes.join(","));
        }
    }
    let _ = writeln!(out, "template = {}", spec.template);
    let _ = writeln!(out, "metric = {}", spec.metric.name());
    let _ = writeln!(out, "init = {}", spec.init);
    out
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    s1: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    s2: Option<String>,
    label: serde_json::Value,
}

fn parse_label(v: &serde_json::Value, spec: &TaskSpec) -> std::result::Result<Label, String> {
    if spec.kind.is_regression() {
        return v.as_f64().map(Label::Score).ok_or_else(|| format!("label {v} is not a number"));
    }
    if let Some(name) = v.as_str() {
        return spec.classes.iter().position(|c| c == name).map(Label::Class).ok_or_else(|| format!("unknown class `{name}`"));
    }
    match v.as_u64() {
        Some(i) => Ok(Label::Class(i as usize)),
        None => Err(format!("label {v} is neither a class name nor an index")),
    }
}

/// Parse JSONL records; errors name the file and line.
pub fn parse_split(text: &str, path: &Path, spec: &TaskSpec, vocab: &Vocab, split: Split) -> Result<Dataset> {
    let mut examples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = |message: String| Error::Record { path: path.to_path_buf(), line: i + 1, message };
        let r: Record = serde_json::from_str(line).map_err(|e| record(e.to_string()))?;
        let label = parse_label(&r.label, spec).map_err(record)?;
        let ex = Example { s1: vocab.encode(&r.s1), s2: r.s2.as_deref().map(|s| vocab.encode(s)), label };
        check_example(&ex, spec, vocab.len()).map_err(|e| record(e.to_string()))?;
        examples.push(ex);
    }
    Ok(Dataset { split, examples })
}

pub fn render_split(data: &Dataset, spec: &TaskSpec, vocab: &Vocab) -> String {
    let mut out = String::new();
    for ex in &data.examples {
        let label = match ex.label {
            Label::Class(c) => serde_json::Value::from(spec.classes[c].as_str()),
            Label::Score(s) => serde_json::Value::from(s),
        };
        let r = Record { s1: vocab.decode(&ex.s1), s2: ex.s2.as_ref().map(|s| vocab.decode(s)), label };
        out.push_str(&serde_json::to_string(&r).expect("plain record serializes"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDir {
    pub spec: TaskSpec,
    pub train: Dataset,
    pub dev: Dataset,
    /// Present when the directory has a `test.jsonl`.
    pub test: Option<Dataset>,
}

impl TaskDir {
    pub fn split(&self, split: Split) -> Option<&Dataset> {
        match split {
            Split::Train => Some(&self.train),
            Split::Dev => Some(&self.dev),
            Split::Test => self.test.as_ref(),
        }
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

pub fn split_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.jsonl", split.name()))
}

/// Load `task.conf`, `train.jsonl`, `dev.jsonl` and, if present,
/// `test.jsonl`, tokenizing with `vocab`.
pub fn load_task(dir: &Path, vocab: &Vocab) -> Result<TaskDir> {
    let conf = dir.join(CONF_FILE);
    let spec = parse_conf(&read(&conf)?, &conf)?;
    let load = |split: Split| -> Result<Dataset> {
        let p = split_path(dir, split);
        parse_split(&read(&p)?, &p, &spec, vocab, split)
    };
    let train = load(Split::Train)?;
    let dev = load(Split::Dev)?;
    let test = if split_path(dir, Split::Test).exists() { Some(load(Split::Test)?) } else { None };
    Ok(TaskDir { spec, train, dev, test })
}

pub fn write_task(dir: &Path, task: &TaskDir, vocab: &Vocab) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let write = |p: PathBuf, s: String| std::fs::write(&p, s).map_err(io_err(&p));
    write(dir.join(CONF_FILE), render_conf(&task.spec))?;
    for d in [Some(&task.train), Some(&task.dev), task.test.as_ref()].into_iter().flatten() {
        write(split_path(dir, d.split), render_split(d, &task.spec, vocab))?;
    }
    Ok(())
}

/// One prediction per line: the class name or the score.
pub fn render_predictions(preds: &[Prediction], spec: &TaskSpec) -> String {
    let mut out = String::new();
    for p in preds {
        match p {
            Prediction::Class { label, .. } => out.push_str(spec.classes.get(*label).map_or("?", String::as_str)),
            Prediction::Score(s) => {
                let _ = write!(out, "{s}");
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_text(kind: &str, extra: &str) -> String {
        format!("# demo\nname = demo\nkind = {kind}\n{extra}\ntemplate = [CLS] {{s1}} [MASK] [SEP]\nmetric = accuracy\n")
    }

    #[test]
    fn minimal_single_sentence_task() {
        let p = Path::new("task.conf");
        let s = parse_conf(&spec_text("single_sentence", "classes = neg, pos"), p).unwrap();
        assert_eq!(s.classes, vec!["neg", "pos"]);
        assert_eq!(s.num_outputs(), 2);
        assert_eq!(s.init, InitStrategy::Mask);
        assert_eq!(parse_conf(&render_conf(&s), p).unwrap(), s);
    }

    #[test]
    fn conf_errors_name_the_line() {
        let p = Path::new("t.conf");
        let e = parse_conf(&spec_text("single_sentence", "classes = a,b\nfoo = 1"), p).unwrap_err();
        assert_eq!(e.to_string(), "t.conf:5: unknown key `foo`");
        let e = parse_conf(&spec_text("bogus", "classes = a,b"), p).unwrap_err();
        assert!(e.to_string().starts_with("t.conf:3: "), "{e}");
        assert!(parse_conf(&spec_text("single_sentence", ""), p).unwrap_err().to_string().contains("classes"));
        assert!(parse_conf(&spec_text("pair_regression", "range = 1"), p).is_err());
    }

    #[test]
    fn pair_record_missing_s2_is_line_numbered() {
        let v = Vocab::synthetic(64).unwrap();
        let conf = "name = p\nkind = sentence_pair\nclasses = no,yes\ntemplate = [CLS] {s1} [SEP] {s2} [MASK] [SEP]\nmetric = accuracy";
        let spec = parse_conf(conf, Path::new("task.conf")).unwrap();
        let text = "{\"s1\": \"it was\", \"s2\": \"good\", \"label\": \"yes\"}\n{\"s1\": \"it\", \"label\": 0}\n";
        let e = parse_split(text, Path::new("dev.jsonl"), &spec, &v, Split::Dev).unwrap_err();
        assert!(e.to_string().starts_with("dev.jsonl:2: "), "{e}");
    }

    #[test]
    fn regression_label_outside_range_is_rejected() {
        let v = Vocab::synthetic(64).unwrap();
        let conf = "name = r\nkind = pair_regression\nrange = 1,5\ntemplate = [CLS] {s1} [SEP] {s2} [MASK] [SEP]\nmetric = pearson";
        let spec = parse_conf(conf, Path::new("task.conf")).unwrap();
        let ok = "{\"s1\": \"a\", \"s2\": \"b\", \"label\": 2.5}";
        assert_eq!(parse_split(ok, Path::new("x"), &spec, &v, Split::Dev).unwrap().examples[0].label, Label::Score(2.5));
        let bad = "{\"s1\": \"a\", \"s2\": \"b\", \"label\": 7}";
        assert!(parse_split(bad, Path::new("x"), &spec, &v, Split::Dev).unwrap_err().to_string().contains("outside"));
    }
}
