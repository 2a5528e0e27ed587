//! Templates place prompt slots, sentences, `[MASK]` and special tokens.
//!
//! Textual form, whitespace separated:
//!
//! ```text
//! [CLS] [P_1] {s1} [P_2] [P_3] [P_4] [MASK] [SEP]
//! [CLS] " {s1} " ? [MASK] . " {s2} " ! [SEP]
//! ```
//!
//! `[CLS]`, `[SEP]` and `[MASK]` are special tokens, `[P_i]` is the i-th
//! trainable prompt slot (1-based, no gaps), `{s1}`/`{s2}` are sentence
//! slots and anything else is literal text resolved through the vocabulary.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::lm::{MixedInput, Slot};
use crate::vocab::{self, Vocab};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Element {
    Cls,
    Sep,
    Mask,
    /// 1-based prompt index.
    Prompt(usize),
    /// Sentence 1 or 2.
    Sentence(u8),
    Literal(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    elements: Vec<Element>,
    prompt_count: usize,
    num_sentences: u8,
}

fn err(column: usize, message: impl Into<String>) -> Error {
    Error::Template { column, message: message.into() }
}

impl Template {
    pub fn parse(spec: &str) -> Result<Self> {
        let chars: Vec<char> = spec.chars().collect();
        let mut elements = Vec::new();
        let mut columns = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            let col = i + 1;
            if c.is_whitespace() {
                i += 1;
                continue;
            }
            match c {
                '[' => {
                    let end = chars[i..].iter().position(|&x| x == ']').map(|p| i + p);
                    let Some(end) = end else { return Err(err(col, "unclosed `[`")) };
                    let name: String = chars[i + 1..end].iter().collect();
                    let el = match name.as_str() {
                        "CLS" => Element::Cls,
                        "SEP" => Element::Sep,
                        "MASK" => Element::Mask,
                        p if p.starts_with("P_") => match p[2..].parse::<usize>() {
                            Ok(n) if n >= 1 => Element::Prompt(n),
                            _ => return Err(err(col, format!("bad prompt slot `[{name}]`"))),
                        },
                        _ => return Err(err(col, format!("unknown bracket token `[{name}]`"))),
                    };
                    elements.push(el);
                    columns.push(col);
                    i = end + 1;
                }
                '{' => {
                    let end = chars[i..].iter().position(|&x| x == '}').map(|p| i + p);
                    let Some(end) = end else { return Err(err(col, "unclosed `{`")) };
                    let name: String = chars[i + 1..end].iter().collect();
                    let el = match name.as_str() {
                        "s1" => Element::Sentence(1),
                        "s2" => Element::Sentence(2),
                        _ => return Err(err(col, format!("undefined sentence slot `{{{name}}}`"))),
                    };
                    elements.push(el);
                    columns.push(col);
                    i = end + 1;
                }
                ']' | '}' => return Err(err(col, format!("unmatched `{c}`"))),
                _ => {
                    let start = i;
                    while i < chars.len() && !chars[i].is_whitespace() && !matches!(chars[i], '[' | ']' | '{' | '}') {
                        i += 1;
                    }
                    elements.push(Element::Literal(chars[start..i].iter().collect()));
                    columns.push(col);
                }
            }
        }
        Self::from_elements_at(elements, &columns, chars.len() + 1)
    }

    pub fn from_elements(elements: Vec<Element>) -> Result<Self> {
        let cols: Vec<usize> = (1..=elements.len()).collect();
        let end = elements.len() + 1;
        Self::from_elements_at(elements, &cols, end)
    }

    fn from_elements_at(elements: Vec<Element>, columns: &[usize], end_col: usize) -> Result<Self> {
        let mut mask_seen = false;
        let mut prompts: Vec<usize> = Vec::new();
        let mut sentences = [false; 2];
        for (el, &col) in elements.iter().zip(columns) {
            match el {
                Element::Mask => {
                    if mask_seen {
                        return Err(err(col, "duplicate [MASK]"));
                    }
                    mask_seen = true;
                }
                Element::Prompt(n) => {
                    if prompts.contains(n) {
                        return Err(err(col, format!("duplicate prompt slot [P_{n}]")));
                    }
                    prompts.push(*n);
                }
                Element::Sentence(s) => {
                    let idx = (*s as usize).wrapping_sub(1);
                    if idx >= 2 {
                        return Err(err(col, format!("undefined sentence slot {{s{s}}}")));
                    }
                    if sentences[idx] {
                        return Err(err(col, format!("sentence slot {{s{s}}} used twice")));
                    }
                    sentences[idx] = true;
                }
                Element::Literal(t) if t.is_empty() => return Err(err(col, "empty literal")),
                _ => {}
            }
        }
        if !mask_seen {
            return Err(err(end_col, "template has no [MASK]"));
        }
        if !sentences[0] {
            return Err(err(end_col, "template has no {s1} slot"));
        }
        let k = prompts.len();
        if let Some(&bad) = prompts.iter().find(|&&n| n > k) {
            return Err(err(end_col, format!("prompt slots must be numbered 1..{k} without gaps (found [P_{bad}])")));
        }
        let num_sentences = if sentences[1] { 2 } else { 1 };
        Ok(Self { elements, prompt_count: k, num_sentences })
    }

    /// Default layout for `k` prompts. Single sentence:
    /// `[CLS] P… {s1} P… [MASK] [SEP]` with a quarter of the prompts before
    /// the sentence. Pairs keep `[MASK]` between the sentences.
    pub fn default_for(num_sentences: u8, k: usize) -> Self {
        let mut els = Vec::new();
        let mut next = 1..;
        let mut prompts = |n: usize, els: &mut Vec<Element>| {
            for _ in 0..n {
                els.push(Element::Prompt(next.next().unwrap_or(0)));
            }
        };
        els.push(Element::Cls);
        if num_sentences < 2 {
            let before = k / 4;
            prompts(before, &mut els);
            els.push(Element::Sentence(1));
            prompts(k - before, &mut els);
            els.push(Element::Mask);
        } else {
            let outer = k / 4;
            let mid = k - 2 * outer;
            let mid_a = mid.div_ceil(2);
            prompts(outer, &mut els);
            els.push(Element::Sentence(1));
            prompts(mid_a, &mut els);
            els.push(Element::Mask);
            prompts(mid - mid_a, &mut els);
            els.push(Element::Sentence(2));
            prompts(outer, &mut els);
        }
        els.push(Element::Sep);
        Self::from_elements(els).expect("default template is valid")
    }

    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    pub fn prompt_count(&self) -> usize {
        self.prompt_count
    }

    pub fn num_sentences(&self) -> u8 {
        self.num_sentences
    }

    /// Canonical textual form; `parse(render(t)) == t`.
    pub fn render(&self) -> String {
        let parts: Vec<String> = self
            .elements
            .iter()
            .map(|e| match e {
                Element::Cls => "[CLS]".to_string(),
                Element::Sep => "[SEP]".to_string(),
                Element::Mask => "[MASK]".to_string(),
                Element::Prompt(n) => format!("[P_{n}]"),
                Element::Sentence(s) => format!("{{s{s}}}"),
                Element::Literal(t) => t.clone(),
            })
            .collect();
        parts.join(" ")
    }

    /// Where each prompt slot sits relative to the sentences:
    /// 0 = before the first sentence, 1 = between, 2 = after the last.
    pub fn prompt_groups(&self) -> Vec<(usize, u8)> {
        let mut seen = 0u8;
        let mut out = Vec::new();
        for e in &self.elements {
            match e {
                Element::Sentence(_) => seen += 1,
                Element::Prompt(n) => {
                    let group = if seen == 0 {
                        0
                    } else if seen < self.num_sentences {
                        1
                    } else {
                        2
                    };
                    out.push((*n, group));
                }
                _ => {}
            }
        }
        out
    }

    /// Bind an example: prompt slots index rows of the prompt matrix (which
    /// must have exactly `prompt_count` rows), everything else is a
    /// vocabulary token.
    pub fn apply(&self, vocab: &Vocab, s1: &[u32], s2: Option<&[u32]>, prompt_rows: usize) -> Result<MixedInput> {
        if prompt_rows != self.prompt_count {
            return Err(Error::Shape(format!(
                "template has {} prompt slots, prompt matrix has {prompt_rows} rows",
                self.prompt_count
            )));
        }
        if self.num_sentences == 2 && s2.is_none() {
            return Err(Error::Invalid("sentence-pair template needs a second sentence".into()));
        }
        let mut slots = Vec::new();
        let mut sentence = Vec::new();
        let mut mask_position = 0;
        for e in &self.elements {
            match e {
                Element::Cls => {
                    slots.push(Slot::Token(vocab::CLS));
                    sentence.push(0);
                }
                Element::Sep => {
                    slots.push(Slot::Token(vocab::SEP));
                    sentence.push(0);
                }
                Element::Mask => {
                    mask_position = slots.len();
                    slots.push(Slot::Token(vocab::MASK));
                    sentence.push(0);
                }
                Element::Prompt(n) => {
                    slots.push(Slot::Prompt((*n - 1) as u32));
                    sentence.push(0);
                }
                Element::Literal(t) => {
                    slots.push(Slot::Token(vocab.id(t).unwrap_or(vocab::UNK)));
                    sentence.push(0);
                }
                Element::Sentence(s) => {
                    let toks = if *s == 1 { s1 } else { s2.unwrap_or(&[]) };
                    slots.extend(toks.iter().map(|&t| Slot::Token(t)));
                    sentence.extend(core::iter::repeat_n(*s, toks.len()));
                }
            }
        }
        Ok(MixedInput { slots, sentence, mask_position })
    }
}

/// Trim sentence tokens from the tail, longest sentence first (ties trim
/// sentence 1 first), until the input fits in `max_len`. Prompts, `[MASK]`
/// and special tokens are never removed.
pub fn truncate(input: &MixedInput, max_len: usize) -> Result<MixedInput> {
    if input.len() <= max_len {
        return Ok(input.clone());
    }
    let mut lens = [0usize; 2];
    for &s in &input.sentence {
        if s == 1 || s == 2 {
            lens[s as usize - 1] += 1;
        }
    }
    let overhead = input.len() - lens[0] - lens[1];
    let present = lens.iter().filter(|&&l| l > 0).count();
    if max_len < overhead + present {
        return Err(Error::Invalid(format!(
            "cannot truncate to {max_len}: {overhead} fixed slots and {present} sentence(s) need at least {}",
            overhead + present
        )));
    }
    let keep = water_fill(lens, max_len - overhead);
    let mut seen = [0usize; 2];
    let mut out = MixedInput { slots: Vec::new(), sentence: Vec::new(), mask_position: 0 };
    for (i, (&slot, &s)) in input.slots.iter().zip(&input.sentence).enumerate() {
        if s == 1 || s == 2 {
            let k = s as usize - 1;
            seen[k] += 1;
            if seen[k] > keep[k] {
                continue;
            }
        }
        if i == input.mask_position {
            out.mask_position = out.slots.len();
        }
        out.slots.push(slot);
        out.sentence.push(s);
    }
    Ok(out)
}

/// Final lengths after trimming the longest sentence one token at a time.
fn water_fill(lens: [usize; 2], budget: usize) -> [usize; 2] {
    if lens[0] + lens[1] <= budget {
        return lens;
    }
    // largest level c with sum(min(l, c)) <= budget
    let mut c = budget;
    while lens.iter().map(|&l| l.min(c)).sum::<usize>() > budget {
        c -= 1;
    }
    let mut out = [lens[0].min(c), lens[1].min(c)];
    let mut spare = budget - out[0] - out[1];
    // ties are trimmed from sentence 1 first, so sentence 2 keeps the extra
    for k in [1, 0] {
        if spare > 0 && lens[k] > c {
            out[k] += 1;
            spare -= 1;
        }
    }
    out
}
