//! Chunk extraction and exact-match span precision / recall / F1.
//!
//! Chunking follows conlleval: a chunk ends when a `B`/`S`/`O` tag follows an
//! open chunk, after an `E` or `S`, or when the entity type changes; an `I` or
//! `E` that cannot continue the open chunk starts a new one. Valid BIO and
//! BIOES sequences are therefore read exactly, and malformed BIO is repaired
//! the same way the standard script reads it.

use std::collections::{BTreeMap, HashSet};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::error::{GrnError, Result};

/// One parsed tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
    End(&'a str),
    Single(&'a str),
}

impl<'a> Tag<'a> {
    pub fn parse(label: &'a str) -> Result<Self> {
        if label == "O" {
            return Ok(Tag::Outside);
        }
        let (prefix, ty) = label
            .split_once('-')
            .filter(|(_, ty)| !ty.is_empty())
            .ok_or_else(|| GrnError::Label(label.to_string()))?;
        match prefix {
            "B" => Ok(Tag::Begin(ty)),
            "I" => Ok(Tag::Inside(ty)),
            "E" => Ok(Tag::End(ty)),
            "S" => Ok(Tag::Single(ty)),
            _ => Err(GrnError::Label(label.to_string())),
        }
    }

    pub fn entity_type(&self) -> Option<&'a str> {
        match *self {
            Tag::Outside => None,
            Tag::Begin(t) | Tag::Inside(t) | Tag::End(t) | Tag::Single(t) => Some(t),
        }
    }
}

/// An entity mention: type plus inclusive token range.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LabeledSpan {
    pub entity_type: String,
    pub start: usize,
    pub end: usize,
}

impl LabeledSpan {
    pub fn new(entity_type: impl Into<String>, start: usize, end: usize) -> Self {
        Self {
            entity_type: entity_type.into(),
            start,
            end,
        }
    }
}

/// Maximal entity chunks of a BIO or BIOES label sequence, ordered by start.
pub fn extract_spans<S: AsRef<str>>(labels: &[S]) -> Result<Vec<LabeledSpan>> {
    let tags = labels
        .iter()
        .map(|l| Tag::parse(l.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let mut spans = Vec::new();
    let mut open: Option<(&str, usize)> = None;
    let mut prev = Tag::Outside;
    for (i, &tag) in tags.iter().enumerate() {
        let ty = tag.entity_type();
        let ends = match open {
            None => false,
            Some((open_ty, _)) => {
                matches!(tag, Tag::Begin(_) | Tag::Single(_) | Tag::Outside)
                    || matches!(prev, Tag::End(_) | Tag::Single(_))
                    || ty != Some(open_ty)
            }
        };
        if ends {
            let (open_ty, start) = open.take().expect("open chunk");
            spans.push(LabeledSpan::new(open_ty, start, i - 1));
        }
        if open.is_none() {
            if let Some(ty) = ty {
                open = Some((ty, i));
            }
        }
        prev = tag;
    }
    if let Some((ty, start)) = open {
        spans.push(LabeledSpan::new(ty, start, tags.len() - 1));
    }
    Ok(spans)
}

/// Exact-match chunk counts.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SpanCounts {
    pub tokens: usize,
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
    /// `(gold, predicted, correct)` per entity type.
    pub per_type: BTreeMap<String, (usize, usize, usize)>,
}

/// Precision, recall and F1 as percentages.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(gold: usize, predicted: usize, correct: usize) -> Self {
        let precision = if predicted == 0 {
            0.0
        } else {
            100.0 * correct as f64 / predicted as f64
        };
        let recall = if gold == 0 {
            0.0
        } else {
            100.0 * correct as f64 / gold as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

impl SpanCounts {
    pub fn prf(&self) -> Prf {
        Prf::from_counts(self.gold, self.predicted, self.correct)
    }

    pub fn type_prf(&self, ty: &str) -> Option<Prf> {
        self.per_type.get(ty).map(|&(g, p, c)| Prf::from_counts(g, p, c))
    }

    /// conlleval-style report block.
    pub fn report(&self) -> String {
        let mut out = String::new();
        let prf = self.prf();
        let _ = writeln!(
            out,
            "processed {} tokens with {} phrases; found: {} phrases; correct: {}.",
            self.tokens, self.gold, self.predicted, self.correct
        );
        let _ = writeln!(
            out,
            "precision: {:6.2}%; recall: {:6.2}%; FB1: {:6.2}",
            prf.precision, prf.recall, prf.f1
        );
        for (ty, &(g, p, c)) in &self.per_type {
            let t = Prf::from_counts(g, p, c);
            let _ = writeln!(
                out,
                "{ty:>17}: precision: {:6.2}%; recall: {:6.2}%; FB1: {:6.2}  {p}",
                t.precision, t.recall, t.f1
            );
        }
        out
    }
}

impl fmt::Display for Prf {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "precision: {:.2}%; recall: {:.2}%; FB1: {:.2}",
            self.precision, self.recall, self.f1
        )
    }
}

/// Micro-averaged chunk counts over a corpus of aligned label sequences.
pub fn span_counts<S: AsRef<str>>(gold: &[Vec<S>], pred: &[Vec<S>]) -> Result<SpanCounts> {
    if gold.len() != pred.len() {
        return Err(GrnError::InvalidArgument(format!(
            "gold has {} sentences, prediction has {}",
            gold.len(),
            pred.len()
        )));
    }
    let mut counts = SpanCounts::default();
    for (k, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.len() != p.len() {
            return Err(GrnError::InvalidArgument(format!(
                "sentence {k}: gold has {} tokens, prediction has {}",
                g.len(),
                p.len()
            )));
        }
        counts.tokens += g.len();
        let gs = extract_spans(g)?;
        let ps = extract_spans(p)?;
        let gold_set: HashSet<&LabeledSpan> = gs.iter().collect();
        for s in &gs {
            counts.per_type.entry(s.entity_type.clone()).or_default().0 += 1;
        }
        for s in &ps {
            counts.per_type.entry(s.entity_type.clone()).or_default().1 += 1;
            if gold_set.contains(s) {
                counts.per_type.get_mut(&s.entity_type).expect("entry").2 += 1;
                counts.correct += 1;
            }
        }
        counts.gold += gs.len();
        counts.predicted += ps.len();
    }
    Ok(counts)
}

/// Exact-match span precision / recall / F1 (percentages).
pub fn span_prf<S: AsRef<str>>(gold: &[Vec<S>], pred: &[Vec<S>]) -> Result<Prf> {
    Ok(span_counts(gold, pred)?.prf())
}
