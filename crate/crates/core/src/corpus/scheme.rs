use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{GrnError, Result};
use crate::metrics::{extract_spans, LabeledSpan, Tag};

/// Token labeling scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Bio,
    Bioes,
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "bio" | "iob" | "iob1" | "iob2" => Ok(Scheme::Bio),
            "bioes" | "iobes" => Ok(Scheme::Bioes),
            _ => Err(format!("unknown scheme `{s}` (expected bio or bioes)")),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Bio => "bio",
            Scheme::Bioes => "bioes",
        })
    }
}

/// Writes `spans` over `len` tokens in `scheme`.
pub fn encode_spans(spans: &[LabeledSpan], len: usize, scheme: Scheme) -> Vec<String> {
    let mut labels = vec!["O".to_string(); len];
    for s in spans {
        let ty = &s.entity_type;
        if s.start == s.end && scheme == Scheme::Bioes {
            labels[s.start] = format!("S-{ty}");
            continue;
        }
        labels[s.start] = format!("B-{ty}");
        for l in &mut labels[s.start + 1..=s.end] {
            *l = format!("I-{ty}");
        }
        if scheme == Scheme::Bioes {
            labels[s.end] = format!("E-{ty}");
        }
    }
    labels
}

/// Re-encodes a label sequence. Input is read with the lenient chunker, so a
/// BIO `I-X` that opens no `X` entity is treated as `B-X`.
pub fn convert_scheme<S: AsRef<str>>(labels: &[S], from: Scheme, to: Scheme) -> Result<Vec<String>> {
    if from == Scheme::Bio {
        for l in labels {
            if matches!(Tag::parse(l.as_ref())?, Tag::End(_) | Tag::Single(_)) {
                return Err(GrnError::Label(l.as_ref().to_string()));
            }
        }
    }
    let spans = extract_spans(labels)?;
    Ok(encode_spans(&spans, labels.len(), to))
}

/// Rewrites every orphan `I-X` (not preceded by `B-X` or `I-X`) to `B-X`.
pub fn repair_bio<S: AsRef<str>>(labels: &[S]) -> Result<Vec<String>> {
    let mut out: Vec<String> = Vec::with_capacity(labels.len());
    for l in labels {
        let l = l.as_ref();
        let fixed = match Tag::parse(l)? {
            Tag::Inside(ty) => {
                let continues = out.last().is_some_and(|p| *p == format!("B-{ty}") || *p == format!("I-{ty}"));
                if continues {
                    l.to_string()
                } else {
                    format!("B-{ty}")
                }
            }
            Tag::End(_) | Tag::Single(_) => return Err(GrnError::Label(l.to_string())),
            _ => l.to_string(),
        };
        out.push(fixed);
    }
    Ok(out)
}
