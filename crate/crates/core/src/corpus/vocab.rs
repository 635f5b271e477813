use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::conll::Sentence;
use crate::error::{GrnError, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<PAD>";
pub const UNK_TOKEN: &str = "<UNK>";
pub const DEFAULT_MIN_FREQ: usize = 3;

const FORMAT: &str = "grn-vocab";
const VERSION: u32 = 1;

/// Why a word is in the vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WordSource {
    Reserved,
    Pretrained,
    Frequency,
    Both,
}

#[derive(Serialize, Deserialize)]
struct VocabDoc {
    format: String,
    version: u32,
    words: Vec<String>,
    word_sources: Vec<WordSource>,
    chars: Vec<String>,
    labels: Vec<String>,
}

/// Word, character and label id maps. Ids 0 and 1 of the word and character
/// tables are PAD and UNK.
#[derive(Clone, Debug)]
pub struct Vocab {
    words: Vec<String>,
    word_sources: Vec<WordSource>,
    word_index: HashMap<String, usize>,
    lower_index: HashMap<String, usize>,
    chars: Vec<String>,
    char_index: HashMap<char, usize>,
    labels: Vec<String>,
    label_index: HashMap<String, usize>,
}

impl Vocab {
    fn from_parts(
        words: Vec<String>,
        word_sources: Vec<WordSource>,
        chars: Vec<String>,
        labels: Vec<String>,
    ) -> Result<Self> {
        if words.len() != word_sources.len() {
            return Err(GrnError::InvalidArgument("word and source lists differ in length".into()));
        }
        let reserved_ok = |v: &[String]| v.len() >= 2 && v[PAD_ID] == PAD_TOKEN && v[UNK_ID] == UNK_TOKEN;
        if !reserved_ok(&words) || !reserved_ok(&chars) {
            return Err(GrnError::InvalidArgument("vocabulary must start with <PAD>, <UNK>".into()));
        }
        let mut word_index = HashMap::with_capacity(words.len());
        let mut lower_index = HashMap::with_capacity(words.len());
        for (id, w) in words.iter().enumerate().skip(2) {
            if word_index.insert(w.clone(), id).is_some() {
                return Err(GrnError::InvalidArgument(format!("duplicate word `{w}`")));
            }
            lower_index.entry(w.to_lowercase()).or_insert(id);
        }
        let mut char_index = HashMap::with_capacity(chars.len());
        for (id, c) in chars.iter().enumerate().skip(2) {
            let mut it = c.chars();
            match (it.next(), it.next()) {
                (Some(ch), None) => {
                    char_index.insert(ch, id);
                }
                _ => return Err(GrnError::InvalidArgument(format!("bad character entry `{c}`"))),
            }
        }
        let label_index = labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        Ok(Self {
            words,
            word_sources,
            word_index,
            lower_index,
            chars,
            char_index,
            labels,
            label_index,
        })
    }

    pub fn num_words(&self) -> usize {
        self.words.len()
    }

    pub fn num_chars(&self) -> usize {
        self.chars.len()
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn word_source(&self, id: usize) -> WordSource {
        self.word_sources[id]
    }

    /// Exact match, then the lowercased form, then UNK.
    pub fn lookup_word_id(&self, token: &str) -> usize {
        if let Some(&id) = self.word_index.get(token) {
            return id;
        }
        self.lower_index.get(&token.to_lowercase()).copied().unwrap_or(UNK_ID)
    }

    pub fn exact_word_id(&self, token: &str) -> Option<usize> {
        self.word_index.get(token).copied()
    }

    pub fn char_id(&self, c: char) -> usize {
        self.char_index.get(&c).copied().unwrap_or(UNK_ID)
    }

    pub fn label_id(&self, label: &str) -> Result<usize> {
        self.label_index
            .get(label)
            .copied()
            .ok_or_else(|| GrnError::UnknownLabel(label.to_string()))
    }

    pub fn label(&self, id: usize) -> &str {
        &self.labels[id]
    }

    fn doc(&self) -> VocabDoc {
        VocabDoc {
            format: FORMAT.into(),
            version: VERSION,
            words: self.words.clone(),
            word_sources: self.word_sources.clone(),
            chars: self.chars.clone(),
            labels: self.labels.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.doc()).expect("vocab serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: VocabDoc = serde_json::from_str(text)?;
        if doc.format != FORMAT {
            return Err(GrnError::InvalidArgument(format!("not a vocabulary file (format `{}`)", doc.format)));
        }
        if doc.version != VERSION {
            return Err(GrnError::Version {
                found: doc.version,
                expected: VERSION,
            });
        }
        Self::from_parts(doc.words, doc.word_sources, doc.chars, doc.labels)
    }

    /// Hex SHA-256 of the JSON serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Builds the vocabulary from training sentences whose labels are already in
/// the model scheme.
///
/// Training words are added in first-seen order when they occur at least
/// `min_freq` times or are pretrained; remaining pretrained words follow in
/// `pretrained` order. Characters come from every training token and labels
/// in first-seen order.
pub fn build_vocab(train: &[Sentence], pretrained: &[String], min_freq: usize) -> Vocab {
    let pre: HashSet<&str> = pretrained.iter().map(String::as_str).collect();
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for s in train {
        for t in &s.tokens {
            *freq.entry(t.as_str()).or_default() += 1;
        }
    }

    let mut words = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
    let mut sources = vec![WordSource::Reserved, WordSource::Reserved];
    let mut seen: HashSet<&str> = HashSet::new();
    for s in train {
        for t in &s.tokens {
            let t = t.as_str();
            if t == PAD_TOKEN || t == UNK_TOKEN || !seen.insert(t) {
                continue;
            }
            let frequent = freq[t] >= min_freq;
            let source = match (frequent, pre.contains(t)) {
                (true, true) => WordSource::Both,
                (true, false) => WordSource::Frequency,
                (false, true) => WordSource::Pretrained,
                (false, false) => continue,
            };
            words.push(t.to_string());
            sources.push(source);
        }
    }
    for w in pretrained {
        let w = w.as_str();
        if w != PAD_TOKEN && w != UNK_TOKEN && seen.insert(w) {
            words.push(w.to_string());
            sources.push(WordSource::Pretrained);
        }
    }

    let mut chars = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
    let mut seen_chars = HashSet::new();
    let mut labels = Vec::new();
    let mut seen_labels = HashSet::new();
    for s in train {
        for t in &s.tokens {
            for c in t.chars() {
                if seen_chars.insert(c) {
                    chars.push(c.to_string());
                }
            }
        }
        for l in &s.labels {
            if seen_labels.insert(l.as_str()) {
                labels.push(l.clone());
            }
        }
    }
    Vocab::from_parts(words, sources, chars, labels).expect("constructed vocabulary is well formed")
}
