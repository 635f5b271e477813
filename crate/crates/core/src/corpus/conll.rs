use std::fmt;
use std::str::FromStr;

use crate::error::{GrnError, Result};

pub const DOCSTART: &str = "-DOCSTART-";

/// One labeled sentence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub labels: Vec<String>,
    /// First sentence after a `-DOCSTART-` marker.
    pub doc_start: bool,
}

impl Sentence {
    pub fn new(tokens: Vec<String>, labels: Vec<String>) -> Self {
        Self {
            tokens,
            labels,
            doc_start: false,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Column selector for whitespace-separated CoNLL files.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Column {
    Index(usize),
    Last,
}

impl Column {
    fn resolve(self, ncols: usize) -> Option<usize> {
        match self {
            Column::Index(i) if i < ncols => Some(i),
            Column::Index(_) => None,
            Column::Last => ncols.checked_sub(1),
        }
    }
}

impl FromStr for Column {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "last" {
            return Ok(Column::Last);
        }
        s.parse()
            .map(Column::Index)
            .map_err(|_| format!("expected a column index or `last`, got `{s}`"))
    }
}

impl fmt::Display for Column {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Column::Index(i) => write!(f, "{i}"),
            Column::Last => f.write_str("last"),
        }
    }
}

/// A blank-line-delimited block of rows with the 1-based line number of its
/// first row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConllBlock {
    pub first_line: usize,
    pub rows: Vec<Vec<String>>,
}

impl ConllBlock {
    pub fn is_docstart(&self) -> bool {
        self.rows
            .first()
            .and_then(|r| r.first())
            .is_some_and(|t| t == DOCSTART)
    }
}

/// Splits CoNLL text into blocks. Every non-blank line must carry the same
/// number of columns as the first one.
pub fn read_blocks(text: &str) -> Result<Vec<ConllBlock>> {
    let mut blocks = Vec::new();
    let mut current: Option<ConllBlock> = None;
    let mut ncols = None;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let fields: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if fields.is_empty() {
            blocks.extend(current.take());
            continue;
        }
        match ncols {
            None => ncols = Some(fields.len()),
            Some(n) if n != fields.len() => {
                return Err(GrnError::Parse {
                    line: line_no,
                    message: format!("expected {n} columns, found {}", fields.len()),
                })
            }
            Some(_) => {}
        }
        current
            .get_or_insert_with(|| ConllBlock {
                first_line: line_no,
                rows: Vec::new(),
            })
            .rows
            .push(fields);
    }
    blocks.extend(current);
    Ok(blocks)
}

/// Parses labeled sentences. `-DOCSTART-` blocks are dropped and flag the
/// following sentence with `doc_start`.
pub fn parse_conll(text: &str, token_column: Column, label_column: Column) -> Result<Vec<Sentence>> {
    let mut sentences = Vec::new();
    let mut pending_doc = false;
    for block in read_blocks(text)? {
        if block.is_docstart() {
            pending_doc = true;
            continue;
        }
        let mut tokens = Vec::with_capacity(block.rows.len());
        let mut labels = Vec::with_capacity(block.rows.len());
        for (k, row) in block.rows.iter().enumerate() {
            let line = block.first_line + k;
            let tc = token_column.resolve(row.len()).ok_or_else(|| GrnError::Parse {
                line,
                message: format!("token column {token_column} out of range for {} columns", row.len()),
            })?;
            let lc = label_column.resolve(row.len()).ok_or_else(|| GrnError::Parse {
                line,
                message: format!("label column {label_column} out of range for {} columns", row.len()),
            })?;
            tokens.push(row[tc].clone());
            labels.push(row[lc].clone());
        }
        sentences.push(Sentence {
            tokens,
            labels,
            doc_start: std::mem::take(&mut pending_doc),
        });
    }
    Ok(sentences)
}

/// Token column of every non-`-DOCSTART-` block.
pub fn parse_tokens(text: &str, token_column: Column) -> Result<Vec<Vec<String>>> {
    let mut out = Vec::new();
    for block in read_blocks(text)? {
        if block.is_docstart() {
            continue;
        }
        let mut tokens = Vec::with_capacity(block.rows.len());
        for (k, row) in block.rows.iter().enumerate() {
            let tc = token_column.resolve(row.len()).ok_or_else(|| GrnError::Parse {
                line: block.first_line + k,
                message: format!("token column {token_column} out of range"),
            })?;
            tokens.push(row[tc].clone());
        }
        out.push(tokens);
    }
    Ok(out)
}
