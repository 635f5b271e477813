//! CoNLL ingestion, labeling schemes, vocabulary and padded batches.
//!
//! Sentences are converted to BIOES when loaded; predictions are turned back
//! into BIO before scoring or writing.

mod batch;
mod conll;
mod embeddings;
mod scheme;
mod vocab;

use std::path::Path;

pub use batch::{encode_batch, encode_batch_padded, encode_tokens, Batch};
pub use conll::{parse_conll, parse_tokens, read_blocks, Column, ConllBlock, Sentence, DOCSTART};
pub use embeddings::{load_pretrained_embeddings, pretrained_matrix, read_embeddings, PretrainedTable};
pub use scheme::{convert_scheme, encode_spans, repair_bio, Scheme};
pub use vocab::{build_vocab, Vocab, WordSource, DEFAULT_MIN_FREQ, PAD_ID, PAD_TOKEN, UNK_ID, UNK_TOKEN};

use crate::error::Result;

/// Rewrites every sentence's labels from `from` into BIOES.
pub fn to_bioes(sentences: &mut [Sentence], from: Scheme) -> Result<()> {
    for s in sentences {
        s.labels = convert_scheme(&s.labels, from, Scheme::Bioes)?;
    }
    Ok(())
}

/// Reads a labeled CoNLL file and converts its labels to BIOES.
pub fn load_conll(path: impl AsRef<Path>, token_column: Column, label_column: Column, scheme: Scheme) -> Result<Vec<Sentence>> {
    let text = std::fs::read_to_string(path)?;
    let mut sentences = parse_conll(&text, token_column, label_column)?;
    to_bioes(&mut sentences, scheme)?;
    Ok(sentences)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::extract_spans;

    /// All label sequences of length `n` over `{O, B-A, I-A, B-B, I-B}`.
    fn all_bio(n: usize) -> Vec<Vec<String>> {
        let alphabet = ["O", "B-A", "I-A", "B-B", "I-B"];
        let mut out = vec![vec![]];
        for _ in 0..n {
            out = out
                .into_iter()
                .flat_map(|p: Vec<String>| {
                    alphabet.iter().map(move |a| {
                        let mut q = p.clone();
                        q.push(a.to_string());
                        q
                    })
                })
                .collect();
        }
        out
    }

    #[test]
    fn exhaustive_round_trip_preserves_spans() {
        for n in 1..=6 {
            for seq in all_bio(n) {
                let repaired = repair_bio(&seq).unwrap();
                let bioes = convert_scheme(&seq, Scheme::Bio, Scheme::Bioes).unwrap();
                let back = convert_scheme(&bioes, Scheme::Bioes, Scheme::Bio).unwrap();
                assert_eq!(back, repaired, "{seq:?}");
                assert_eq!(extract_spans(&bioes).unwrap(), extract_spans(&repaired).unwrap());
                assert_eq!(extract_spans(&seq).unwrap(), extract_spans(&repaired).unwrap());
            }
        }
    }
}
