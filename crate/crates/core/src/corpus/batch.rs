use super::conll::Sentence;
use super::vocab::{Vocab, PAD_ID};
use crate::error::{GrnError, Result};
use crate::numcore::SeqLayout;

/// Padded, masked id grids for `B` sentences.
///
/// Grids are row-major: `word_ids[b * t_max + t]`,
/// `char_ids[(b * t_max + t) * c_max + c]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub word_ids: Vec<usize>,
    pub char_ids: Vec<usize>,
    /// Character count of every cell; 0 at padded positions.
    pub char_lengths: Vec<usize>,
    /// Gold label ids, `None` for unlabeled input. Padded cells hold 0.
    pub label_ids: Option<Vec<usize>>,
    pub mask: Vec<bool>,
    pub lengths: Vec<usize>,
    pub t_max: usize,
    pub c_max: usize,
}

impl Batch {
    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn layout(&self) -> SeqLayout {
        SeqLayout::new(self.t_max, self.lengths.clone())
    }

    /// Gold labels of sentence `b`, unpadded.
    pub fn sentence_labels(&self, b: usize) -> Option<&[usize]> {
        let start = b * self.t_max;
        self.label_ids
            .as_ref()
            .map(|l| &l[start..start + self.lengths[b]])
    }
}

pub fn encode_batch(sentences: &[Sentence], vocab: &Vocab) -> Result<Batch> {
    encode_batch_padded(sentences, vocab, 0)
}

/// As [`encode_batch`] with `t_max` raised to at least `min_t_max`.
pub fn encode_batch_padded(sentences: &[Sentence], vocab: &Vocab, min_t_max: usize) -> Result<Batch> {
    let tokens: Vec<&[String]> = sentences.iter().map(|s| s.tokens.as_slice()).collect();
    let mut batch = encode_impl(&tokens, vocab, min_t_max)?;
    let mut labels = vec![0; batch.word_ids.len()];
    for (b, s) in sentences.iter().enumerate() {
        if s.labels.len() != s.tokens.len() {
            return Err(GrnError::InvalidArgument(format!(
                "sentence {b} has {} tokens but {} labels",
                s.tokens.len(),
                s.labels.len()
            )));
        }
        for (t, l) in s.labels.iter().enumerate() {
            labels[b * batch.t_max + t] = vocab.label_id(l)?;
        }
    }
    batch.label_ids = Some(labels);
    Ok(batch)
}

/// Unlabeled batch.
pub fn encode_tokens<S: AsRef<[String]>>(sentences: &[S], vocab: &Vocab, min_t_max: usize) -> Result<Batch> {
    let tokens: Vec<&[String]> = sentences.iter().map(AsRef::as_ref).collect();
    encode_impl(&tokens, vocab, min_t_max)
}

fn encode_impl(sentences: &[&[String]], vocab: &Vocab, min_t_max: usize) -> Result<Batch> {
    if sentences.is_empty() {
        return Err(GrnError::EmptyInput { op: "encode_batch" });
    }
    if let Some(b) = sentences.iter().position(|s| s.is_empty()) {
        return Err(GrnError::InvalidArgument(format!("sentence {b} is empty")));
    }
    let lengths: Vec<usize> = sentences.iter().map(|s| s.len()).collect();
    let t_max = lengths.iter().copied().max().unwrap_or(0).max(min_t_max);
    let c_max = sentences
        .iter()
        .flat_map(|s| s.iter())
        .map(|t| t.chars().count())
        .max()
        .unwrap_or(0);
    let bsz = sentences.len();
    let mut word_ids = vec![PAD_ID; bsz * t_max];
    let mut char_ids = vec![PAD_ID; bsz * t_max * c_max];
    let mut char_lengths = vec![0; bsz * t_max];
    let mut mask = vec![false; bsz * t_max];
    for (b, s) in sentences.iter().enumerate() {
        for (t, tok) in s.iter().enumerate() {
            let row = b * t_max + t;
            if tok.is_empty() {
                return Err(GrnError::InvalidArgument(format!("token {t} of sentence {b} has no characters")));
            }
            word_ids[row] = vocab.lookup_word_id(tok);
            mask[row] = true;
            for (c, ch) in tok.chars().enumerate() {
                char_ids[row * c_max + c] = vocab.char_id(ch);
            }
            char_lengths[row] = tok.chars().count();
        }
    }
    Ok(Batch {
        word_ids,
        char_ids,
        char_lengths,
        label_ids: None,
        mask,
        lengths,
        t_max,
        c_max,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::corpus::vocab::{build_vocab, UNK_ID};

    fn sent(tokens: &[&str]) -> Sentence {
        Sentence::new(
            tokens.iter().map(|s| s.to_string()).collect(),
            tokens.iter().map(|_| "O".to_string()).collect(),
        )
    }

    #[test]
    fn mask_and_padding() {
        let s = vec![sent(&["a", "bb", "a"]), sent(&["a", "a", "a", "ccc", "a"])];
        let v = build_vocab(&s, &[], 1);
        let b = encode_batch(&s, &v).unwrap();
        assert_eq!(b.t_max, 5);
        assert_eq!(b.c_max, 3);
        assert_eq!(&b.mask[..5], [true, true, true, false, false]);
        assert_eq!(&b.word_ids[3..5], [PAD_ID, PAD_ID]);
        assert_eq!(b.char_lengths[1], 2);
        assert!(b.char_ids[3 * 3..5 * 3].iter().all(|&c| c == PAD_ID));
    }

    #[test]
    fn single_sentence_mask_all_true() {
        let s = vec![sent(&["x", "y"])];
        let v = build_vocab(&s, &[], 1);
        let b = encode_batch(&s, &v).unwrap();
        assert!(b.mask.iter().all(|&m| m));
    }

    #[test]
    fn empty_batch_is_an_error() {
        let v = build_vocab(&[], &[], 1);
        assert!(encode_batch(&[], &v).is_err());
    }

    #[test]
    fn unseen_tokens_are_unk() {
        let s = vec![sent(&["x"])];
        let v = build_vocab(&s, &[], 1);
        let b = encode_tokens(&[vec!["qq".to_string()]], &v, 0).unwrap();
        assert_eq!(b.word_ids, [UNK_ID]);
        assert_eq!(b.char_ids, [UNK_ID, UNK_ID]);
        assert!(b.label_ids.is_none());
    }

    #[test]
    fn label_ids_round_trip() {
        let mut s = sent(&["a", "b", "c"]);
        s.labels = vec!["B-X".into(), "E-X".into(), "O".into()];
        let v = build_vocab(std::slice::from_ref(&s), &[], 1);
        let b = encode_batch_padded(std::slice::from_ref(&s), &v, 6).unwrap();
        assert_eq!(b.t_max, 6);
        let ids = b.sentence_labels(0).unwrap();
        let back: Vec<&str> = ids.iter().map(|&i| v.label(i)).collect();
        assert_eq!(back, s.labels);
    }

    proptest! {
        #[test]
        fn mask_counts_lengths(lengths in prop::collection::vec(1usize..12, 1..8), extra in 0usize..4) {
            let sentences: Vec<Sentence> = lengths
                .iter()
                .map(|&n| sent(&vec!["w"; n]))
                .collect();
            let v = build_vocab(&sentences, &[], 1);
            let b = encode_batch_padded(&sentences, &v, lengths.iter().max().unwrap() + extra).unwrap();
            prop_assert_eq!(b.mask.iter().filter(|&&m| m).count(), lengths.iter().sum::<usize>());
            for (bi, &len) in lengths.iter().enumerate() {
                let row = &b.mask[bi * b.t_max..(bi + 1) * b.t_max];
                prop_assert!(row.iter().enumerate().all(|(t, &m)| m == (t < len)));
                prop_assert!(b.word_ids[bi * b.t_max + len..(bi + 1) * b.t_max].iter().all(|&w| w == PAD_ID));
            }
        }
    }
}
