//! Applying a trained model to text: CoNLL tagging and relation heat maps.

use crate::corpus::{encode_tokens, parse_tokens, read_blocks, Column, Vocab};
use crate::error::Result;
use crate::model::{self, ModelConfig, ModelParams};
use crate::numcore::Real;
use crate::relation::{export_heatmap, heatmap_tsv};
use crate::trainer::predict;

/// Copies `text` with a predicted BIO label appended to every row.
///
/// Columns are re-joined with single spaces and blocks separated by one blank
/// line. `-DOCSTART-` rows receive `O`.
pub fn tag_conll<T: Real>(
    config: &ModelConfig,
    params: &ModelParams<T>,
    vocab: &Vocab,
    text: &str,
    token_column: Column,
    batch_size: usize,
) -> Result<String> {
    let blocks = read_blocks(text)?;
    let tokens = parse_tokens(text, token_column)?;
    let mut labels = predict(config, params, vocab, &tokens, batch_size)?.into_iter();
    let mut out = String::new();
    for (k, block) in blocks.iter().enumerate() {
        if k > 0 {
            out.push('\n');
        }
        let tags = if block.is_docstart() {
            vec!["O".to_string(); block.rows.len()]
        } else {
            labels.next().expect("one prediction per sentence block")
        };
        for (row, tag) in block.rows.iter().zip(tags) {
            out.push_str(&row.join(" "));
            out.push(' ');
            out.push_str(&tag);
            out.push('\n');
        }
    }
    Ok(out)
}

/// Min-max normalized relation-strength matrix of every sentence.
pub fn relation_heatmaps<T: Real>(
    config: &ModelConfig,
    params: &ModelParams<T>,
    vocab: &Vocab,
    sentences: &[Vec<String>],
    batch_size: usize,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut maps = Vec::with_capacity(sentences.len());
    for chunk in sentences.chunks(batch_size.max(1)) {
        let batch = encode_tokens(chunk, vocab, 0)?;
        for ((scores, d), tokens) in model::relation_scores(config, params, &batch)?.into_iter().zip(chunk) {
            maps.push(export_heatmap(&scores, tokens.len(), d)?);
        }
    }
    Ok(maps)
}

/// One TSV heat map per sentence, separated by blank lines.
pub fn relations_tsv<T: Real>(
    config: &ModelConfig,
    params: &ModelParams<T>,
    vocab: &Vocab,
    sentences: &[Vec<String>],
    batch_size: usize,
) -> Result<String> {
    let maps = relation_heatmaps(config, params, vocab, sentences, batch_size)?;
    Ok(sentences
        .iter()
        .zip(&maps)
        .map(|(s, m)| heatmap_tsv(s, m))
        .collect::<Vec<_>>()
        .join("\n"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, Sentence};
    use crate::model::init_params;

    fn setup() -> (ModelConfig, ModelParams<f64>, Vocab) {
        let s = vec![Sentence::new(
            vec!["ann".into(), "met".into(), "bo".into()],
            vec!["S-PER".into(), "O".into(), "S-PER".into()],
        )];
        let v = build_vocab(&s, &[], 1);
        let mc = ModelConfig::reduced(v.num_words(), v.num_chars(), v.labels().to_vec());
        let p = init_params(&mc, 1).unwrap();
        (mc, p, v)
    }

    #[test]
    fn appends_one_column() {
        let (mc, p, v) = setup();
        let text = "-DOCSTART- -X-\n\nann NNP\nmet VBD\n\nzzz NN\n";
        let out = tag_conll(&mc, &p, &v, text, Column::Index(0), 10).unwrap();
        let lines: Vec<&str> = out.lines().collect();
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[0], "-DOCSTART- -X- O");
        assert_eq!(lines[1], "");
        assert!(lines[2].starts_with("ann NNP "));
        assert_eq!(lines[5].split(' ').count(), 3);
        for l in lines.iter().filter(|l| !l.is_empty()) {
            let tag = l.rsplit(' ').next().unwrap();
            assert!(tag == "O" || tag.starts_with("B-") || tag.starts_with("I-"), "{tag}");
        }
        assert_eq!(tag_conll(&mc, &p, &v, "", Column::Index(0), 10).unwrap(), "");
    }

    #[test]
    fn heatmaps_are_square_and_normalized() {
        let (mc, p, v) = setup();
        let s = vec![vec!["ann".to_string(), "met".into(), "bo".into()], vec!["x".to_string()]];
        let maps = relation_heatmaps(&mc, &p, &v, &s, 10).unwrap();
        assert_eq!(maps[0].len(), 3);
        assert!(maps[0].iter().all(|r| r.len() == 3));
        let flat: Vec<f64> = maps[0].iter().flatten().copied().collect();
        assert_eq!(flat.iter().cloned().fold(f64::INFINITY, f64::min), 0.0);
        assert_eq!(flat.iter().cloned().fold(f64::NEG_INFINITY, f64::max), 1.0);
        assert_eq!(maps[1], vec![vec![0.0]]);
        let tsv = relations_tsv(&mc, &p, &v, &s, 10).unwrap();
        assert_eq!(tsv, relations_tsv(&mc, &p, &v, &s, 10).unwrap());
    }
}
