use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;

use super::vocab::{Vocab, PAD_ID};
use crate::error::{GrnError, Result};
use crate::numcore::{kaiming_uniform, Real, Tensor};

/// Vectors read from a `token v1 ... vD` text file, in file order.
/// Repeated tokens keep their first vector.
#[derive(Clone, Debug)]
pub struct PretrainedTable {
    pub dim: usize,
    pub words: Vec<String>,
    pub vectors: Vec<f64>,
}

impl PretrainedTable {
    pub fn vector(&self, k: usize) -> &[f64] {
        &self.vectors[k * self.dim..(k + 1) * self.dim]
    }
}

pub fn read_embeddings(path: impl AsRef<Path>, dim: usize) -> Result<PretrainedTable> {
    let path = path.as_ref();
    let fmt_err = |line: usize, message: String| GrnError::EmbeddingFormat {
        path: path.to_path_buf(),
        line,
        message,
    };
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut table = PretrainedTable {
        dim,
        words: Vec::new(),
        vectors: Vec::new(),
    };
    let mut seen = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let mut fields = line.split_whitespace();
        let Some(word) = fields.next() else { continue };
        let values: Vec<&str> = fields.collect();
        if values.len() != dim {
            return Err(fmt_err(idx + 1, format!("expected {dim} values, found {}", values.len())));
        }
        if seen.contains_key(word) {
            continue;
        }
        for v in values {
            let x: f64 = v.parse().map_err(|_| fmt_err(idx + 1, format!("`{v}` is not a number")))?;
            table.vectors.push(x);
        }
        seen.insert(word.to_string(), table.words.len());
        table.words.push(word.to_string());
    }
    Ok(table)
}

/// Word embedding matrix `[|V| x dim]`. Rows of words found in `table` are
/// copied; the PAD row is zero; every other row is drawn from
/// `U(-sqrt(6/dim), sqrt(6/dim))`.
pub fn pretrained_matrix<T: Real>(table: Option<&PretrainedTable>, vocab: &Vocab, dim: usize, rng: &mut impl Rng) -> Result<Tensor<T>> {
    if let Some(t) = table {
        if t.dim != dim {
            return Err(GrnError::InvalidArgument(format!(
                "embedding file has dimension {}, model expects {dim}",
                t.dim
            )));
        }
    }
    let index: HashMap<&str, usize> = table
        .map(|t| t.words.iter().enumerate().map(|(k, w)| (w.as_str(), k)).collect())
        .unwrap_or_default();
    let mut data = kaiming_uniform::<T>(rng, vocab.num_words() * dim, dim);
    data[PAD_ID * dim..(PAD_ID + 1) * dim].fill(T::zero());
    if let Some(t) = table {
        for (id, w) in vocab.words().iter().enumerate().skip(2) {
            if let Some(&k) = index.get(w.as_str()) {
                for (d, &v) in data[id * dim..(id + 1) * dim].iter_mut().zip(t.vector(k)) {
                    *d = T::lit(v);
                }
            }
        }
    }
    Tensor::new(vec![vocab.num_words(), dim], data)
}

pub fn load_pretrained_embeddings<T: Real>(path: impl AsRef<Path>, vocab: &Vocab, dim: usize, rng: &mut impl Rng) -> Result<Tensor<T>> {
    let table = read_embeddings(path, dim)?;
    pretrained_matrix(Some(&table), vocab, dim, rng)
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::corpus::conll::Sentence;
    use crate::corpus::vocab::build_vocab;
    use crate::numcore::kaiming_bound;

    fn file(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn rows_copied_pad_zero_rest_bounded() {
        let f = file("eu 0.5 -1.0 2.0\nrome 1 2 3\n");
        let table = read_embeddings(f.path(), 3).unwrap();
        let train = vec![Sentence::new(vec!["x".into(); 3], vec!["O".into(); 3])];
        let vocab = build_vocab(&train, &table.words, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = pretrained_matrix::<f64>(Some(&table), &vocab, 3, &mut rng).unwrap();
        let eu = vocab.exact_word_id("eu").unwrap();
        assert_eq!(m.row(eu), [0.5, -1.0, 2.0]);
        assert_eq!(m.row(PAD_ID), [0.0, 0.0, 0.0]);
        let bound = kaiming_bound(3);
        let x = vocab.exact_word_id("x").unwrap();
        assert!(m.row(x).iter().all(|v| v.abs() <= bound));
        assert!(m.row(1).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn dimension_mismatch_names_line() {
        let f = file("a 1 2\nb 1 2 3\n");
        match read_embeddings(f.path(), 2) {
            Err(GrnError::EmbeddingFormat { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_number_is_format_error() {
        let f = file("a 1 x\n");
        assert!(matches!(read_embeddings(f.path(), 2), Err(GrnError::EmbeddingFormat { line: 1, .. })));
    }

    #[test]
    fn initializer_bound_over_many_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = kaiming_uniform(&mut rng, 10_000, 100);
        let b = kaiming_bound(100);
        assert!(v.iter().all(|x| x.abs() <= b));
        assert!(v.iter().any(|x| x.abs() > 0.9 * b));
    }
}
