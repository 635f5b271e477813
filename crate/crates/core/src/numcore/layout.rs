use std::ops::Range;

/// Padded batch geometry: `batch` sentences, each padded to `t_max` rows.
///
/// Token `(b, t)` lives at flat row `b * t_max + t`; it is real iff
/// `t < lengths[b]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    t_max: usize,
    lengths: Vec<usize>,
}

impl SeqLayout {
    pub fn new(t_max: usize, lengths: Vec<usize>) -> Self {
        assert!(
            lengths.iter().all(|&l| l <= t_max),
            "sentence longer than t_max"
        );
        Self { t_max, lengths }
    }

    /// A single unpadded sentence.
    pub fn single(len: usize) -> Self {
        Self::new(len, vec![len])
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn rows(&self) -> usize {
        self.batch() * self.t_max
    }

    #[inline]
    pub fn row(&self, b: usize, t: usize) -> usize {
        b * self.t_max + t
    }

    pub fn is_real(&self, b: usize, t: usize) -> bool {
        t < self.lengths[b]
    }

    /// One flag per flat row.
    pub fn row_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.rows());
        for &len in &self.lengths {
            mask.extend((0..self.t_max).map(|t| t < len));
        }
        mask
    }

    /// `(start_row, length)` of each sentence's real tokens.
    pub fn segments(&self) -> Vec<(usize, usize)> {
        self.lengths
            .iter()
            .enumerate()
            .map(|(b, &len)| (b * self.t_max, len))
            .collect()
    }

    /// Sub-layout of sentences `range`, with the same `t_max`.
    pub fn slice(&self, range: Range<usize>) -> Self {
        Self {
            t_max: self.t_max,
            lengths: self.lengths[range].to_vec(),
        }
    }

    pub fn total_tokens(&self) -> usize {
        self.lengths.iter().sum()
    }
}
