//! Representation layer: word lookup plus a character CNN, concatenated per
//! token as `[char; word]`.

use crate::corpus::{Batch, PAD_ID};
use crate::error::{GrnError, Result};
use crate::numcore::{Graph, NodeId, Real};

/// Word embedding rows for every cell of the batch, `[B*T x word_dim]`.
/// Padded cells hold PAD and come out as zero rows.
pub fn word_feature<T: Real>(g: &mut Graph<'_, T>, table: NodeId, batch: &Batch) -> Result<NodeId> {
    g.embedding(table, &batch.word_ids, Some(PAD_ID))
}

/// Character CNN feature per cell, `[B*T x channels]`.
///
/// Each real token's characters (its true length, not `c_max`) are embedded,
/// convolved with same padding and max-pooled over time. Padded cells are zero.
pub fn char_feature<T: Real>(
    g: &mut Graph<'_, T>,
    table: NodeId,
    kernel: NodeId,
    bias: NodeId,
    batch: &Batch,
) -> Result<NodeId> {
    let mut ids = Vec::new();
    let mut segments = Vec::new();
    let mut rows = Vec::new();
    for (row, &real) in batch.mask.iter().enumerate() {
        if !real {
            continue;
        }
        let n = batch.char_lengths[row];
        if n == 0 {
            return Err(GrnError::InvalidArgument(format!("token at row {row} has no characters")));
        }
        segments.push((ids.len(), n));
        ids.extend_from_slice(&batch.char_ids[row * batch.c_max..row * batch.c_max + n]);
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(GrnError::EmptyInput { op: "char_feature" });
    }
    let chars = g.embedding(table, &ids, Some(PAD_ID))?;
    let conv = g.conv1d_segments(chars, kernel, Some(bias), &segments)?;
    let pooled = g.max_over_segments(conv, &segments)?;
    g.scatter_rows(pooled, &rows, batch.mask.len())
}

/// Parameter handles of the representation layer.
#[derive(Clone, Copy, Debug)]
pub struct EmbedParams {
    pub word: NodeId,
    pub chars: NodeId,
    pub char_kernel: NodeId,
    pub char_bias: NodeId,
}

/// `dropout([char_feature; word_feature])`, `[B*T x (channels + word_dim)]`.
pub fn represent<T: Real>(
    g: &mut Graph<'_, T>,
    p: &EmbedParams,
    batch: &Batch,
    dropout: f64,
    training: bool,
) -> Result<NodeId> {
    let c = char_feature(g, p.chars, p.char_kernel, p.char_bias, batch)?;
    let w = word_feature(g, p.word, batch)?;
    let z = g.concat_cols(&[c, w])?;
    g.dropout(z, dropout, training)
}
