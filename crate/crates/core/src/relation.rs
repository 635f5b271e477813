//! Relation layer.
//!
//! Every ordered pair of real tokens `(i, j)`, including `i = j`, gets a score
//! `r_ij = W [x_i; x_j] + b`. Scores are fused back into one feature per
//! token: gated (`mean_j sigmoid(r_ij) * x_j`), direct (`mean_j r_ij`) or with
//! a scalar gate per pair. Means run over the real tokens of the sentence and
//! divide by its true length.
//!
//! The score map is evaluated as `(W_left x_i + b) + W_right x_j`, which costs
//! two matrix products per token instead of one per pair.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{GrnError, Result};
use crate::numcore::{axpy, dot, sigmoid, CustomOp, Graph, NodeId, Real, SeqLayout};

/// How pairwise scores are fused into per-token features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    /// Vector sigmoid gate on each neighbour's feature.
    Grn,
    /// Plain average of the score vectors.
    Dfn,
    /// Scalar sigmoid gate per pair.
    Gattn,
    /// No relation layer.
    None,
}

impl std::str::FromStr for FusionKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "grn" => Ok(Self::Grn),
            "dfn" => Ok(Self::Dfn),
            "gattn" => Ok(Self::Gattn),
            "none" => Ok(Self::None),
            _ => Err(format!("unknown fusion `{s}` (expected grn, dfn, gattn or none)")),
        }
    }
}

impl std::fmt::Display for FusionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Grn => "grn",
            Self::Dfn => "dfn",
            Self::Gattn => "gattn",
            Self::None => "none",
        })
    }
}

struct RelationScores {
    layout: SeqLayout,
    h: usize,
    d: usize,
}

fn pair_index(layout: &SeqLayout, b: usize, i: usize, j: usize, d: usize) -> usize {
    ((b * layout.t_max() + i) * layout.t_max() + j) * d
}

/// `r[b, i, j] = W [x_bi; x_bj] + bias` for real `i, j`; zero elsewhere.
/// `x` is `[B*T x H]`, `weight` `[D x 2H]`, output `[B x T x T x D]`.
pub fn relation_scores<T: Real>(
    g: &mut Graph<'_, T>,
    x: NodeId,
    weight: NodeId,
    bias: NodeId,
    layout: &SeqLayout,
) -> Result<NodeId> {
    let (xs, ws) = (g.shape(x).to_vec(), g.shape(weight).to_vec());
    if xs.len() != 2 || xs[0] != layout.rows() {
        return Err(GrnError::Shape {
            op: "relation_scores",
            left: xs,
            right: vec![layout.rows()],
        });
    }
    let h = xs[1];
    if ws.len() != 2 || ws[1] != 2 * h || g.shape(bias) != [ws[0]] {
        return Err(GrnError::Shape {
            op: "relation_scores",
            left: xs,
            right: ws,
        });
    }
    let d = ws[0];
    let (xv, wv, bv) = (g.value(x), g.value(weight), g.value(bias));
    let rows = layout.rows();
    let mut left = vec![T::zero(); rows * d];
    let mut right = vec![T::zero(); rows * d];
    for (row, real) in layout.row_mask().into_iter().enumerate() {
        if !real {
            continue;
        }
        let xr = &xv[row * h..(row + 1) * h];
        for o in 0..d {
            let wo = &wv[o * 2 * h..(o + 1) * 2 * h];
            left[row * d + o] = dot(&wo[..h], xr) + bv[o];
            right[row * d + o] = dot(&wo[h..], xr);
        }
    }
    let t_max = layout.t_max();
    let mut out = vec![T::zero(); layout.batch() * t_max * t_max * d];
    for (b, &len) in layout.lengths().iter().enumerate() {
        for i in 0..len {
            let li = &left[layout.row(b, i) * d..][..d];
            for j in 0..len {
                let rj = &right[layout.row(b, j) * d..][..d];
                let at = pair_index(layout, b, i, j, d);
                for ((o, &l), &r) in out[at..at + d].iter_mut().zip(li).zip(rj) {
                    *o = l + r;
                }
            }
        }
    }
    let op = RelationScores {
        layout: layout.clone(),
        h,
        d,
    };
    Ok(g.custom(
        vec![x, weight, bias],
        vec![layout.batch(), t_max, t_max, d],
        out,
        Box::new(op),
    ))
}

impl<T: Real> CustomOp<T> for RelationScores {
    fn name(&self) -> &'static str {
        "relation_scores"
    }

    fn backward(&self, inputs: &[&[T]], _output: &[T], grad_out: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (h, d, layout) = (self.h, self.d, &self.layout);
        let (xv, wv) = (inputs[0], inputs[1]);
        let rows = layout.rows();
        let mut d_left = vec![T::zero(); rows * d];
        let mut d_right = vec![T::zero(); rows * d];
        for (b, &len) in layout.lengths().iter().enumerate() {
            for i in 0..len {
                for j in 0..len {
                    let gr = &grad_out[pair_index(layout, b, i, j, d)..][..d];
                    let ri = layout.row(b, i);
                    let rj = layout.row(b, j);
                    d_left[ri * d..(ri + 1) * d]
                        .iter_mut()
                        .zip(gr)
                        .for_each(|(a, &v)| *a += v);
                    d_right[rj * d..(rj + 1) * d]
                        .iter_mut()
                        .zip(gr)
                        .for_each(|(a, &v)| *a += v);
                }
            }
        }
        let mask = layout.row_mask();
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); rows * h];
            for row in (0..rows).filter(|&r| mask[r]) {
                let dxr = &mut dx[row * h..(row + 1) * h];
                for o in 0..d {
                    let wo = &wv[o * 2 * h..(o + 1) * 2 * h];
                    axpy(d_left[row * d + o], &wo[..h], dxr);
                    axpy(d_right[row * d + o], &wo[h..], dxr);
                }
            }
            dx
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![T::zero(); d * 2 * h];
            for row in (0..rows).filter(|&r| mask[r]) {
                let xr = &xv[row * h..(row + 1) * h];
                for o in 0..d {
                    let wo = &mut dw[o * 2 * h..(o + 1) * 2 * h];
                    axpy(d_left[row * d + o], xr, &mut wo[..h]);
                    axpy(d_right[row * d + o], xr, &mut wo[h..]);
                }
            }
            dw
        });
        let db = needs[2].then(|| {
            let mut db = vec![T::zero(); d];
            for row in (0..rows).filter(|&r| mask[r]) {
                db.iter_mut()
                    .zip(&d_left[row * d..(row + 1) * d])
                    .for_each(|(a, &v)| *a += v);
            }
            db
        });
        vec![dx, dw, db]
    }
}

struct FuseGated {
    layout: SeqLayout,
    h: usize,
    gate: usize,
}

/// `out_i = (sum_j sigmoid(s_ij) * x_j) / T` over the real `j` of each
/// sentence. `scores` is `[B x T x T x G]` with `G = H` (vector gate) or
/// `G = 1` (scalar gate).
pub fn fuse_gated<T: Real>(g: &mut Graph<'_, T>, scores: NodeId, x: NodeId, layout: &SeqLayout) -> Result<NodeId> {
    let (ss, xs) = (g.shape(scores).to_vec(), g.shape(x).to_vec());
    let t_max = layout.t_max();
    if xs.len() != 2 || xs[0] != layout.rows() || ss.len() != 4 || ss[..3] != [layout.batch(), t_max, t_max] {
        return Err(GrnError::Shape {
            op: "fuse_gated",
            left: ss,
            right: xs,
        });
    }
    let (h, gate) = (xs[1], ss[3]);
    if gate != h && gate != 1 {
        return Err(GrnError::Shape {
            op: "fuse_gated",
            left: ss,
            right: xs,
        });
    }
    let (sv, xv) = (g.value(scores), g.value(x));
    let mut out = vec![T::zero(); layout.rows() * h];
    let mut gates = vec![T::zero(); h];
    for (b, &len) in layout.lengths().iter().enumerate() {
        let n = T::lit(len as f64);
        for i in 0..len {
            let oi = &mut out[layout.row(b, i) * h..][..h];
            for j in 0..len {
                let s = &sv[pair_index(layout, b, i, j, gate)..][..gate];
                let xj = &xv[layout.row(b, j) * h..][..h];
                if gate == 1 {
                    axpy(sigmoid(s[0]), xj, oi);
                } else {
                    gates.iter_mut().zip(s).for_each(|(gv, &v)| *gv = sigmoid(v));
                    for ((o, &gv), &xv) in oi.iter_mut().zip(&gates).zip(xj) {
                        *o += gv * xv;
                    }
                }
            }
            oi.iter_mut().for_each(|o| *o /= n);
        }
    }
    let op = FuseGated {
        layout: layout.clone(),
        h,
        gate,
    };
    Ok(g.custom(vec![scores, x], vec![layout.rows(), h], out, Box::new(op)))
}

impl<T: Real> CustomOp<T> for FuseGated {
    fn name(&self) -> &'static str {
        "fuse_gated"
    }

    fn backward(&self, inputs: &[&[T]], _output: &[T], grad_out: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (layout, h, gate) = (&self.layout, self.h, self.gate);
        let (sv, xv) = (inputs[0], inputs[1]);
        let mut ds = needs[0].then(|| vec![T::zero(); sv.len()]);
        let mut dx = needs[1].then(|| vec![T::zero(); xv.len()]);
        let mut gi = vec![T::zero(); h];
        for (b, &len) in layout.lengths().iter().enumerate() {
            let n = T::lit(len as f64);
            for i in 0..len {
                gi.iter_mut()
                    .zip(&grad_out[layout.row(b, i) * h..][..h])
                    .for_each(|(a, &v)| *a = v / n);
                for j in 0..len {
                    let at = pair_index(layout, b, i, j, gate);
                    let rj = layout.row(b, j) * h;
                    let xj = &xv[rj..rj + h];
                    if gate == 1 {
                        let s = sigmoid(sv[at]);
                        if let Some(dx) = dx.as_mut() {
                            axpy(s, &gi, &mut dx[rj..rj + h]);
                        }
                        if let Some(ds) = ds.as_mut() {
                            ds[at] += dot(&gi, xj) * s * (T::one() - s);
                        }
                    } else {
                        for c in 0..h {
                            let s = sigmoid(sv[at + c]);
                            if let Some(dx) = dx.as_mut() {
                                dx[rj + c] += s * gi[c];
                            }
                            if let Some(ds) = ds.as_mut() {
                                ds[at + c] += gi[c] * xj[c] * s * (T::one() - s);
                            }
                        }
                    }
                }
            }
        }
        vec![ds, dx]
    }
}

struct FuseMean {
    layout: SeqLayout,
    d: usize,
}

/// `out_i = (sum_j r_ij) / T` over the real `j` of each sentence.
pub fn fuse_dfn<T: Real>(g: &mut Graph<'_, T>, scores: NodeId, layout: &SeqLayout) -> Result<NodeId> {
    let ss = g.shape(scores).to_vec();
    let t_max = layout.t_max();
    if ss.len() != 4 || ss[..3] != [layout.batch(), t_max, t_max] {
        return Err(GrnError::Shape {
            op: "fuse_dfn",
            left: ss,
            right: vec![layout.batch(), t_max, t_max],
        });
    }
    let d = ss[3];
    let sv = g.value(scores);
    let mut out = vec![T::zero(); layout.rows() * d];
    for (b, &len) in layout.lengths().iter().enumerate() {
        let n = T::lit(len as f64);
        for i in 0..len {
            let oi = &mut out[layout.row(b, i) * d..][..d];
            for j in 0..len {
                oi.iter_mut()
                    .zip(&sv[pair_index(layout, b, i, j, d)..][..d])
                    .for_each(|(o, &v)| *o += v);
            }
            oi.iter_mut().for_each(|o| *o /= n);
        }
    }
    let op = FuseMean {
        layout: layout.clone(),
        d,
    };
    Ok(g.custom(vec![scores], vec![layout.rows(), d], out, Box::new(op)))
}

impl<T: Real> CustomOp<T> for FuseMean {
    fn name(&self) -> &'static str {
        "fuse_dfn"
    }

    fn backward(&self, inputs: &[&[T]], _output: &[T], grad_out: &[T], _needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (layout, d) = (&self.layout, self.d);
        let mut ds = vec![T::zero(); inputs[0].len()];
        for (b, &len) in layout.lengths().iter().enumerate() {
            let n = T::lit(len as f64);
            for i in 0..len {
                let gi = &grad_out[layout.row(b, i) * d..][..d];
                for j in 0..len {
                    let at = pair_index(layout, b, i, j, d);
                    ds[at..at + d]
                        .iter_mut()
                        .zip(gi)
                        .for_each(|(a, &v)| *a = v / n);
                }
            }
        }
        vec![Some(ds)]
    }
}

/// `dropout(tanh(r))`.
pub fn predict_features<T: Real>(g: &mut Graph<'_, T>, r: NodeId, dropout: f64, training: bool) -> Result<NodeId> {
    let p = g.tanh(r);
    g.dropout(p, dropout, training)
}

/// Output of [`relation_layer`].
#[derive(Clone, Debug)]
pub struct RelationOutput {
    /// Fused feature `[B*T x H]` before the final tanh.
    pub fused: NodeId,
    /// Score tensors, one per chunk of consecutive sentences, with the
    /// sentence range each covers.
    pub scores: Vec<(NodeId, std::ops::Range<usize>)>,
}

/// Scores and fuses, splitting the batch into runs of consecutive sentences
/// whenever `B * T^2 * D` would exceed `budget` elements.
pub fn relation_layer<T: Real>(
    g: &mut Graph<'_, T>,
    kind: FusionKind,
    x: NodeId,
    weight: NodeId,
    bias: NodeId,
    layout: &SeqLayout,
    budget: usize,
) -> Result<RelationOutput> {
    if kind == FusionKind::None {
        return Err(GrnError::InvalidArgument("relation layer is disabled".into()));
    }
    let d = g.shape(weight).first().copied().unwrap_or(0);
    let per_sentence = layout.t_max() * layout.t_max() * d.max(1);
    let chunk = (budget / per_sentence.max(1)).max(1);
    let batch = layout.batch();
    let mut fused = Vec::new();
    let mut scores = Vec::new();
    let mut start = 0;
    while start < batch {
        let end = (start + chunk).min(batch);
        let sub = layout.slice(start..end);
        let xs = if start == 0 && end == batch {
            x
        } else {
            g.slice_rows(x, start * layout.t_max(), (end - start) * layout.t_max())?
        };
        let r = relation_scores(g, xs, weight, bias, &sub)?;
        let f = match kind {
            FusionKind::Grn | FusionKind::Gattn => fuse_gated(g, r, xs, &sub)?,
            FusionKind::Dfn => fuse_dfn(g, r, &sub)?,
            FusionKind::None => unreachable!(),
        };
        fused.push(f);
        scores.push((r, start..end));
        start = end;
    }
    let fused = if fused.len() == 1 { fused[0] } else { g.concat_rows(&fused)? };
    Ok(RelationOutput { fused, scores })
}

/// `T x T` relation strengths of one sentence, min-max normalized over the
/// whole matrix. `scores` holds `T * T * D` values laid out `[i][j][d]`; the
/// strength of a pair is the L2 norm of its score vector (the absolute value
/// when `D = 1`). A constant matrix maps to zeros.
pub fn export_heatmap(scores: &[f64], t: usize, d: usize) -> Result<Vec<Vec<f64>>> {
    if t == 0 || scores.len() != t * t * d {
        return Err(GrnError::Shape {
            op: "export_heatmap",
            left: vec![scores.len()],
            right: vec![t, t, d],
        });
    }
    let norms: Vec<f64> = scores
        .chunks(d)
        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let min = norms.iter().copied().fold(f64::INFINITY, f64::min);
    let max = norms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    Ok(norms
        .chunks(t)
        .map(|row| {
            row.iter()
                .map(|&v| if span > 0.0 { (v - min) / span } else { 0.0 })
                .collect()
        })
        .collect())
}

/// Heat-map TSV: a header row of an empty cell and the tokens, then one row
/// per token with its label followed by `T` values at six decimals.
pub fn heatmap_tsv<S: AsRef<str>>(tokens: &[S], matrix: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for tok in tokens {
        out.push('\t');
        out.push_str(tok.as_ref());
    }
    out.push('\n');
    for (tok, row) in tokens.iter().zip(matrix) {
        out.push_str(tok.as_ref());
        for v in row {
            let _ = write!(out, "\t{v:.6}");
        }
        out.push('\n');
    }
    out
}
