//! Linear-chain CRF over BIOES labels.
//!
//! The transition matrix is `(L+1) x (L+1)`: row `L` holds the scores out of
//! a virtual START state and column `L` the scores into a virtual STOP state.
//! The START to STOP entry is never used. A path `y_1..y_T` scores
//! `start(y_1) + sum_t e_t(y_t) + sum_t tr(y_t, y_{t+1}) + stop(y_T)`.
//!
//! Lattice arithmetic always runs in `f64`, whatever the training precision.

use crate::error::{GrnError, Result};
use crate::metrics::Tag;
use crate::numcore::{log_sum_exp, CustomOp, Graph, NodeId, Real, SeqLayout};

/// Emission and transition scores for a padded batch.
#[derive(Clone, Debug)]
pub struct LatticeScores {
    num_labels: usize,
    layout: SeqLayout,
    /// `[B*T x L]`.
    emissions: Vec<f64>,
    /// `[(L+1) x (L+1)]`, disallowed entries already set to `-inf`.
    transitions: Vec<f64>,
}

impl LatticeScores {
    pub fn new(num_labels: usize, layout: SeqLayout, emissions: Vec<f64>, transitions: Vec<f64>) -> Result<Self> {
        let n = num_labels + 1;
        if emissions.len() != layout.rows() * num_labels {
            return Err(GrnError::Shape {
                op: "crf",
                left: vec![emissions.len()],
                right: vec![layout.rows(), num_labels],
            });
        }
        if transitions.len() != n * n {
            return Err(GrnError::Shape {
                op: "crf",
                left: vec![transitions.len()],
                right: vec![n, n],
            });
        }
        Ok(Self {
            num_labels,
            layout,
            emissions,
            transitions,
        })
    }

    /// Sets every transition whose `allowed` flag is false to `-inf`.
    pub fn with_mask(mut self, allowed: &[bool]) -> Self {
        for (t, &ok) in self.transitions.iter_mut().zip(allowed) {
            if !ok {
                *t = f64::NEG_INFINITY;
            }
        }
        self
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn layout(&self) -> &SeqLayout {
        &self.layout
    }

    #[inline]
    fn tr(&self, from: usize, to: usize) -> f64 {
        self.transitions[from * (self.num_labels + 1) + to]
    }

    #[inline]
    fn start(&self, y: usize) -> f64 {
        self.tr(self.num_labels, y)
    }

    #[inline]
    fn stop(&self, y: usize) -> f64 {
        self.tr(y, self.num_labels)
    }

    #[inline]
    fn emission(&self, b: usize, t: usize, y: usize) -> f64 {
        self.emissions[self.layout.row(b, t) * self.num_labels + y]
    }

    fn len_checked(&self, b: usize) -> Result<usize> {
        match self.layout.lengths()[b] {
            0 => Err(GrnError::InvalidArgument(format!("sentence {b} has no real tokens"))),
            n => Ok(n),
        }
    }

    /// Score of `path` for sentence `b`.
    pub fn path_score(&self, b: usize, path: &[usize]) -> f64 {
        let Some((&first, _)) = path.split_first() else {
            return f64::NEG_INFINITY;
        };
        let mut s = self.start(first);
        for (t, &y) in path.iter().enumerate() {
            s += self.emission(b, t, y);
            if t > 0 {
                s += self.tr(path[t - 1], y);
            }
        }
        s + self.stop(path[path.len() - 1])
    }

    fn alpha(&self, b: usize, len: usize) -> Vec<f64> {
        let l = self.num_labels;
        let mut alpha = vec![0.0; len * l];
        for y in 0..l {
            alpha[y] = self.start(y) + self.emission(b, 0, y);
        }
        let mut buf = vec![0.0; l];
        for t in 1..len {
            for y in 0..l {
                for (yp, v) in buf.iter_mut().enumerate() {
                    *v = alpha[(t - 1) * l + yp] + self.tr(yp, y);
                }
                alpha[t * l + y] = log_sum_exp(&buf) + self.emission(b, t, y);
            }
        }
        alpha
    }

    fn beta(&self, b: usize, len: usize) -> Vec<f64> {
        let l = self.num_labels;
        let mut beta = vec![0.0; len * l];
        for y in 0..l {
            beta[(len - 1) * l + y] = self.stop(y);
        }
        let mut buf = vec![0.0; l];
        for t in (0..len - 1).rev() {
            for y in 0..l {
                for (yn, v) in buf.iter_mut().enumerate() {
                    *v = self.tr(y, yn) + self.emission(b, t + 1, yn) + beta[(t + 1) * l + yn];
                }
                beta[t * l + y] = log_sum_exp(&buf);
            }
        }
        beta
    }

    fn log_z_from_alpha(&self, alpha: &[f64], len: usize) -> f64 {
        let l = self.num_labels;
        let last: Vec<f64> = (0..l).map(|y| alpha[(len - 1) * l + y] + self.stop(y)).collect();
        log_sum_exp(&last)
    }

    /// `log Z` of sentence `b` by the forward algorithm.
    pub fn log_partition(&self, b: usize) -> Result<f64> {
        let len = self.len_checked(b)?;
        Ok(self.log_z_from_alpha(&self.alpha(b, len), len))
    }

    /// Per-position label marginals `[T x L]` of sentence `b`.
    pub fn marginals(&self, b: usize) -> Result<Vec<f64>> {
        let len = self.len_checked(b)?;
        let alpha = self.alpha(b, len);
        let beta = self.beta(b, len);
        let log_z = self.log_z_from_alpha(&alpha, len);
        Ok(alpha.iter().zip(&beta).map(|(a, be)| (a + be - log_z).exp()).collect())
    }
}

/// Emission scores `p W^T`, `[B*T x L]`.
pub fn potentials<T: Real>(g: &mut Graph<'_, T>, p: NodeId, weight: NodeId) -> Result<NodeId> {
    g.linear(p, weight, None)
}

/// Copies graph values into a lattice.
pub fn lattice_from_graph<T: Real>(
    g: &Graph<'_, T>,
    emissions: NodeId,
    transitions: NodeId,
    layout: &SeqLayout,
) -> Result<LatticeScores> {
    let (rows, l) = match g.shape(emissions) {
        [r, l] => (*r, *l),
        s => {
            return Err(GrnError::Shape {
                op: "crf",
                left: s.to_vec(),
                right: vec![layout.rows()],
            })
        }
    };
    if rows != layout.rows() || g.shape(transitions) != [l + 1, l + 1] {
        return Err(GrnError::Shape {
            op: "crf",
            left: vec![rows, l],
            right: g.shape(transitions).to_vec(),
        });
    }
    LatticeScores::new(
        l,
        layout.clone(),
        g.value(emissions).iter().map(|v| v.as_f64()).collect(),
        g.value(transitions).iter().map(|v| v.as_f64()).collect(),
    )
}

struct CrfNll<T> {
    d_emissions: Vec<T>,
    d_transitions: Vec<T>,
}

impl<T: Real> CustomOp<T> for CrfNll<T> {
    fn name(&self) -> &'static str {
        "crf_nll"
    }

    fn backward(&self, _inputs: &[&[T]], _output: &[T], grad_out: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let s = grad_out[0];
        vec![
            needs[0].then(|| self.d_emissions.iter().map(|&v| v * s).collect()),
            needs[1].then(|| self.d_transitions.iter().map(|&v| v * s).collect()),
        ]
    }
}

/// `sum_b (log Z_b - score_b(gold))` as a scalar node. `gold` holds one label
/// id per flat row; padded rows are ignored. `allowed`, when given, forbids
/// transitions whose flag is false.
pub fn nll_loss<T: Real>(
    g: &mut Graph<'_, T>,
    emissions: NodeId,
    transitions: NodeId,
    layout: &SeqLayout,
    gold: &[usize],
    allowed: Option<&[bool]>,
) -> Result<NodeId> {
    let mut lat = lattice_from_graph(g, emissions, transitions, layout)?;
    if let Some(mask) = allowed {
        lat = lat.with_mask(mask);
    }
    let l = lat.num_labels;
    let n = l + 1;
    if gold.len() != layout.rows() {
        return Err(GrnError::Shape {
            op: "nll_loss",
            left: vec![gold.len()],
            right: vec![layout.rows()],
        });
    }
    let mut loss = 0.0;
    let mut de = vec![0.0; lat.emissions.len()];
    let mut dt = vec![0.0; n * n];
    for b in 0..layout.batch() {
        let len = lat.len_checked(b)?;
        let path = &gold[layout.row(b, 0)..layout.row(b, 0) + len];
        if let Some(&bad) = path.iter().find(|&&y| y >= l) {
            return Err(GrnError::IdOutOfRange { id: bad, rows: l });
        }
        let alpha = lat.alpha(b, len);
        let beta = lat.beta(b, len);
        let log_z = lat.log_z_from_alpha(&alpha, len);
        loss += log_z - lat.path_score(b, path);

        for t in 0..len {
            let row = layout.row(b, t);
            for y in 0..l {
                let m = (alpha[t * l + y] + beta[t * l + y] - log_z).exp();
                de[row * l + y] += m;
                if t == 0 {
                    dt[l * n + y] += m;
                }
                if t == len - 1 {
                    dt[y * n + l] += m;
                }
            }
            if t > 0 {
                for yp in 0..l {
                    for y in 0..l {
                        let s = alpha[(t - 1) * l + yp] + lat.tr(yp, y) + lat.emission(b, t, y) + beta[t * l + y];
                        dt[yp * n + y] += (s - log_z).exp();
                    }
                }
            }
        }
        for (t, &y) in path.iter().enumerate() {
            de[layout.row(b, t) * l + y] -= 1.0;
            if t > 0 {
                dt[path[t - 1] * n + y] -= 1.0;
            }
        }
        dt[l * n + path[0]] -= 1.0;
        dt[path[len - 1] * n + l] -= 1.0;
    }
    let op = CrfNll {
        d_emissions: de.into_iter().map(T::lit).collect(),
        d_transitions: dt.into_iter().map(T::lit).collect(),
    };
    Ok(g.custom(vec![emissions, transitions], vec![1], vec![T::lit(loss)], Box::new(op)))
}

/// Best path and its score for every sentence. Ties go to the lower label id
/// at each backtracking step.
pub fn viterbi(scores: &LatticeScores) -> Vec<(Vec<usize>, f64)> {
    let l = scores.num_labels;
    (0..scores.layout.batch())
        .map(|b| {
            let len = scores.layout.lengths()[b];
            if len == 0 {
                return (Vec::new(), f64::NEG_INFINITY);
            }
            let mut delta: Vec<f64> = (0..l).map(|y| scores.start(y) + scores.emission(b, 0, y)).collect();
            let mut back = vec![0usize; len * l];
            for t in 1..len {
                let mut next = vec![0.0; l];
                for y in 0..l {
                    let mut best = 0;
                    let mut best_v = delta[0] + scores.tr(0, y);
                    for (yp, &d) in delta.iter().enumerate().skip(1) {
                        let v = d + scores.tr(yp, y);
                        if v > best_v {
                            best = yp;
                            best_v = v;
                        }
                    }
                    back[t * l + y] = best;
                    next[y] = best_v + scores.emission(b, t, y);
                }
                delta = next;
            }
            let mut last = 0;
            let mut last_v = delta[0] + scores.stop(0);
            for (y, &d) in delta.iter().enumerate().skip(1) {
                let v = d + scores.stop(y);
                if v > last_v {
                    last = y;
                    last_v = v;
                }
            }
            let mut path = vec![last; len];
            for t in (1..len).rev() {
                path[t - 1] = back[t * l + path[t]];
            }
            let score = scores.path_score(b, &path);
            (path, score)
        })
        .collect()
}

/// Exhaustive enumeration over all `L^T` label sequences of one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct BruteForce {
    pub log_z: f64,
    pub best_path: Vec<usize>,
    pub best_score: f64,
}

/// Largest `L^T` accepted by [`brute_force_check`].
pub const BRUTE_FORCE_LIMIT: u64 = 1_000_000;

pub fn brute_force_check(scores: &LatticeScores, b: usize) -> Result<BruteForce> {
    let len = scores.len_checked(b)?;
    let l = scores.num_labels;
    let total = (l as u64)
        .checked_pow(len as u32)
        .filter(|&n| n <= BRUTE_FORCE_LIMIT)
        .ok_or_else(|| GrnError::TooLarge(format!("{l}^{len} label sequences")))?;
    let mut path = vec![0usize; len];
    let mut all = Vec::with_capacity(total as usize);
    let mut best_path = path.clone();
    let mut best_score = f64::NEG_INFINITY;
    for _ in 0..total {
        let s = scores.path_score(b, &path);
        all.push(s);
        if s > best_score {
            best_score = s;
            best_path.clone_from(&path);
        }
        for slot in path.iter_mut().rev() {
            *slot += 1;
            if *slot < l {
                break;
            }
            *slot = 0;
        }
    }
    Ok(BruteForce {
        log_z: log_sum_exp(&all),
        best_path,
        best_score,
    })
}

/// Flags of the `(L+1) x (L+1)` transitions that keep a BIOES sequence valid.
pub fn bioes_transition_mask<S: AsRef<str>>(labels: &[S]) -> Result<Vec<bool>> {
    let l = labels.len();
    let tags = labels.iter().map(|s| Tag::parse(s.as_ref())).collect::<Result<Vec<_>>>()?;
    let opens = |t: &Tag| matches!(t, Tag::Outside | Tag::Begin(_) | Tag::Single(_));
    let closed = |t: &Tag| matches!(t, Tag::Outside | Tag::End(_) | Tag::Single(_));
    let mut allowed = vec![false; (l + 1) * (l + 1)];
    for (from, ft) in tags.iter().enumerate() {
        for (to, tt) in tags.iter().enumerate() {
            allowed[from * (l + 1) + to] = match (ft, tt) {
                (Tag::Begin(a) | Tag::Inside(a), Tag::Inside(b) | Tag::End(b)) => a == b,
                (f, t) => closed(f) && opens(t),
            };
        }
        allowed[from * (l + 1) + l] = closed(ft);
        allowed[l * (l + 1) + from] = opens(ft);
    }
    Ok(allowed)
}
