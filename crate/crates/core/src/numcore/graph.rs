use std::ops::Deref;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::real::{axpy, dot, sigmoid, Real};
use super::tensor::{rows_cols, Tensor};
use crate::error::{GrnError, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
}

/// A fused operation whose forward value is computed by the caller and whose
/// vector-Jacobian product is supplied here.
pub trait CustomOp<T>: Send {
    fn name(&self) -> &'static str;

    /// Gradient for each input given the upstream gradient `grad_out`.
    /// Entries whose `needs` flag is false may be `None`.
    fn backward(
        &self,
        inputs: &[&[T]],
        output: &[T],
        grad_out: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

enum Value<'a, T> {
    Borrowed(&'a [T]),
    Owned(Vec<T>),
}

impl<T> Deref for Value<'_, T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        match self {
            Value::Borrowed(s) => s,
            Value::Owned(v) => v,
        }
    }
}

#[derive(Clone, Copy)]
struct ConvSegment {
    in_start: usize,
    len: usize,
    out_start: usize,
}

enum Op<'a, T> {
    Leaf,
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Conv1d {
        x: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        pad: usize,
        segments: Vec<ConvSegment>,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    MaxAcross {
        xs: Vec<NodeId>,
        winner: Vec<u32>,
    },
    Activation {
        x: NodeId,
        kind: Activation,
    },
    Dropout {
        x: NodeId,
        mask: Vec<T>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
        padding_idx: Option<usize>,
    },
    ConcatCols {
        xs: Vec<NodeId>,
    },
    ScatterRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    MaskRows {
        x: NodeId,
        keep: Vec<bool>,
    },
    SliceRows {
        x: NodeId,
        start_row: usize,
    },
    ConcatRows {
        xs: Vec<NodeId>,
    },
    Reshape {
        x: NodeId,
    },
    WeightedSum {
        x: NodeId,
        weights: Option<Vec<T>>,
    },
    Custom {
        inputs: Vec<NodeId>,
        op: Box<dyn CustomOp<T> + 'a>,
    },
}

impl<T> Op<'_, T> {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Linear { x, w, b } => [Some(*x), Some(*w), *b].into_iter().flatten().collect(),
            Op::Conv1d { x, kernel, bias, .. } => {
                [Some(*x), Some(*kernel), *bias].into_iter().flatten().collect()
            }
            Op::MaxPool { x, .. }
            | Op::Activation { x, .. }
            | Op::Dropout { x, .. }
            | Op::ScatterRows { x, .. }
            | Op::MaskRows { x, .. }
            | Op::SliceRows { x, .. }
            | Op::Reshape { x }
            | Op::WeightedSum { x, .. } => vec![*x],
            Op::Embedding { table, .. } => vec![*table],
            Op::MaxAcross { xs, .. } | Op::ConcatCols { xs } | Op::ConcatRows { xs } => xs.clone(),
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<'a, T> {
    shape: Vec<usize>,
    value: Value<'a, T>,
    grad: Option<Vec<T>>,
    op: Op<'a, T>,
    requires_grad: bool,
}

/// Tape of nodes recorded in evaluation order, plus the dropout RNG.
///
/// Parameters are bound by reference (`'a`) so a forward pass never copies
/// weight matrices.
pub struct Graph<'a, T> {
    nodes: Vec<Node<'a, T>>,
    rng: ChaCha8Rng,
    backward_done: bool,
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> GrnError {
    GrnError::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn with_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    match s.last_mut() {
        Some(l) => *l = last,
        None => s.push(last),
    }
    s
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn tensor(&self, id: NodeId) -> Tensor<T> {
        Tensor::new(self.shape(id).to_vec(), self.value(id).to_vec()).expect("node shape")
    }

    /// Ids of the nodes an operation consumed, in recording order.
    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.inputs()
    }

    fn push(&mut self, shape: Vec<usize>, value: Value<'a, T>, op: Op<'a, T>) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = op.inputs().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, tensor: Tensor<T>, requires_grad: bool) -> NodeId {
        let shape = tensor.shape().to_vec();
        let id = self.push(shape, Value::Owned(tensor.into_data()), Op::Leaf);
        self.nodes[id.0].requires_grad = requires_grad;
        id
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> NodeId {
        self.leaf(tensor, false)
    }

    /// Trainable leaf that borrows its data.
    pub fn param(&mut self, shape: &[usize], data: &'a [T]) -> Result<NodeId> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(shape_err("param", shape, &[data.len()]));
        }
        let id = self.push(shape.to_vec(), Value::Borrowed(data), Op::Leaf);
        self.nodes[id.0].requires_grad = true;
        Ok(id)
    }

    /// Records a fused operation whose output the caller already computed.
    pub fn custom(
        &mut self,
        inputs: Vec<NodeId>,
        shape: Vec<usize>,
        value: Vec<T>,
        op: Box<dyn CustomOp<T> + 'a>,
    ) -> NodeId {
        self.push(shape, Value::Owned(value), Op::Custom { inputs, op })
    }

    /// `out[n, o] = sum_i w[o, i] * x[n, i] + b[o]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let (n, din) = rows_cols(xs);
        if ws.len() != 2 || ws[1] != din {
            return Err(shape_err("linear", xs, ws));
        }
        let dout = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(shape_err("linear", ws, self.shape(b)));
            }
        }
        let shape = with_last(xs, dout);
        let (xv, wv) = (self.value(x), self.value(w));
        let bv = b.map(|b| self.value(b));
        let mut out = vec![T::zero(); n * dout];
        for r in 0..n {
            let xr = &xv[r * din..(r + 1) * din];
            let orow = &mut out[r * dout..(r + 1) * dout];
            for (o, slot) in orow.iter_mut().enumerate() {
                let mut acc = dot(&wv[o * din..(o + 1) * din], xr);
                if let Some(bv) = bv {
                    acc += bv[o];
                }
                *slot = acc;
            }
        }
        Ok(self.push(shape, Value::Owned(out), Op::Linear { x, w, b }))
    }

    fn check_kernel(&self, x: NodeId, kernel: NodeId, bias: Option<NodeId>) -> Result<(usize, usize, usize)> {
        let (_, din) = rows_cols(self.shape(x));
        let ks = self.shape(kernel);
        if ks.len() != 3 || ks[2] != din {
            return Err(shape_err("conv1d", self.shape(x), ks));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ks[0]] {
                return Err(shape_err("conv1d", ks, self.shape(b)));
            }
        }
        Ok((ks[0], ks[1], din))
    }

    /// 1-d convolution of one sequence `x [T x D_in]` with `kernel [D_out x k x D_in]`,
    /// zero-padded by `pad` on both sides. Output length is `T + 2 pad - k + 1`.
    pub fn conv1d(&mut self, x: NodeId, kernel: NodeId, bias: Option<NodeId>, pad: usize) -> Result<NodeId> {
        let (dout, k, _) = self.check_kernel(x, kernel, bias)?;
        let (t, _) = rows_cols(self.shape(x));
        let padded = t + 2 * pad;
        if k > padded {
            return Err(GrnError::EmptyOutput {
                op: "conv1d",
                kernel: k,
                padded,
            });
        }
        let out_len = padded - k + 1;
        let seg = ConvSegment {
            in_start: 0,
            len: t,
            out_start: 0,
        };
        self.conv_impl(x, kernel, bias, pad, vec![seg], vec![out_len, dout])
    }

    /// Same-length convolution applied independently to each `(start_row, len)`
    /// segment of `x`. Requires an odd kernel; rows outside every segment are zero.
    pub fn conv1d_segments(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        segments: &[(usize, usize)],
    ) -> Result<NodeId> {
        let (dout, k, _) = self.check_kernel(x, kernel, bias)?;
        if k % 2 == 0 {
            return Err(GrnError::InvalidArgument(format!(
                "conv1d_segments needs an odd kernel, got {k}"
            )));
        }
        let (rows, _) = rows_cols(self.shape(x));
        if let Some(&(s, l)) = segments.iter().find(|(s, l)| s + l > rows) {
            return Err(shape_err("conv1d", &[rows], &[s, l]));
        }
        let segs = segments
            .iter()
            .map(|&(s, l)| ConvSegment {
                in_start: s,
                len: l,
                out_start: s,
            })
            .collect();
        let shape = with_last(self.shape(x), dout);
        self.conv_impl(x, kernel, bias, k / 2, segs, shape)
    }

    fn conv_impl(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        pad: usize,
        segments: Vec<ConvSegment>,
        shape: Vec<usize>,
    ) -> Result<NodeId> {
        let ks = self.shape(kernel);
        let (dout, k, din) = (ks[0], ks[1], ks[2]);
        let (xv, kv) = (self.value(x), self.value(kernel));
        let bv = bias.map(|b| self.value(b));
        let mut out = vec![T::zero(); shape.iter().product()];
        for seg in &segments {
            let out_len = (seg.len + 2 * pad + 1).saturating_sub(k);
            for t in 0..out_len {
                let orow = &mut out[(seg.out_start + t) * dout..(seg.out_start + t + 1) * dout];
                if let Some(bv) = bv {
                    orow.copy_from_slice(bv);
                }
                for j in 0..k {
                    let Some(src) = (t + j).checked_sub(pad).filter(|&s| s < seg.len) else {
                        continue;
                    };
                    let r = seg.in_start + src;
                    let xr = &xv[r * din..(r + 1) * din];
                    for (o, slot) in orow.iter_mut().enumerate() {
                        *slot += dot(&kv[(o * k + j) * din..(o * k + j + 1) * din], xr);
                    }
                }
            }
        }
        Ok(self.push(
            shape,
            Value::Owned(out),
            Op::Conv1d {
                x,
                kernel,
                bias,
                pad,
                segments,
            },
        ))
    }

    /// Per-channel maximum over the rows of `x [T x D]`; output `[D]`.
    /// Ties resolve to the first row.
    pub fn max_over_time(&mut self, x: NodeId) -> Result<NodeId> {
        let (t, d) = rows_cols(self.shape(x));
        if t == 0 {
            return Err(GrnError::EmptyInput { op: "max_over_time" });
        }
        let id = self.max_over_segments(x, &[(0, t)])?;
        self.nodes[id.0].shape = vec![d];
        Ok(id)
    }

    /// Max-over-time pooling of each `(start_row, len)` segment; output `[S x D]`.
    pub fn max_over_segments(&mut self, x: NodeId, segments: &[(usize, usize)]) -> Result<NodeId> {
        let (rows, d) = rows_cols(self.shape(x));
        if segments.iter().any(|&(_, l)| l == 0) {
            return Err(GrnError::EmptyInput { op: "max_over_time" });
        }
        if let Some(&(s, l)) = segments.iter().find(|(s, l)| s + l > rows) {
            return Err(shape_err("max_over_time", &[rows], &[s, l]));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(segments.len() * d);
        let mut argmax = Vec::with_capacity(segments.len() * d);
        for &(start, len) in segments {
            for c in 0..d {
                let mut best = start;
                for r in start + 1..start + len {
                    if xv[r * d + c] > xv[best * d + c] {
                        best = r;
                    }
                }
                out.push(xv[best * d + c]);
                argmax.push(best);
            }
        }
        Ok(self.push(vec![segments.len(), d], Value::Owned(out), Op::MaxPool { x, argmax }))
    }

    /// Elementwise maximum across same-shaped inputs; ties resolve to the first.
    pub fn max_across(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = xs.first() else {
            return Err(GrnError::EmptyInput { op: "max_across" });
        };
        let shape = self.shape(first).to_vec();
        if let Some(&bad) = xs.iter().find(|&&x| self.shape(x) != shape.as_slice()) {
            return Err(shape_err("max_across", &shape, self.shape(bad)));
        }
        let mut out = self.value(first).to_vec();
        let mut winner = vec![0u32; out.len()];
        for (k, &x) in xs.iter().enumerate().skip(1) {
            for ((o, w), &v) in out.iter_mut().zip(winner.iter_mut()).zip(self.value(x)) {
                if v > *o {
                    *o = v;
                    *w = k as u32;
                }
            }
        }
        Ok(self.push(
            shape,
            Value::Owned(out),
            Op::MaxAcross {
                xs: xs.to_vec(),
                winner,
            },
        ))
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> NodeId {
        let out: Vec<T> = match kind {
            Activation::Tanh => self.value(x).iter().map(|v| v.tanh()).collect(),
            Activation::Sigmoid => self.value(x).iter().map(|&v| sigmoid(v)).collect(),
        };
        let shape = self.shape(x).to_vec();
        self.push(shape, Value::Owned(out), Op::Activation { x, kind })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.activation(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.activation(x, Activation::Sigmoid)
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    /// Identity otherwise.
    pub fn dropout(&mut self, x: NodeId, rate: f64, training: bool) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(GrnError::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let scale = T::lit(1.0 / (1.0 - rate));
        let n = self.value(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if self.rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    scale
                }
            })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, Value::Owned(out), Op::Dropout { x, mask }))
    }

    /// Row lookup into `table [V x D]`; output `[ids.len() x D]`.
    /// Rows at `padding_idx` are zero and never receive gradient.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize], padding_idx: Option<usize>) -> Result<NodeId> {
        let ts = self.shape(table);
        if ts.len() != 2 {
            return Err(shape_err("embedding", ts, &[]));
        }
        let (rows, d) = (ts[0], ts[1]);
        if let Some(&id) = ids.iter().find(|&&id| id >= rows) {
            return Err(GrnError::IdOutOfRange { id, rows });
        }
        let tv = self.value(table);
        let mut out = vec![T::zero(); ids.len() * d];
        for (k, &id) in ids.iter().enumerate() {
            if Some(id) != padding_idx {
                out[k * d..(k + 1) * d].copy_from_slice(&tv[id * d..(id + 1) * d]);
            }
        }
        Ok(self.push(
            vec![ids.len(), d],
            Value::Owned(out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
                padding_idx,
            },
        ))
    }

    /// Concatenation along the last dimension.
    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = xs.first() else {
            return Err(GrnError::EmptyInput { op: "concat_cols" });
        };
        let (rows, _) = rows_cols(self.shape(first));
        let mut total = 0;
        for &x in xs {
            let (r, c) = rows_cols(self.shape(x));
            if r != rows {
                return Err(shape_err("concat_cols", self.shape(first), self.shape(x)));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                let (_, c) = rows_cols(self.shape(x));
                out.extend_from_slice(&self.value(x)[r * c..(r + 1) * c]);
            }
        }
        let shape = with_last(self.shape(first), total);
        Ok(self.push(shape, Value::Owned(out), Op::ConcatCols { xs: xs.to_vec() }))
    }

    /// `out[rows[k]] = x[k]`; all other rows of `out [out_rows x D]` are zero.
    pub fn scatter_rows(&mut self, x: NodeId, rows: &[usize], out_rows: usize) -> Result<NodeId> {
        let (n, d) = rows_cols(self.shape(x));
        if n != rows.len() {
            return Err(shape_err("scatter_rows", self.shape(x), &[rows.len()]));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= out_rows) {
            return Err(GrnError::IdOutOfRange { id: r, rows: out_rows });
        }
        let xv = self.value(x);
        let mut out = vec![T::zero(); out_rows * d];
        for (k, &r) in rows.iter().enumerate() {
            out[r * d..(r + 1) * d].copy_from_slice(&xv[k * d..(k + 1) * d]);
        }
        Ok(self.push(
            vec![out_rows, d],
            Value::Owned(out),
            Op::ScatterRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Zeroes every row whose `keep` flag is false.
    pub fn mask_rows(&mut self, x: NodeId, keep: &[bool]) -> Result<NodeId> {
        let (n, d) = rows_cols(self.shape(x));
        if n != keep.len() {
            return Err(shape_err("mask_rows", self.shape(x), &[keep.len()]));
        }
        let mut out = self.value(x).to_vec();
        for (r, &k) in keep.iter().enumerate() {
            if !k {
                out[r * d..(r + 1) * d].fill(T::zero());
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            Value::Owned(out),
            Op::MaskRows {
                x,
                keep: keep.to_vec(),
            },
        ))
    }

    /// Rows `start..start + len` of `x`, as `[len x D]`.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (n, d) = rows_cols(self.shape(x));
        if start + len > n {
            return Err(shape_err("slice_rows", self.shape(x), &[start, len]));
        }
        let out = self.value(x)[start * d..(start + len) * d].to_vec();
        Ok(self.push(vec![len, d], Value::Owned(out), Op::SliceRows { x, start_row: start }))
    }

    /// Stacks the rows of each input; output `[sum rows x D]`.
    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = xs.first() else {
            return Err(GrnError::EmptyInput { op: "concat_rows" });
        };
        let (_, d) = rows_cols(self.shape(first));
        let mut out = Vec::new();
        for &x in xs {
            let (_, c) = rows_cols(self.shape(x));
            if c != d {
                return Err(shape_err("concat_rows", self.shape(first), self.shape(x)));
            }
            out.extend_from_slice(self.value(x));
        }
        let rows = out.len() / d.max(1);
        Ok(self.push(vec![rows, d], Value::Owned(out), Op::ConcatRows { xs: xs.to_vec() }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(shape_err("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), Value::Owned(out), Op::Reshape { x }))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).iter().copied().sum();
        self.push(vec![1], Value::Owned(vec![s]), Op::WeightedSum { x, weights: None })
    }

    /// `sum_k weights[k] * x[k]`, as a scalar node.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Vec<T>) -> Result<NodeId> {
        if weights.len() != self.value(x).len() {
            return Err(shape_err("weighted_sum", self.shape(x), &[weights.len()]));
        }
        let s = dot(self.value(x), &weights);
        Ok(self.push(
            vec![1],
            Value::Owned(vec![s]),
            Op::WeightedSum {
                x,
                weights: Some(weights),
            },
        ))
    }

    /// Clears all gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    /// Reverse-mode sweep from the scalar `loss`. Every node that requires
    /// gradient and lies upstream of `loss` ends up holding `dloss/dnode`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(GrnError::Backward(
                "gradients already accumulated; call zero_grad before another backward".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(GrnError::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (p, pg) in contributions {
                let node = &mut self.nodes[p.0];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &v)| *a += v),
                    None => node.grad = Some(pg),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn zeros_like(&self, id: NodeId) -> Vec<T> {
        vec![T::zero(); self.value(id).len()]
    }

    fn local_grads(&self, i: usize, g: &[T]) -> Vec<(NodeId, Vec<T>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (n, din) = rows_cols(self.shape(*x));
                let dout = self.shape(*w)[0];
                let (xv, wv) = (self.value(*x), self.value(*w));
                if self.needs(*x) {
                    let mut dx = self.zeros_like(*x);
                    for r in 0..n {
                        let dxr = &mut dx[r * din..(r + 1) * din];
                        for o in 0..dout {
                            axpy(g[r * dout + o], &wv[o * din..(o + 1) * din], dxr);
                        }
                    }
                    out.push((*x, dx));
                }
                if self.needs(*w) {
                    let mut dw = self.zeros_like(*w);
                    for r in 0..n {
                        let xr = &xv[r * din..(r + 1) * din];
                        for o in 0..dout {
                            axpy(g[r * dout + o], xr, &mut dw[o * din..(o + 1) * din]);
                        }
                    }
                    out.push((*w, dw));
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let mut db = vec![T::zero(); dout];
                    for r in 0..n {
                        axpy(T::one(), &g[r * dout..(r + 1) * dout], &mut db);
                    }
                    out.push((b, db));
                }
            }
            Op::Conv1d {
                x,
                kernel,
                bias,
                pad,
                segments,
            } => {
                let ks = self.shape(*kernel);
                let (dout, k, din) = (ks[0], ks[1], ks[2]);
                let (xv, kv) = (self.value(*x), self.value(*kernel));
                let mut dx = self.needs(*x).then(|| self.zeros_like(*x));
                let mut dk = self.needs(*kernel).then(|| self.zeros_like(*kernel));
                let mut db = bias.filter(|b| self.needs(*b)).map(|_| vec![T::zero(); dout]);
                for seg in segments {
                    let out_len = (seg.len + 2 * pad + 1).saturating_sub(k);
                    for t in 0..out_len {
                        let grow = &g[(seg.out_start + t) * dout..(seg.out_start + t + 1) * dout];
                        if let Some(db) = db.as_mut() {
                            axpy(T::one(), grow, db);
                        }
                        for j in 0..k {
                            let Some(src) = (t + j).checked_sub(*pad).filter(|&s| s < seg.len) else {
                                continue;
                            };
                            let r = seg.in_start + src;
                            for (o, &go) in grow.iter().enumerate() {
                                let kr = (o * k + j) * din..(o * k + j + 1) * din;
                                if let Some(dk) = dk.as_mut() {
                                    axpy(go, &xv[r * din..(r + 1) * din], &mut dk[kr.clone()]);
                                }
                                if let Some(dx) = dx.as_mut() {
                                    axpy(go, &kv[kr], &mut dx[r * din..(r + 1) * din]);
                                }
                            }
                        }
                    }
                }
                out.extend(dx.map(|v| (*x, v)));
                out.extend(dk.map(|v| (*kernel, v)));
                if let (Some(b), Some(db)) = (bias, db) {
                    out.push((*b, db));
                }
            }
            Op::MaxPool { x, argmax } => {
                let (_, d) = rows_cols(self.shape(*x));
                let mut dx = self.zeros_like(*x);
                for (k, &row) in argmax.iter().enumerate() {
                    dx[row * d + k % d] += g[k];
                }
                out.push((*x, dx));
            }
            Op::MaxAcross { xs, winner } => {
                for (k, &x) in xs.iter().enumerate() {
                    if !self.needs(x) {
                        continue;
                    }
                    let dx = winner
                        .iter()
                        .zip(g)
                        .map(|(&w, &gv)| if w as usize == k { gv } else { T::zero() })
                        .collect();
                    out.push((x, dx));
                }
            }
            Op::Activation { x, kind } => {
                let y = &node.value;
                let dx = match kind {
                    Activation::Tanh => y
                        .iter()
                        .zip(g)
                        .map(|(&yv, &gv)| gv * (T::one() - yv * yv))
                        .collect(),
                    Activation::Sigmoid => y
                        .iter()
                        .zip(g)
                        .map(|(&yv, &gv)| gv * yv * (T::one() - yv))
                        .collect(),
                };
                out.push((*x, dx));
            }
            Op::Dropout { x, mask } => {
                out.push((*x, g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect()));
            }
            Op::Embedding {
                table,
                ids,
                padding_idx,
            } => {
                let d = self.shape(*table)[1];
                let mut dt = self.zeros_like(*table);
                for (k, &id) in ids.iter().enumerate() {
                    if Some(id) != *padding_idx {
                        axpy(T::one(), &g[k * d..(k + 1) * d], &mut dt[id * d..(id + 1) * d]);
                    }
                }
                out.push((*table, dt));
            }
            Op::ConcatCols { xs } => {
                let total = *node.shape.last().unwrap_or(&1);
                let rows = g.len() / total.max(1);
                let mut offset = 0;
                for &x in xs {
                    let (_, c) = rows_cols(self.shape(x));
                    if self.needs(x) {
                        let mut dx = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            dx.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        out.push((x, dx));
                    }
                    offset += c;
                }
            }
            Op::ScatterRows { x, rows } => {
                let (_, d) = rows_cols(self.shape(*x));
                let mut dx = Vec::with_capacity(rows.len() * d);
                for &r in rows {
                    dx.extend_from_slice(&g[r * d..(r + 1) * d]);
                }
                out.push((*x, dx));
            }
            Op::MaskRows { x, keep } => {
                let d = g.len() / keep.len().max(1);
                let mut dx = g.to_vec();
                for (r, &k) in keep.iter().enumerate() {
                    if !k {
                        dx[r * d..(r + 1) * d].fill(T::zero());
                    }
                }
                out.push((*x, dx));
            }
            Op::SliceRows { x, start_row } => {
                let (_, d) = rows_cols(self.shape(*x));
                let mut dx = self.zeros_like(*x);
                dx[start_row * d..start_row * d + g.len()].copy_from_slice(g);
                out.push((*x, dx));
            }
            Op::ConcatRows { xs } => {
                let mut offset = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    if self.needs(x) {
                        out.push((x, g[offset..offset + n].to_vec()));
                    }
                    offset += n;
                }
            }
            Op::Reshape { x } => out.push((*x, g.to_vec())),
            Op::WeightedSum { x, weights } => {
                let dx = match weights {
                    Some(w) => w.iter().map(|&wv| wv * g[0]).collect(),
                    None => vec![g[0]; self.value(*x).len()],
                };
                out.push((*x, dx));
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&[T]> = inputs.iter().map(|&p| self.value(p)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&p| self.needs(p)).collect();
                let grads = op.backward(&values, &node.value, g, &needs);
                for ((&p, grad), need) in inputs.iter().zip(grads).zip(needs) {
                    if let (Some(grad), true) = (grad, need) {
                        debug_assert_eq!(grad.len(), self.value(p).len(), "{}", op.name());
                        out.push((p, grad));
                    }
                }
            }
        }
        out
    }
}
