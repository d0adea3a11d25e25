//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Ops are recorded on a tape ([`Graph`]); `backward` replays the tape in
//! reverse and accumulates gradients into leaf nodes. Tensors are immutable
//! once pushed; one graph serves one forward/backward episode and is
//! dropped afterwards.
//!
//! Broadcasting is deliberately restricted: elementwise ops require exact
//! shape equality, matmul broadcasts only a shared rank-2 right operand
//! over leading batch dims, and `add_last`/`mul_last` broadcast a vector
//! over the last axis. Anything else needs an explicit reshape/permute.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// Boolean attention mask; `true` marks a blocked (masked-out) pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    blocked: Vec<bool>,
}

impl Mask {
    pub fn from_fn(rows: usize, cols: usize, mut blocked: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(blocked(i, j));
            }
        }
        Mask { rows, cols, blocked: data }
    }

    /// Square causal mask: row i sees columns `0..=i`.
    pub fn causal(s: usize) -> Self {
        Mask::from_fn(s, s, |i, j| j > i)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_blocked(&self, i: usize, j: usize) -> bool {
        self.blocked[i * self.cols + j]
    }

    /// Number of visible (unblocked) pairs.
    pub fn visible_pairs(&self) -> u64 {
        self.blocked.iter().filter(|&&b| !b).count() as u64
    }

    /// Every query row must keep at least one visible key.
    pub fn validate(&self) -> Result<()> {
        for i in 0..self.rows {
            if (0..self.cols).all(|j| self.is_blocked(i, j)) {
                return Err(Error::Masking(format!("mask row {i} has no visible positions")));
            }
        }
        Ok(())
    }
}

enum Op<T: Scalar> {
    Leaf,
    StopGrad,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Maximum(TensorId, TensorId),
    AddScalar(TensorId),
    MulScalar(TensorId, T),
    AddLast(TensorId, TensorId),
    MulLast(TensorId, TensorId),
    Matmul(TensorId, TensorId),
    Reshape(TensorId),
    Permute { x: TensorId, perm: Vec<usize> },
    ConcatLast(TensorId, TensorId),
    SliceAxis0 { x: TensorId, start: usize },
    GatherAxis0 { x: TensorId, indices: Arc<Vec<usize>> },
    RepeatInterleave { x: TensorId, axis: usize, times: usize },
    Softmax(TensorId),
    MaskedFill { x: TensorId, mask: Arc<Mask> },
    Silu(TensorId),
    Sigmoid(TensorId),
    SumAll(TensorId),
    MeanAll(TensorId),
    StdAll(TensorId),
    RmsNorm { x: TensorId, gain: TensorId, eps: T },
    Rope { x: TensorId, positions: Arc<Vec<usize>>, base: f64 },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Tape of op records in forward order.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), check_finite: false }
    }

    /// Validate that every op output is finite (used by tests and oracles;
    /// the trainer checks the loss scalar instead).
    pub fn with_finite_checks() -> Self {
        Graph { nodes: Vec::new(), check_finite: true }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<TensorId> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite("op produced a non-finite value".into()));
        }
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Ok(TensorId(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> TensorId {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None });
        TensorId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> TensorId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: TensorId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn needs(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ---- elementwise ----

    fn binary_same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape { op, detail: format!("{sa:?} vs {sb:?}") });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(data, Op::Add(a, b), self.needs(&[a, b]))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("sub", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(data, Op::Sub(a, b), self.needs(&[a, b]))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(data, Op::Mul(a, b), self.needs(&[a, b]))
    }

    /// Elementwise max; ties resolve to the first operand in backward.
    pub fn maximum(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("maximum", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| if x >= y { x } else { y });
        self.push(data, Op::Maximum(a, b), self.needs(&[a, b]))
    }

    pub fn add_scalar(&mut self, a: TensorId, c: T) -> Result<TensorId> {
        let data = self.value(a).map(|x| x + c);
        let needs = self.needs(&[a]);
        self.push(data, Op::AddScalar(a), needs)
    }

    pub fn mul_scalar(&mut self, a: TensorId, c: T) -> Result<TensorId> {
        let data = self.value(a).map(|x| x * c);
        let needs = self.needs(&[a]);
        self.push(data, Op::MulScalar(a, c), needs)
    }

    /// `a + v` with `v` (rank-1) broadcast over all leading axes.
    pub fn add_last(&mut self, a: TensorId, v: TensorId) -> Result<TensorId> {
        self.check_last_broadcast("add_last", a, v)?;
        let out = last_broadcast(self.value(a), self.value(v), |x, y| x + y);
        self.push(out, Op::AddLast(a, v), self.needs(&[a, v]))
    }

    /// `a * v` with `v` (rank-1) broadcast over all leading axes.
    pub fn mul_last(&mut self, a: TensorId, v: TensorId) -> Result<TensorId> {
        self.check_last_broadcast("mul_last", a, v)?;
        let out = last_broadcast(self.value(a), self.value(v), |x, y| x * y);
        self.push(out, Op::MulLast(a, v), self.needs(&[a, v]))
    }

    fn check_last_broadcast(&self, op: &'static str, a: TensorId, v: TensorId) -> Result<()> {
        let (ta, tv) = (self.value(a), self.value(v));
        if tv.rank() != 1 || tv.numel() != ta.last_dim() {
            return Err(Error::Shape {
                op,
                detail: format!("vector {:?} does not match last axis of {:?}", tv.shape(), ta.shape()),
            });
        }
        Ok(())
    }

    // ---- activations ----

    pub fn silu(&mut self, a: TensorId) -> Result<TensorId> {
        let data = self.value(a).map(|x| x * sigmoid_scalar(x));
        let needs = self.needs(&[a]);
        self.push(data, Op::Silu(a), needs)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        let data = self.value(a).map(sigmoid_scalar);
        let needs = self.needs(&[a]);
        self.push(data, Op::Sigmoid(a), needs)
    }

    /// Identity forward, zero backward.
    pub fn stop_grad(&mut self, a: TensorId) -> Result<TensorId> {
        let data = self.value(a).clone();
        self.push(data, Op::StopGrad, false)
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        let s: T = self.value(a).data().iter().copied().sum();
        let needs = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), needs)
    }

    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::contract("mean of empty tensor"));
        }
        let s: T = t.data().iter().copied().sum();
        let m = s / T::from_f64(t.numel() as f64);
        let needs = self.needs(&[a]);
        self.push(Tensor::scalar(m), Op::MeanAll(a), needs)
    }

    /// Population standard deviation over all elements.
    pub fn std_all(&mut self, a: TensorId) -> Result<TensorId> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::contract("std of empty tensor"));
        }
        let n = T::from_f64(t.numel() as f64);
        let mean: T = t.data().iter().copied().sum::<T>() / n;
        let var: T = t.data().iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
        let needs = self.needs(&[a]);
        self.push(Tensor::scalar(var.sqrt()), Op::StdAll(a), needs)
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: TensorId, shape: impl Into<Vec<usize>>) -> Result<TensorId> {
        let out = self.value(a).clone().reshape(shape)?;
        let needs = self.needs(&[a]);
        self.push(out, Op::Reshape(a), needs)
    }

    pub fn permute(&mut self, a: TensorId, perm: &[usize]) -> Result<TensorId> {
        let t = self.value(a);
        validate_perm(t.rank(), perm)?;
        let out = permute_tensor(t, perm);
        let needs = self.needs(&[a]);
        self.push(out, Op::Permute { x: a, perm: perm.to_vec() }, needs)
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let rank = self.value(a).rank();
        if rank < 2 {
            return Err(Error::Shape { op: "transpose", detail: format!("rank {rank} < 2") });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(a, &perm)
    }

    pub fn concat_last(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != tb.rank()
            || ta.rank() == 0
            || ta.shape()[..ta.rank() - 1] != tb.shape()[..tb.rank() - 1]
        {
            return Err(Error::Shape {
                op: "concat_last",
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let (la, lb) = (ta.last_dim(), tb.last_dim());
        let rows = ta.leading();
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = la + lb;
        let mut data = Vec::with_capacity(rows * (la + lb));
        for r in 0..rows {
            data.extend_from_slice(&ta.data()[r * la..(r + 1) * la]);
            data.extend_from_slice(&tb.data()[r * lb..(r + 1) * lb]);
        }
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::ConcatLast(a, b), self.needs(&[a, b]))
    }

    /// Contiguous sub-range along axis 0.
    pub fn slice_axis0(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let t = self.value(a);
        if t.rank() == 0 || start + len > t.shape()[0] {
            return Err(Error::Shape {
                op: "slice_axis0",
                detail: format!("range {start}..{} out of {:?}", start + len, t.shape()),
            });
        }
        let row = t.numel() / t.shape()[0];
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let data = t.data()[start * row..(start + len) * row].to_vec();
        let out = Tensor::new(shape, data)?;
        let needs = self.needs(&[a]);
        self.push(out, Op::SliceAxis0 { x: a, start }, needs)
    }

    /// Select rows along axis 0 by index; duplicate indices are allowed
    /// (gradients accumulate).
    pub fn gather_axis0(&mut self, a: TensorId, indices: &[usize]) -> Result<TensorId> {
        let t = self.value(a);
        if t.rank() == 0 {
            return Err(Error::Shape { op: "gather_axis0", detail: "rank-0 input".into() });
        }
        let axis = t.shape()[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= axis) {
            return Err(Error::Shape {
                op: "gather_axis0",
                detail: format!("index {bad} out of axis size {axis}"),
            });
        }
        let row = t.numel() / axis;
        let mut shape = t.shape().to_vec();
        shape[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
        }
        let out = Tensor::new(shape, data)?;
        let needs = self.needs(&[a]);
        self.push(out, Op::GatherAxis0 { x: a, indices: Arc::new(indices.to_vec()) }, needs)
    }

    /// Repeat each slice along `axis` `times` times consecutively:
    /// output index `j` along the axis maps to input `j / times`.
    pub fn repeat_interleave(&mut self, a: TensorId, axis: usize, times: usize) -> Result<TensorId> {
        let t = self.value(a);
        if axis >= t.rank() || times == 0 {
            return Err(Error::Shape {
                op: "repeat_interleave",
                detail: format!("axis {axis} times {times} on {:?}", t.shape()),
            });
        }
        let (outer, alen, inner) = split_axis(t.shape(), axis);
        let mut shape = t.shape().to_vec();
        shape[axis] = alen * times;
        let mut data = Vec::with_capacity(t.numel() * times);
        for o in 0..outer {
            for aj in 0..alen * times {
                let src = (o * alen + aj / times) * inner;
                data.extend_from_slice(&t.data()[src..src + inner]);
            }
        }
        let out = Tensor::new(shape, data)?;
        let needs = self.needs(&[a]);
        self.push(out, Op::RepeatInterleave { x: a, axis, times }, needs)
    }

    // ---- matmul ----

    /// Batched matrix product. `a` is `[..batch, m, k]`; `b` is either
    /// `[..batch, k, n]` or a shared `[k, n]` broadcast over the batch.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let dims = MatmulDims::infer(ta.shape(), tb.shape())?;
        let mut out = vec![T::zero(); dims.batch * dims.m * dims.n];
        let (m, k, n) = (dims.m, dims.k, dims.n);
        for l in 0..dims.batch {
            let av = &ta.data()[l * m * k..(l + 1) * m * k];
            let bv = if dims.shared_rhs {
                tb.data()
            } else {
                &tb.data()[l * k * n..(l + 1) * k * n]
            };
            matmul_nn(av, bv, m, k, n, &mut out[l * m * n..(l + 1) * m * n]);
        }
        let mut shape = ta.shape()[..ta.rank() - 1].to_vec();
        shape.push(n);
        let out = Tensor::new(shape, out)?;
        self.push(out, Op::Matmul(a, b), self.needs(&[a, b]))
    }

    // ---- attention-flavored ----

    /// Softmax over the last axis. Rows whose maximum sits at or below the
    /// mask fill level are treated as fully masked and rejected.
    pub fn softmax(&mut self, a: TensorId) -> Result<TensorId> {
        let t = self.value(a);
        let cols = t.last_dim();
        if cols == 0 {
            return Err(Error::Shape { op: "softmax", detail: "empty last axis".into() });
        }
        let rows = t.leading();
        let threshold = T::from_f64(-1e8);
        let mut data = vec![T::zero(); t.numel()];
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(row[0], T::max);
            if max < threshold {
                return Err(Error::Masking(format!("softmax row {r} is fully masked")));
            }
            let out = &mut data[r * cols..(r + 1) * cols];
            let mut sum = T::zero();
            for (o, &x) in out.iter_mut().zip(row) {
                *o = (x - max).exp();
                sum += *o;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let needs = self.needs(&[a]);
        self.push(out, Op::Softmax(a), needs)
    }

    /// Write the mask fill constant (−1e9) into blocked positions. The mask
    /// addresses the last two axes and broadcasts over leading axes.
    pub fn masked_fill(&mut self, a: TensorId, mask: &Arc<Mask>) -> Result<TensorId> {
        let t = self.value(a);
        if t.rank() < 2
            || t.shape()[t.rank() - 2] != mask.rows()
            || t.shape()[t.rank() - 1] != mask.cols()
        {
            return Err(Error::Shape {
                op: "masked_fill",
                detail: format!("mask {}x{} vs tensor {:?}", mask.rows(), mask.cols(), t.shape()),
            });
        }
        let plane = mask.rows() * mask.cols();
        let lead = t.numel() / plane;
        let fill = T::mask_fill();
        let mut data = t.data().to_vec();
        for l in 0..lead {
            for i in 0..mask.rows() {
                for j in 0..mask.cols() {
                    if mask.is_blocked(i, j) {
                        data[l * plane + i * mask.cols() + j] = fill;
                    }
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let needs = self.needs(&[a]);
        self.push(out, Op::MaskedFill { x: a, mask: Arc::clone(mask) }, needs)
    }

    /// Root-mean-square normalization over the last axis with a learned
    /// per-channel gain.
    pub fn rms_norm(&mut self, a: TensorId, gain: TensorId, eps: T) -> Result<TensorId> {
        self.check_last_broadcast("rms_norm", a, gain)?;
        let (t, g) = (self.value(a), self.value(gain));
        let cols = t.last_dim();
        let rows = t.leading();
        let inv_d = T::one() / T::from_f64(cols as f64);
        let mut data = vec![T::zero(); t.numel()];
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let ms: T = row.iter().map(|&x| x * x).sum::<T>() * inv_d;
            let inv_rms = T::one() / (ms + eps).sqrt();
            for j in 0..cols {
                data[r * cols + j] = row[j] * inv_rms * g.data()[j];
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(out, Op::RmsNorm { x: a, gain, eps }, self.needs(&[a, gain]))
    }

    /// Rotary rotation of the last axis (must be even), one position per
    /// leading row. Applied to queries and keys before scores.
    pub fn rope(&mut self, a: TensorId, positions: &Arc<Vec<usize>>, base: f64) -> Result<TensorId> {
        let t = self.value(a);
        let dh = t.last_dim();
        if !dh.is_multiple_of(2) {
            return Err(Error::Shape { op: "rope", detail: format!("odd head dim {dh}") });
        }
        let rows = t.leading();
        if positions.len() != rows {
            return Err(Error::Shape {
                op: "rope",
                detail: format!("{} positions for {} rows", positions.len(), rows),
            });
        }
        let mut data = t.data().to_vec();
        rope_rotate(&mut data, dh, positions, base, false);
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let needs = self.needs(&[a]);
        self.push(out, Op::Rope { x: a, positions: Arc::clone(positions), base }, needs)
    }

    // ---- backward ----

    /// Reverse pass from a scalar root. Leaf gradients accumulate across
    /// calls; use [`Graph::reset_grads`] to clear.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut pending: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        pending[root.0] = Some(Tensor::full(self.value(root).shape().to_vec(), T::one()));

        for i in (0..=root.0).rev() {
            let Some(gy) = pending[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf => {
                    let node = &mut self.nodes[i];
                    match &mut node.grad {
                        Some(g) => add_assign(g, &gy),
                        slot => *slot = Some(gy),
                    }
                    continue;
                }
                op => {
                    let contribs = self.op_backward(op, i, &gy)?;
                    for (id, g) in contribs {
                        if !self.nodes[id.0].requires_grad {
                            continue;
                        }
                        match &mut pending[id.0] {
                            Some(acc) => add_assign(acc, &g),
                            slot => *slot = Some(g),
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn op_backward(&self, op: &Op<T>, node: usize, gy: &Tensor<T>) -> Result<Vec<(TensorId, Tensor<T>)>> {
        let out = match op {
            Op::Leaf | Op::StopGrad => vec![],
            Op::Add(a, b) => vec![(*a, gy.clone()), (*b, gy.clone())],
            Op::Sub(a, b) => vec![(*a, gy.clone()), (*b, gy.map(|v| -v))],
            Op::Mul(a, b) => vec![
                (*a, zip_map(gy, self.value(*b), |g, y| g * y)),
                (*b, zip_map(gy, self.value(*a), |g, x| g * x)),
            ],
            Op::Maximum(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = Tensor::new(
                    gy.shape().to_vec(),
                    gy.data()
                        .iter()
                        .zip(ta.data().iter().zip(tb.data()))
                        .map(|(&g, (&x, &y))| if x >= y { g } else { T::zero() })
                        .collect(),
                )?;
                let gb = Tensor::new(
                    gy.shape().to_vec(),
                    gy.data()
                        .iter()
                        .zip(ta.data().iter().zip(tb.data()))
                        .map(|(&g, (&x, &y))| if x >= y { T::zero() } else { g })
                        .collect(),
                )?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::AddScalar(a) => vec![(*a, gy.clone())],
            Op::MulScalar(a, c) => vec![(*a, gy.map(|g| g * *c))],
            Op::AddLast(a, v) => {
                let cols = self.value(*v).numel();
                vec![(*a, gy.clone()), (*v, sum_rows(gy, cols)?)]
            }
            Op::MulLast(a, v) => {
                let tv = self.value(*v);
                let cols = tv.numel();
                let ga = last_broadcast(gy, tv, |g, y| g * y);
                let prod = zip_map(gy, self.value(*a), |g, x| g * x);
                vec![(*a, ga), (*v, sum_rows(&prod, cols)?)]
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let dims = MatmulDims::infer(ta.shape(), tb.shape())?;
                let (m, k, n) = (dims.m, dims.k, dims.n);
                let mut ga = vec![T::zero(); ta.numel()];
                let mut gb = vec![T::zero(); tb.numel()];
                for l in 0..dims.batch {
                    let gyv = &gy.data()[l * m * n..(l + 1) * m * n];
                    let av = &ta.data()[l * m * k..(l + 1) * m * k];
                    let bv = if dims.shared_rhs {
                        tb.data()
                    } else {
                        &tb.data()[l * k * n..(l + 1) * k * n]
                    };
                    matmul_nt(gyv, bv, m, n, k, &mut ga[l * m * k..(l + 1) * m * k]);
                    let gbv = if dims.shared_rhs {
                        &mut gb[..]
                    } else {
                        &mut gb[l * k * n..(l + 1) * k * n]
                    };
                    matmul_tn(av, gyv, m, k, n, gbv);
                }
                vec![
                    (*a, Tensor::new(ta.shape().to_vec(), ga)?),
                    (*b, Tensor::new(tb.shape().to_vec(), gb)?),
                ]
            }
            Op::Reshape(a) => {
                vec![(*a, gy.clone().reshape(self.value(*a).shape().to_vec())?)]
            }
            Op::Permute { x, perm } => {
                let inv = invert_perm(perm);
                vec![(*x, permute_tensor(gy, &inv))]
            }
            Op::ConcatLast(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (la, lb) = (ta.last_dim(), tb.last_dim());
                let rows = ta.leading();
                let mut ga = vec![T::zero(); ta.numel()];
                let mut gb = vec![T::zero(); tb.numel()];
                for r in 0..rows {
                    let row = &gy.data()[r * (la + lb)..(r + 1) * (la + lb)];
                    ga[r * la..(r + 1) * la].copy_from_slice(&row[..la]);
                    gb[r * lb..(r + 1) * lb].copy_from_slice(&row[la..]);
                }
                vec![
                    (*a, Tensor::new(ta.shape().to_vec(), ga)?),
                    (*b, Tensor::new(tb.shape().to_vec(), gb)?),
                ]
            }
            Op::SliceAxis0 { x, start } => {
                let tx = self.value(*x);
                let row = tx.numel() / tx.shape()[0];
                let mut gx = vec![T::zero(); tx.numel()];
                gx[start * row..start * row + gy.numel()].copy_from_slice(gy.data());
                vec![(*x, Tensor::new(tx.shape().to_vec(), gx)?)]
            }
            Op::GatherAxis0 { x, indices } => {
                let tx = self.value(*x);
                let row = tx.numel() / tx.shape()[0];
                let mut gx = vec![T::zero(); tx.numel()];
                for (pos, &i) in indices.iter().enumerate() {
                    for j in 0..row {
                        gx[i * row + j] += gy.data()[pos * row + j];
                    }
                }
                vec![(*x, Tensor::new(tx.shape().to_vec(), gx)?)]
            }
            Op::RepeatInterleave { x, axis, times } => {
                let tx = self.value(*x);
                let (outer, alen, inner) = split_axis(tx.shape(), *axis);
                let mut gx = vec![T::zero(); tx.numel()];
                for o in 0..outer {
                    for aj in 0..alen * times {
                        let dst = (o * alen + aj / times) * inner;
                        let src = (o * alen * times + aj) * inner;
                        for j in 0..inner {
                            gx[dst + j] += gy.data()[src + j];
                        }
                    }
                }
                vec![(*x, Tensor::new(tx.shape().to_vec(), gx)?)]
            }
            Op::Softmax(a) => {
                let y = &self.nodes[node].value;
                let cols = y.last_dim();
                let rows = y.leading();
                let mut gx = vec![T::zero(); y.numel()];
                for r in 0..rows {
                    let ys = &y.data()[r * cols..(r + 1) * cols];
                    let gs = &gy.data()[r * cols..(r + 1) * cols];
                    let dot: T = ys.iter().zip(gs).map(|(&y, &g)| y * g).sum();
                    for j in 0..cols {
                        gx[r * cols + j] = ys[j] * (gs[j] - dot);
                    }
                }
                vec![(*a, Tensor::new(y.shape().to_vec(), gx)?)]
            }
            Op::MaskedFill { x, mask } => {
                let tx = self.value(*x);
                let plane = mask.rows() * mask.cols();
                let lead = tx.numel() / plane;
                let mut gx = gy.data().to_vec();
                for l in 0..lead {
                    for i in 0..mask.rows() {
                        for j in 0..mask.cols() {
                            if mask.is_blocked(i, j) {
                                gx[l * plane + i * mask.cols() + j] = T::zero();
                            }
                        }
                    }
                }
                vec![(*x, Tensor::new(tx.shape().to_vec(), gx)?)]
            }
            Op::Silu(a) => {
                let tx = self.value(*a);
                let gx = zip_map(gy, tx, |g, x| {
                    let s = sigmoid_scalar(x);
                    g * s * (T::one() + x * (T::one() - s))
                });
                vec![(*a, gx)]
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[node].value;
                let gx = zip_map(gy, y, |g, s| g * s * (T::one() - s));
                vec![(*a, gx)]
            }
            Op::SumAll(a) => {
                let tx = self.value(*a);
                let g = gy.item()?;
                vec![(*a, Tensor::full(tx.shape().to_vec(), g))]
            }
            Op::MeanAll(a) => {
                let tx = self.value(*a);
                let g = gy.item()? / T::from_f64(tx.numel() as f64);
                vec![(*a, Tensor::full(tx.shape().to_vec(), g))]
            }
            Op::StdAll(a) => {
                let tx = self.value(*a);
                let sigma = self.nodes[node].value.item()?;
                let n = T::from_f64(tx.numel() as f64);
                let mean: T = tx.data().iter().copied().sum::<T>() / n;
                let g = gy.item()?;
                let gx = if sigma.as_f64() < 1e-30 {
                    Tensor::zeros(tx.shape().to_vec())
                } else {
                    tx.map(|x| g * (x - mean) / (n * sigma))
                };
                vec![(*a, gx)]
            }
            Op::RmsNorm { x, gain, eps } => {
                let (tx, tg) = (self.value(*x), self.value(*gain));
                let cols = tx.last_dim();
                let rows = tx.leading();
                let inv_d = T::one() / T::from_f64(cols as f64);
                let mut gx = vec![T::zero(); tx.numel()];
                let mut ggain = vec![T::zero(); cols];
                for r in 0..rows {
                    let xs = &tx.data()[r * cols..(r + 1) * cols];
                    let gs = &gy.data()[r * cols..(r + 1) * cols];
                    let ms: T = xs.iter().map(|&v| v * v).sum::<T>() * inv_d;
                    let rms = (ms + *eps).sqrt();
                    let inv_rms = T::one() / rms;
                    // u = gy ⊙ gain; dx = u/r − x · (u·x) / (d·r³)
                    let mut udotx = T::zero();
                    for j in 0..cols {
                        udotx += gs[j] * tg.data()[j] * xs[j];
                    }
                    let coef = udotx * inv_d * inv_rms * inv_rms * inv_rms;
                    for j in 0..cols {
                        gx[r * cols + j] = gs[j] * tg.data()[j] * inv_rms - xs[j] * coef;
                        ggain[j] += gs[j] * xs[j] * inv_rms;
                    }
                }
                vec![
                    (*x, Tensor::new(tx.shape().to_vec(), gx)?),
                    (*gain, Tensor::new(vec![cols], ggain)?),
                ]
            }
            Op::Rope { x, positions, base } => {
                let tx = self.value(*x);
                let dh = tx.last_dim();
                let mut gx = gy.data().to_vec();
                rope_rotate(&mut gx, dh, positions, *base, true);
                vec![(*x, Tensor::new(tx.shape().to_vec(), gx)?)]
            }
        };
        Ok(out)
    }
}

// ---- kernels ----

fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("zip_map shapes verified")
}

fn last_broadcast<T: Scalar>(a: &Tensor<T>, v: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let cols = v.numel();
    let mut data = Vec::with_capacity(a.numel());
    for (i, &x) in a.data().iter().enumerate() {
        data.push(f(x, v.data()[i % cols]));
    }
    Tensor::new(a.shape().to_vec(), data).expect("last_broadcast shape preserved")
}

fn sum_rows<T: Scalar>(t: &Tensor<T>, cols: usize) -> Result<Tensor<T>> {
    let mut out = vec![T::zero(); cols];
    for row in t.data().chunks_exact(cols) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::new(vec![cols], out)
}

fn add_assign<T: Scalar>(acc: &mut Tensor<T>, inc: &Tensor<T>) {
    debug_assert_eq!(acc.shape(), inc.shape());
    for (a, &b) in acc.data_mut().iter_mut().zip(inc.data()) {
        *a += b;
    }
}

struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
}

impl MatmulDims {
    fn infer(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::Shape { op: "matmul", detail: format!("{a:?} @ {b:?}") });
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (bk, n) = (b[b.len() - 2], b[b.len() - 1]);
        let shared_rhs = b.len() == 2 && a.len() > 2;
        if bk != k || (!shared_rhs && a[..a.len() - 2] != b[..b.len() - 2]) {
            return Err(Error::Shape { op: "matmul", detail: format!("{a:?} @ {b:?}") });
        }
        let batch: usize = a[..a.len() - 2].iter().product();
        Ok(MatmulDims { batch, m, k, n, shared_rhs })
    }
}

/// `out += a (m×k) · b (k×n)`; `out` must be zeroed by the caller.
fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a (m×n) · bᵀ (n×k)` where `b` is stored `k×n`.
fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * k + j] += acc;
        }
    }
}

/// `out += aᵀ (k×m) · b (m×n)` where `a` is stored `m×k`.
fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let orow = &mut out[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn validate_perm(rank: usize, perm: &[usize]) -> Result<()> {
    let mut seen = vec![false; rank];
    if perm.len() == rank {
        for &p in perm {
            if p >= rank || seen[p] {
                return Err(Error::Shape { op: "permute", detail: format!("bad perm {perm:?}") });
            }
            seen[p] = true;
        }
        return Ok(());
    }
    Err(Error::Shape { op: "permute", detail: format!("perm {perm:?} for rank {rank}") })
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

fn permute_tensor<T: Scalar>(t: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let in_shape = t.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides_of(in_shape);
    let mapped: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut data = Vec::with_capacity(t.numel());
    let mut coords = vec![0usize; out_shape.len()];
    let mut offset = 0usize;
    for _ in 0..t.numel() {
        data.push(t.data()[offset]);
        for axis in (0..out_shape.len()).rev() {
            coords[axis] += 1;
            offset += mapped[axis];
            if coords[axis] < out_shape[axis] {
                break;
            }
            offset -= mapped[axis] * out_shape[axis];
            coords[axis] = 0;
        }
    }
    Tensor::new(out_shape, data).expect("permute preserves element count")
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn rope_rotate<T: Scalar>(data: &mut [T], dh: usize, positions: &[usize], base: f64, inverse: bool) {
    let half = dh / 2;
    for (row, &pos) in positions.iter().enumerate() {
        let slice = &mut data[row * dh..(row + 1) * dh];
        for j in 0..half {
            let theta = pos as f64 * base.powf(-2.0 * j as f64 / dh as f64);
            let (sin, cos) = if inverse { (-theta.sin(), theta.cos()) } else { (theta.sin(), theta.cos()) };
            let (s, c) = (T::from_f64(sin), T::from_f64(cos));
            let (x0, x1) = (slice[2 * j], slice[2 * j + 1]);
            slice[2 * j] = x0 * c - x1 * s;
            slice[2 * j + 1] = x0 * s + x1 * c;
        }
    }
}
