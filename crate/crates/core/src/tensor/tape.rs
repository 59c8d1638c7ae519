//! Reverse-mode tape.
//!
//! Every differentiable operation appends one node holding its forward value
//! and enough context for the vector-Jacobian product. `backward` walks the
//! nodes in exact reverse order of recording.

use super::kernels::{col2im, gemm, gemm_nt, im2col, MatRef};
use super::{numel, Scalar, Tensor};
use crate::{par, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var },
    Relu(Var),
    Sigmoid(Var),
    AvgPool { x: Var, k: usize },
    GlobalAvgPool(Var),
    Reshape(Var),
    RowDot(Var, Var),
    RowNorm(Var),
    SmoothL1(Var),
    BceWithLogits { logits: Var, targets: Var },
    BatchStandardize { x: Var, inv_std: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by leaf [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a tracked leaf; `None` for untracked values.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn axpy<T: Scalar>(dst: &mut [T], src: &[T], a: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Eight interleaved partial sums, combined in a fixed order.
pub(super) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

fn sum_f64<T: Scalar>(a: &[T]) -> f64 {
    a.iter().map(|v| v.as_f64()).sum()
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest `|input|` over every ReLU and smooth-L1 kink on the tape, or
    /// `None` without such nodes. Finite differences are only meaningful
    /// when this exceeds the probe step.
    pub fn kink_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(
                    self.value(a)
                        .iter()
                        .map(|v| v.as_f64().abs())
                        .fold(f64::INFINITY, f64::min),
                ),
                Op::SmoothL1(a) => Some(
                    self.value(a)
                        .iter()
                        .map(|v| (v.as_f64().abs() - 1.0).abs())
                        .fold(f64::INFINITY, f64::min),
                ),
                _ => None,
            })
            .reduce(f64::min)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        // Overflow to +-inf is possible for huge finite inputs; NaN is not.
        if cfg!(debug_assertions) && !matches!(op, Op::Leaf) && value.iter().any(|v| v.is_nan()) {
            let inputs_finite = self
                .op_inputs(&op)
                .iter()
                .all(|v| self.value(*v).iter().all(|x| x.is_finite()));
            assert!(!inputs_finite, "NaN output of {op:?} from finite inputs");
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn op_inputs(&self, op: &Op<T>) -> Vec<Var> {
        match *op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) | Op::RowDot(a, b) => {
                vec![a, b]
            }
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::GlobalAvgPool(a)
            | Op::Reshape(a)
            | Op::RowNorm(a)
            | Op::SmoothL1(a)
            | Op::AvgPool { x: a, .. }
            | Op::BatchStandardize { x: a, .. } => vec![a],
            Op::Linear { x, w, b } | Op::Conv2d { x, w, b } => vec![x, w, b],
            Op::BceWithLogits { logits, targets } => vec![logits, targets],
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a tensor; it receives a gradient iff it is tracked.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.is_tracked())
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn scalar(&self, v: Var) -> T {
        let n = &self.nodes[v.0];
        assert_eq!(n.value.len(), 1, "scalar() on shape {:?}", n.shape);
        n.value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("tape node is well-formed")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, node: Op<T>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, node, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, node: Op<T>) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), value, node, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Element-wise division; every divisor must be non-zero.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        if self.value(b).iter().any(|v| *v == T::zero()) {
            return Err(Error::invalid("div", "division by zero"));
        }
        self.zip_map("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// Smooth-L1 (Huber with transition at 1), element-wise.
    pub fn smooth_l1(&mut self, a: Var) -> Var {
        let half = T::from_f64(0.5);
        self.unary(
            a,
            |x| {
                let ax = x.abs();
                if ax < T::one() {
                    half * x * x
                } else {
                    ax - half
                }
            },
            Op::SmoothL1(a),
        )
    }

    /// Element-wise binary cross-entropy on logits. `targets` must be untracked.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Var) -> Result<Var> {
        self.same_shape("bce_with_logits", logits, targets)?;
        if self.requires_grad(targets) {
            return Err(Error::invalid("bce_with_logits", "targets must not require gradients"));
        }
        let value = self
            .value(logits)
            .iter()
            .zip(self.value(targets))
            .map(|(&x, &t)| x.max(T::zero()) - x * t + (T::one() + (-x.abs()).exp()).ln())
            .collect();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            self.shape(logits).to_vec(),
            value,
            Op::BceWithLogits { logits, targets },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = T::from_f64(sum_f64(self.value(a)));
        let rg = self.rg(&[a]);
        self.push(vec![], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = T::from_f64(sum_f64(v) / v.len() as f64);
        let rg = self.rg(&[a]);
        self.push(vec![], vec![s], Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let value = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a), rg))
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.is_empty() {
            return Err(Error::invalid("flatten", "cannot flatten a scalar"));
        }
        let n = s[0];
        let rest = numel(&s[1..]);
        self.reshape(a, &[n, rest])
    }

    /// `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![T::zero(); m * n];
        par::for_each_chunk_mut(&mut out, n, |i, row| {
            for kk in 0..k {
                axpy(row, &bv[kk * n..(kk + 1) * n], av[i * k + kk]);
            }
        });
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// Fully connected layer: `x [N, I]`, `w [O, I]`, `b [O]` -> `[N, O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::shape("linear", sx, sw));
        }
        if sb != [sw[0]] {
            return Err(Error::shape("linear(bias)", sw, sb));
        }
        let (n, i, o) = (sx[0], sx[1], sw[0]);
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let mut out = vec![T::zero(); n * o];
        par::for_each_chunk_mut(&mut out, o, |r, row| {
            let xr = &xv[r * i..(r + 1) * i];
            for (oo, y) in row.iter_mut().enumerate() {
                *y = bv[oo] + dot(xr, &wv[oo * i..(oo + 1) * i]);
            }
        });
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(vec![n, o], out, Op::Linear { x, w, b }, rg))
    }

    /// 2-D convolution, stride 1, zero padding `k / 2`:
    /// `x [N, C, H, W]`, `w [O, C, k, k]` (k odd), `b [O]` -> `[N, O, H, W]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] {
            return Err(Error::shape("conv2d", sx, sw));
        }
        if sw[2] != sw[3] || sw[2] % 2 == 0 {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel must be square with odd side, got {sw:?}"),
            ));
        }
        if sb != [sw[0]] {
            return Err(Error::shape("conv2d(bias)", sw, sb));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, k) = (sw[0], sw[2]);
        let plane = h * wd;
        let ck = c * k * k;
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let mut out = vec![T::zero(); n * o * plane];
        par::for_each_chunk_mut(&mut out, o * plane, |ni, out_n| {
            let x_n = &xv[ni * c * plane..(ni + 1) * c * plane];
            for (oi, row) in out_n.chunks_mut(plane).enumerate() {
                row.fill(bv[oi]);
            }
            let cols;
            let b_mat = if k == 1 {
                x_n
            } else {
                let mut buf = vec![T::zero(); ck * plane];
                im2col(x_n, c, h, wd, k, &mut buf);
                cols = buf;
                &cols
            };
            gemm(o, plane, ck, MatRef::rows(wv, ck), b_mat, out_n);
        });
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(vec![n, o, h, wd], out, Op::Conv2d { x, w, b }, rg))
    }

    /// Non-overlapping `k x k` average pooling; H and W must be multiples of k.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 || s[2] % k != 0 || s[3] % k != 0 {
            return Err(Error::invalid("avg_pool2d", format!("cannot pool shape {s:?} by {k}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / k, w / k);
        let xv = self.value(x);
        let inv = T::from_f64(1.0 / (k * k) as f64);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for nc in 0..n * c {
            let src = &xv[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
            for y in 0..h {
                let row = &src[y * w..(y + 1) * w];
                let drow = &mut dst[(y / k) * ow..(y / k + 1) * ow];
                for (xx, &v) in row.iter().enumerate() {
                    drow[xx / k] += v;
                }
            }
            dst.iter_mut().for_each(|v| *v = *v * inv);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![n, c, oh, ow], out, Op::AvgPool { x, k }, rg))
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::invalid("global_avg_pool", format!("expected rank 4, got {s:?}")));
        }
        let plane = s[2] * s[3];
        let out = self
            .value(x)
            .chunks(plane)
            .map(|p| T::from_f64(sum_f64(p) / plane as f64))
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![s[0], s[1]], out, Op::GlobalAvgPool(x), rg))
    }

    /// Row-wise inner product `[N, D] x [N, D] -> [N]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::invalid("row_dot", format!("expected rank 2, got {s:?}")));
        }
        let d = s[1];
        let out = self
            .value(a)
            .chunks(d)
            .zip(self.value(b).chunks(d))
            .map(|(x, y)| T::from_f64(x.iter().zip(y).map(|(p, q)| p.as_f64() * q.as_f64()).sum()))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![s[0]], out, Op::RowDot(a, b), rg))
    }

    /// Row-wise Euclidean norm `[N, D] -> [N]`.
    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::invalid("row_norm", format!("expected rank 2, got {s:?}")));
        }
        let out = self
            .value(a)
            .chunks(s[1])
            .map(|r| T::from_f64(r.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt()))
            .collect();
        let rg = self.rg(&[a]);
        Ok(self.push(vec![s[0]], out, Op::RowNorm(a), rg))
    }

    /// Per-feature standardisation over the batch, no affine:
    /// `y = (x - mean) / sqrt(var + eps)` column-wise on `[N, D]`, N >= 2.
    pub fn batch_standardize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] < 2 {
            return Err(Error::invalid(
                "batch_standardize",
                format!("expected [N >= 2, D], got {s:?}"),
            ));
        }
        let (n, d) = (s[0], s[1]);
        let xv = self.value(x);
        let mut mean = vec![0.0f64; d];
        for r in xv.chunks(d) {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v.as_f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0f64; d];
        for r in xv.chunks(d) {
            for ((acc, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *acc += (v.as_f64() - m).powi(2);
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v / n as f64 + eps).sqrt()).collect();
        let out = xv
            .chunks(d)
            .flat_map(|r| {
                r.iter()
                    .zip(&mean)
                    .zip(&inv_std)
                    .map(|((v, m), is)| T::from_f64((v.as_f64() - m) * is))
                    .collect::<Vec<_>>()
            })
            .collect();
        let inv_std = inv_std.into_iter().map(T::from_f64).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(s, out, Op::BatchStandardize { x, inv_std }, rg))
    }

    /// Populates gradients of `loss` with respect to every tracked leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if root.requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(vec![T::zero(); node.value.len()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let two = T::from_f64(2.0);
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.requires_grad(a) {
                    self.accumulate(grads, a, g.iter().zip(bv).map(|(&g, &y)| g * y).collect());
                }
                if self.requires_grad(b) {
                    self.accumulate(grads, b, g.iter().zip(av).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.requires_grad(a) {
                    self.accumulate(grads, a, g.iter().zip(bv).map(|(&g, &y)| g / y).collect());
                }
                if self.requires_grad(b) {
                    let c = g
                        .iter()
                        .zip(av)
                        .zip(bv)
                        .map(|((&g, &x), &y)| -g * x / (y * y))
                        .collect();
                    self.accumulate(grads, b, c);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, a, g.iter().map(|&x| x * c).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => self.accumulate(grads, a, g.to_vec()),
            Op::Square(a) => {
                let c = g.iter().zip(self.value(a)).map(|(&g, &x)| two * x * g).collect();
                self.accumulate(grads, a, c);
            }
            Op::Sum(a) => self.accumulate(grads, a, vec![g[0]; self.value(a).len()]),
            Op::Mean(a) => {
                let n = self.value(a).len();
                self.accumulate(grads, a, vec![g[0] / T::from_f64(n as f64); n]);
            }
            Op::Relu(a) => {
                let c = g
                    .iter()
                    .zip(self.value(a))
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, a, c);
            }
            Op::Sigmoid(a) => {
                let c = g
                    .iter()
                    .zip(&node.value)
                    .map(|(&g, &y)| g * y * (T::one() - y))
                    .collect();
                self.accumulate(grads, a, c);
            }
            Op::SmoothL1(a) => {
                let c = g
                    .iter()
                    .zip(self.value(a))
                    .map(|(&g, &x)| if x.abs() < T::one() { g * x } else { g * x.signum() })
                    .collect();
                self.accumulate(grads, a, c);
            }
            Op::BceWithLogits { logits, targets } => {
                let c = g
                    .iter()
                    .zip(self.value(logits))
                    .zip(self.value(targets))
                    .map(|((&g, &x), &t)| g * (sigmoid(x) - t))
                    .collect();
                self.accumulate(grads, logits, c);
            }
            Op::MatMul(a, b) => self.backprop_matmul(a, b, g, grads),
            Op::Linear { x, w, b } => self.backprop_linear(x, w, b, g, grads),
            Op::Conv2d { x, w, b } => self.backprop_conv(x, w, b, g, grads),
            Op::AvgPool { x, k } => {
                let s = self.shape(x);
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (h / k, w / k);
                let inv = T::from_f64(1.0 / (k * k) as f64);
                let mut dx = vec![T::zero(); self.value(x).len()];
                for (nc, dplane) in dx.chunks_mut(h * w).enumerate() {
                    let gp = &g[nc * oh * ow..(nc + 1) * oh * ow];
                    for y in 0..h {
                        let grow = &gp[(y / k) * ow..(y / k + 1) * ow];
                        for (xx, d) in dplane[y * w..(y + 1) * w].iter_mut().enumerate() {
                            *d = grow[xx / k] * inv;
                        }
                    }
                }
                self.accumulate(grads, x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(x);
                let plane = s[2] * s[3];
                let inv = T::from_f64(1.0 / plane as f64);
                let dx = g.iter().flat_map(|&gv| std::iter::repeat_n(gv * inv, plane)).collect();
                self.accumulate(grads, x, dx);
            }
            Op::RowDot(a, b) => {
                let d = self.shape(a)[1];
                let (av, bv) = (self.value(a), self.value(b));
                if self.requires_grad(a) {
                    let c = bv.iter().enumerate().map(|(j, &y)| g[j / d] * y).collect();
                    self.accumulate(grads, a, c);
                }
                if self.requires_grad(b) {
                    let c = av.iter().enumerate().map(|(j, &x)| g[j / d] * x).collect();
                    self.accumulate(grads, b, c);
                }
            }
            Op::RowNorm(a) => {
                let d = self.shape(a)[1];
                let c = self
                    .value(a)
                    .iter()
                    .enumerate()
                    .map(|(j, &x)| {
                        let nrm = node.value[j / d];
                        if nrm > T::zero() {
                            g[j / d] * x / nrm
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accumulate(grads, a, c);
            }
            Op::BatchStandardize { x, ref inv_std } => {
                let s = self.shape(x);
                let (n, d) = (s[0], s[1]);
                let y = &node.value;
                let mut mean_g = vec![0.0f64; d];
                let mut mean_gy = vec![0.0f64; d];
                for r in 0..n {
                    for j in 0..d {
                        let gv = g[r * d + j].as_f64();
                        mean_g[j] += gv;
                        mean_gy[j] += gv * y[r * d + j].as_f64();
                    }
                }
                let inv_n = 1.0 / n as f64;
                let mut dx = vec![T::zero(); n * d];
                for r in 0..n {
                    for j in 0..d {
                        let idx = r * d + j;
                        let v = inv_std[j].as_f64()
                            * (g[idx].as_f64() - mean_g[j] * inv_n - y[idx].as_f64() * mean_gy[j] * inv_n);
                        dx[idx] = T::from_f64(v);
                    }
                }
                self.accumulate(grads, x, dx);
            }
        }
    }

    fn backprop_matmul(&self, a: Var, b: Var, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let n = self.shape(b)[1];
        let (av, bv) = (self.value(a), self.value(b));
        if self.requires_grad(a) {
            let mut da = vec![T::zero(); m * k];
            par::for_each_chunk_mut(&mut da, k, |i, row| {
                let gi = &g[i * n..(i + 1) * n];
                for (kk, d) in row.iter_mut().enumerate() {
                    *d = dot(gi, &bv[kk * n..(kk + 1) * n]);
                }
            });
            self.accumulate(grads, a, da);
        }
        if self.requires_grad(b) {
            let mut db = vec![T::zero(); k * n];
            for i in 0..m {
                let gi = &g[i * n..(i + 1) * n];
                for kk in 0..k {
                    axpy(&mut db[kk * n..(kk + 1) * n], gi, av[i * k + kk]);
                }
            }
            self.accumulate(grads, b, db);
        }
    }

    fn backprop_linear(&self, x: Var, w: Var, b: Var, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (n, i) = (self.shape(x)[0], self.shape(x)[1]);
        let o = self.shape(w)[0];
        let (xv, wv) = (self.value(x), self.value(w));
        if self.requires_grad(x) {
            let mut dx = vec![T::zero(); n * i];
            par::for_each_chunk_mut(&mut dx, i, |r, row| {
                for oo in 0..o {
                    axpy(row, &wv[oo * i..(oo + 1) * i], g[r * o + oo]);
                }
            });
            self.accumulate(grads, x, dx);
        }
        if self.requires_grad(w) {
            let mut dw = vec![T::zero(); o * i];
            par::for_each_chunk_mut(&mut dw, i, |oo, row| {
                for r in 0..n {
                    axpy(row, &xv[r * i..(r + 1) * i], g[r * o + oo]);
                }
            });
            self.accumulate(grads, w, dw);
        }
        if self.requires_grad(b) {
            let db = (0..o)
                .map(|oo| T::from_f64((0..n).map(|r| g[r * o + oo].as_f64()).sum()))
                .collect();
            self.accumulate(grads, b, db);
        }
    }

    fn backprop_conv(&self, x: Var, w: Var, b: Var, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let sx = self.shape(x);
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let sw = self.shape(w);
        let (o, k) = (sw[0], sw[2]);
        let plane = h * wd;
        let ck = c * k * k;
        let (xv, wv) = (self.value(x), self.value(w));

        if self.requires_grad(x) {
            let mut dx = vec![T::zero(); n * c * plane];
            par::for_each_chunk_mut(&mut dx, c * plane, |ni, dx_n| {
                let g_n = &g[ni * o * plane..(ni + 1) * o * plane];
                if k == 1 {
                    gemm(c, plane, o, MatRef::transposed(wv, ck), g_n, dx_n);
                } else {
                    let mut dcols = vec![T::zero(); ck * plane];
                    gemm(ck, plane, o, MatRef::transposed(wv, ck), g_n, &mut dcols);
                    col2im(&dcols, c, h, wd, k, dx_n);
                }
            });
            self.accumulate(grads, x, dx);
        }

        if self.requires_grad(w) {
            // Per-sample partials, summed in sample order for reproducibility.
            let per_sample = par::map_range(n, |ni| {
                let g_n = &g[ni * o * plane..(ni + 1) * o * plane];
                let x_n = &xv[ni * c * plane..(ni + 1) * c * plane];
                let mut dw = vec![T::zero(); o * ck];
                if k == 1 {
                    gemm_nt(o, ck, plane, g_n, x_n, &mut dw);
                } else {
                    let mut cols = vec![T::zero(); ck * plane];
                    im2col(x_n, c, h, wd, k, &mut cols);
                    gemm_nt(o, ck, plane, g_n, &cols, &mut dw);
                }
                dw
            });
            let mut dw = vec![T::zero(); o * ck];
            for part in per_sample {
                dw.iter_mut().zip(part).for_each(|(a, b)| *a += b);
            }
            self.accumulate(grads, w, dw);
        }

        if self.requires_grad(b) {
            let db = (0..o)
                .map(|oi| {
                    let s: f64 = (0..n)
                        .map(|ni| sum_f64(&g[(ni * o + oi) * plane..(ni * o + oi + 1) * plane]))
                        .sum();
                    T::from_f64(s)
                })
                .collect();
            self.accumulate(grads, b, db);
        }
    }
}
