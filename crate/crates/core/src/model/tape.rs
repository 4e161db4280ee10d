//! Row-major matrices and a reverse-mode tape over them.
//!
//! Every value is a matrix; vectors are `1 × n`. Ops record what their
//! backward pass needs when they are applied, and [`Tape::backward`] walks
//! the nodes once in reverse.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;
use core::iter::Sum;
use core::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

/// Element type of the tape: `f32` for training, `f64` for gradient checks.
///
/// Transcendental functions go through `libm` so results do not depend on
/// which platform math library a build links.
pub trait Scalar:
    Copy
    + PartialOrd
    + Debug
    + Default
    + Sum
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
{
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
    fn zero() -> Self;
    fn one() -> Self;
    fn neg_infinity() -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn max(self, other: Self) -> Self;
    fn min(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
}

macro_rules! scalar {
    ($t:ty, $exp:path, $ln:path, $sqrt:path, $tanh:path, $abs:path) => {
        impl Scalar for $t {
            fn of(x: f64) -> Self {
                x as $t
            }
            fn f64(self) -> f64 {
                self as f64
            }
            fn zero() -> Self {
                0.0
            }
            fn one() -> Self {
                1.0
            }
            fn neg_infinity() -> Self {
                <$t>::NEG_INFINITY
            }
            fn exp(self) -> Self {
                $exp(self)
            }
            fn ln(self) -> Self {
                $ln(self)
            }
            fn sqrt(self) -> Self {
                $sqrt(self)
            }
            fn tanh(self) -> Self {
                $tanh(self)
            }
            fn abs(self) -> Self {
                $abs(self)
            }
            fn max(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            fn min(self, other: Self) -> Self {
                <$t>::min(self, other)
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}

scalar!(f32, libm::expf, libm::logf, libm::sqrtf, libm::tanhf, libm::fabsf);
scalar!(f64, libm::exp, libm::log, libm::sqrt, libm::tanh, libm::fabs);

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data does not match {rows}x{cols}");
        Self { rows, cols, data }
    }

    pub fn scalar(value: S) -> Self {
        Self::from_vec(1, 1, vec![value])
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> S {
        self.data[i * self.cols + j]
    }

    pub fn item(&self) -> S {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| T::of(x.f64())).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn add_assign(&mut self, other: &[S]) {
        for (a, &b) in self.data.iter_mut().zip(other) {
            *a = *a + b;
        }
    }
}

/// `out += a · b` with `a: m×k`, `b: k×n`.
fn matmul_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            for (o, &bv) in out_row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out += a · bᵀ` with `a: m×k`, `b: n×k`.
fn matmul_bt_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            let dot = ar.iter().zip(br).fold(S::zero(), |s, (&x, &y)| s + x * y);
            out[i * n + j] = out[i * n + j] + dot;
        }
    }
}

/// `out += aᵀ · b` with `a: m×k`, `b: m×n`.
fn matmul_at_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let br = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            for (o, &bv) in out[p * n..(p + 1) * n].iter_mut().zip(br) {
                *o = *o + av * bv;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-5;
const L2_EPS: f64 = 1e-8;

fn gelu<S: Scalar>(x: S) -> S {
    let u = S::of(GELU_C) * (x + S::of(GELU_A) * x * x * x);
    S::of(0.5) * x * (S::one() + u.tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let u = S::of(GELU_C) * (x + S::of(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = S::of(GELU_C) * (S::one() + S::of(3.0 * GELU_A) * x * x);
    S::of(0.5) * (S::one() + t) + S::of(0.5) * x * (S::one() - t * t) * du
}

fn softmax_row<S: Scalar>(x: &[S], out: &mut [S]) {
    let max = x.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
    let mut sum = S::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum = sum + *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    Gelu(Var),
    Exp(Var),
    Ln(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, rstd: Vec<S> },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Conv1d { x: Var, w: Var, b: Var, kernel: usize, stride: usize },
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    MaskRows { x: Var, emb: Var, mask: Vec<bool> },
    L2NormRows { x: Var, norms: Vec<S> },
    RowSum(Var),
    Reshape(Var),
    PickCols(Var, Vec<usize>),
    Sum(Var),
    MeanRows(Var),
    Gumbel { x: Var, soft: Vec<S>, tau: S },
    Custom(Var, Tensor<S>),
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients of one scalar with respect to every node that needs one.
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        assert_eq!(k, k2, "matmul inner dimensions");
        let mut out = Tensor::zeros(m, n);
        matmul_acc(&self.value(a).data, &self.value(b).data, &mut out.data, m, k, n);
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let ((m, k), (n, k2)) = (self.shape(a), self.shape(b));
        assert_eq!(k, k2, "matmul_t inner dimensions");
        let mut out = Tensor::zeros(m, n);
        matmul_bt_acc(&self.value(a).data, &self.value(b).data, &mut out.data, m, k, n);
        self.push(out, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let mut out = self.value(a).clone();
        out.add_assign(&self.value(b).data);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "add_row shapes");
        let mut out = self.value(a).clone();
        let r = &self.nodes[row.0].value.data;
        for chunk in out.data.chunks_exact_mut(n) {
            for (o, &b) in chunk.iter_mut().zip(r) {
                *o = *o + b;
            }
        }
        self.push(out, Op::AddRow(a, row), &[a, row])
    }

    /// `x · w + b` for a weight `in × out` and bias `1 × out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shapes");
        let mut out = self.value(a).clone();
        for (o, &y) in out.data.iter_mut().zip(&self.nodes[b.0].value.data) {
            *o = *o * y;
        }
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x = *x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: S) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x = *x + s);
        self.push(out, Op::AddScalar(a), &[a])
    }

    fn map(&mut self, a: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x = f(*x));
        self.push(out, op, &[a])
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, gelu, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, S::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.map(a, S::ln, Op::Ln(a))
    }

    /// Normalizes each row, then applies `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (m, n) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, n));
        assert_eq!(self.shape(beta), (1, n));
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gamma.0].value.data;
        let b = &self.nodes[beta.0].value.data;
        let mut xhat = vec![S::zero(); m * n];
        let mut rstd = vec![S::zero(); m];
        let mut out = Tensor::zeros(m, n);
        let inv_n = S::of(1.0 / n as f64);
        for i in 0..m {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<S>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_n;
            let r = S::one() / (var + S::of(LAYER_NORM_EPS)).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out.data[i * n + j] = h * g[j] + b[j];
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            softmax_row(self.nodes[a.0].value.row(i), out.row_mut(i));
        }
        self.push(out, Op::SoftmaxRows(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let mut out = self.value(a).clone();
        for i in 0..m {
            let row = out.row_mut(i);
            let max = row.iter().fold(S::neg_infinity(), |acc, &v| acc.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
            row.iter_mut().for_each(|v| *v = *v - lse);
        }
        let _ = n;
        self.push(out, Op::LogSoftmaxRows(a), &[a])
    }

    /// Strided 1-D convolution over time-major input `L × C_in` with weight
    /// `(kernel · C_in) × C_out` and bias `1 × C_out`. Output has
    /// `⌊(L − kernel) / stride⌋ + 1` rows.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, kernel: usize, stride: usize) -> Var {
        let ((len, cin), (wk, cout)) = (self.shape(x), self.shape(w));
        assert_eq!(wk, kernel * cin, "conv weight rows");
        assert_eq!(self.shape(b), (1, cout), "conv bias");
        assert!(len >= kernel, "conv input shorter than kernel");
        let frames = (len - kernel) / stride + 1;
        let mut out = Tensor::zeros(frames, cout);
        let xd = &self.nodes[x.0].value.data;
        let wd = &self.nodes[w.0].value.data;
        let bd = &self.nodes[b.0].value.data;
        for t in 0..frames {
            let window = &xd[t * stride * cin..(t * stride + kernel) * cin];
            let row = &mut out.data[t * cout..(t + 1) * cout];
            row.copy_from_slice(bd);
            matmul_acc(window, wd, row, 1, kernel * cin, cout);
        }
        self.push(out, Op::Conv1d { x, w, b, kernel, stride }, &[x, w, b])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let (m, n) = self.shape(a);
        assert!(start + width <= n);
        let src = self.value(a);
        let data = (0..m).flat_map(|i| src.row(i)[start..start + width].iter().copied()).collect();
        self.push(Tensor::from_vec(m, width, data), Op::SliceCols(a, start), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Var {
        let (m, n) = self.shape(a);
        assert!(start + count <= m);
        let data = self.value(a).data[start * n..(start + count) * n].to_vec();
        self.push(Tensor::from_vec(count, n, data), Op::SliceRows(a, start), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let m = self.shape(parts[0]).0;
        assert!(parts.iter().all(|&p| self.shape(p).0 == m));
        let n: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push(Tensor::from_vec(m, n, data), Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let n = self.shape(a).1;
        let src = self.value(a);
        let data = indices.iter().flat_map(|&i| src.row(i).iter().copied()).collect();
        self.push(Tensor::from_vec(indices.len(), n, data), Op::GatherRows(a, indices.to_vec()), &[a])
    }

    /// Replaces rows where `mask` is set by the `1 × n` embedding.
    pub fn mask_rows(&mut self, x: Var, emb: Var, mask: &[bool]) -> Var {
        let (m, n) = self.shape(x);
        assert_eq!(mask.len(), m);
        assert_eq!(self.shape(emb), (1, n));
        let mut out = self.value(x).clone();
        let e = self.nodes[emb.0].value.data.clone();
        for (i, _) in mask.iter().enumerate().filter(|(_, &on)| on) {
            out.row_mut(i).copy_from_slice(&e);
        }
        self.push(out, Op::MaskRows { x, emb, mask: mask.to_vec() }, &[x, emb])
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let (m, _) = self.shape(x);
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(m);
        for i in 0..m {
            let row = out.row_mut(i);
            let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt().max(S::of(L2_EPS));
            row.iter_mut().for_each(|v| *v = *v / norm);
            norms.push(norm);
        }
        self.push(out, Op::L2NormRows { x, norms }, &[x])
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let (m, _) = self.shape(a);
        let src = self.value(a);
        let data = (0..m).map(|i| src.row(i).iter().copied().sum()).collect();
        self.push(Tensor::from_vec(m, 1, data), Op::RowSum(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let data = self.value(a).data.clone();
        self.push(Tensor::from_vec(rows, cols, data), Op::Reshape(a), &[a])
    }

    /// `out[i] = a[i, cols[i]]` as an `m × 1` column.
    pub fn pick_cols(&mut self, a: Var, cols: &[usize]) -> Var {
        let src = self.value(a);
        let data = cols.iter().enumerate().map(|(i, &j)| src.get(i, j)).collect();
        self.push(Tensor::from_vec(cols.len(), 1, data), Op::PickCols(a, cols.to_vec()), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).data.len();
        let s = self.sum(a);
        self.scale(s, S::of(1.0 / n as f64))
    }

    /// Column means as a `1 × n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let mut out = Tensor::zeros(1, n);
        for i in 0..m {
            out.add_assign(self.nodes[a.0].value.row(i));
        }
        out.data.iter_mut().for_each(|v| *v = *v / S::of(m as f64));
        self.push(out, Op::MeanRows(a), &[a])
    }

    /// Gumbel-softmax over each row with the given noise. With `hard` the
    /// value is the one-hot argmax and the gradient is that of the soft
    /// sample (straight-through).
    pub fn gumbel_softmax(&mut self, x: Var, noise: &Tensor<S>, tau: S, hard: bool) -> Var {
        let (m, n) = self.shape(x);
        assert_eq!(noise.shape(), (m, n));
        let mut perturbed = self.value(x).clone();
        for (p, &g) in perturbed.data.iter_mut().zip(&noise.data) {
            *p = (*p + g) / tau;
        }
        let mut soft = vec![S::zero(); m * n];
        for i in 0..m {
            softmax_row(perturbed.row(i), &mut soft[i * n..(i + 1) * n]);
        }
        let out = if hard {
            let mut onehot = Tensor::zeros(m, n);
            for i in 0..m {
                let row = &soft[i * n..(i + 1) * n];
                let best = (0..n).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                onehot.data[i * n + best] = S::one();
            }
            onehot
        } else {
            Tensor::from_vec(m, n, soft.clone())
        };
        self.push(out, Op::Gumbel { x, soft, tau }, &[x])
    }

    /// A `1 × 1` node whose value is computed elsewhere and whose gradient
    /// with respect to `input` is `grad`.
    pub fn custom_loss(&mut self, input: Var, value: S, grad: Tensor<S>) -> Var {
        assert_eq!(self.shape(input), grad.shape());
        self.push(Tensor::scalar(value), Op::Custom(input, grad), &[input])
    }

    /// Gradients of the `1 × 1` node `output` with respect to all nodes.
    pub fn backward(&self, output: Var) -> Gradients<S> {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(S::one()));
        for id in (0..=output.0).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.propagate(node, &dy, &mut grads);
            }
            grads[id] = Some(dy);
        }
        Gradients { grads }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor<S>>], v: Var) -> Option<&'g mut Tensor<S>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let (m, n) = self.shape(v);
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(m, n)))
    }

    fn propagate(&self, node: &Node<S>, dy: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ((m, k), (_, n)) = (self.shape(*a), self.shape(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    matmul_bt_acc(&dy.data, &self.value(*b).data, &mut ga.data, m, n, k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    matmul_at_acc(&self.value(*a).data, &dy.data, &mut gb.data, m, k, n);
                }
            }
            Op::MatMulT(a, b) => {
                let ((m, k), (n, _)) = (self.shape(*a), self.shape(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    matmul_acc(&dy.data, &self.value(*b).data, &mut ga.data, m, n, k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    matmul_at_acc(&dy.data, &self.value(*a).data, &mut gb.data, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(g) = self.slot(grads, *v) {
                        g.add_assign(&dy.data);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(g) = self.slot(grads, *a) {
                    g.add_assign(&dy.data);
                }
                if let Some(g) = self.slot(grads, *row) {
                    for chunk in dy.data.chunks_exact(dy.cols) {
                        g.add_assign(chunk);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(a, b), (b, a)] {
                    let o = &self.nodes[other.0].value.data;
                    if let Some(g) = self.slot(grads, *v) {
                        for ((gv, &d), &ov) in g.data.iter_mut().zip(&dy.data).zip(o) {
                            *gv = *gv + d * ov;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(g) = self.slot(grads, *a) {
                    for (gv, &d) in g.data.iter_mut().zip(&dy.data) {
                        *gv = *gv + d * *s;
                    }
                }
            }
            Op::AddScalar(a) => {
                if let Some(g) = self.slot(grads, *a) {
                    g.add_assign(&dy.data);
                }
            }
            Op::Gelu(a) | Op::Exp(a) | Op::Ln(a) => {
                let x = &self.nodes[a.0].value.data;
                if let Some(g) = self.slot(grads, *a) {
                    for i in 0..x.len() {
                        let local = match &node.op {
                            Op::Gelu(_) => gelu_grad(x[i]),
                            Op::Exp(_) => y.data[i],
                            _ => S::one() / x[i],
                        };
                        g.data[i] = g.data[i] + dy.data[i] * local;
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (m, n) = self.shape(*x);
                let gv = &self.nodes[gamma.0].value.data;
                if let Some(g) = self.slot(grads, *gamma) {
                    for (i, &d) in dy.data.iter().enumerate() {
                        g.data[i % n] = g.data[i % n] + d * xhat[i];
                    }
                }
                if let Some(g) = self.slot(grads, *beta) {
                    for chunk in dy.data.chunks_exact(n) {
                        g.add_assign(chunk);
                    }
                }
                if let Some(g) = self.slot(grads, *x) {
                    let inv_n = S::of(1.0 / n as f64);
                    let mut dxhat = vec![S::zero(); n];
                    for i in 0..m {
                        let (mut s1, mut s2) = (S::zero(), S::zero());
                        for j in 0..n {
                            let d = dy.data[i * n + j] * gv[j];
                            dxhat[j] = d;
                            s1 = s1 + d;
                            s2 = s2 + d * xhat[i * n + j];
                        }
                        for j in 0..n {
                            let v = rstd[i] * (dxhat[j] - s1 * inv_n - xhat[i * n + j] * s2 * inv_n);
                            g.data[i * n + j] = g.data[i * n + j] + v;
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if let Some(g) = self.slot(grads, *a) {
                    for i in 0..y.rows {
                        let (yr, dr) = (y.row(i), dy.row(i));
                        let dot: S = yr.iter().zip(dr).map(|(&p, &d)| p * d).sum();
                        for (j, gv) in g.row_mut(i).iter_mut().enumerate() {
                            *gv = *gv + yr[j] * (dr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                if let Some(g) = self.slot(grads, *a) {
                    for i in 0..y.rows {
                        let (yr, dr) = (y.row(i), dy.row(i));
                        let total: S = dr.iter().copied().sum();
                        for (j, gv) in g.row_mut(i).iter_mut().enumerate() {
                            *gv = *gv + dr[j] - yr[j].exp() * total;
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b, kernel, stride } => {
                let ((_, cin), (_, cout)) = (self.shape(*x), self.shape(*w));
                let span = kernel * cin;
                if let Some(g) = self.slot(grads, *b) {
                    for chunk in dy.data.chunks_exact(cout) {
                        g.add_assign(chunk);
                    }
                }
                let xd = &self.nodes[x.0].value.data;
                if let Some(g) = self.slot(grads, *w) {
                    for t in 0..y.rows {
                        let window = &xd[t * stride * cin..t * stride * cin + span];
                        matmul_at_acc(window, dy.row(t), &mut g.data, 1, span, cout);
                    }
                }
                let wd = &self.nodes[w.0].value.data;
                if let Some(g) = self.slot(grads, *x) {
                    for t in 0..y.rows {
                        let start = t * stride * cin;
                        matmul_bt_acc(dy.row(t), wd, &mut g.data[start..start + span], 1, cout, span);
                    }
                }
            }
            Op::SliceCols(a, start) => {
                if let Some(g) = self.slot(grads, *a) {
                    for i in 0..y.rows {
                        let dst = &mut g.row_mut(i)[*start..*start + y.cols];
                        for (gv, &d) in dst.iter_mut().zip(dy.row(i)) {
                            *gv = *gv + d;
                        }
                    }
                }
            }
            Op::SliceRows(a, start) => {
                if let Some(g) = self.slot(grads, *a) {
                    let offset = start * y.cols;
                    for (gv, &d) in g.data[offset..offset + dy.data.len()].iter_mut().zip(&dy.data) {
                        *gv = *gv + d;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let width = self.shape(*p).1;
                    if let Some(g) = self.slot(grads, *p) {
                        for i in 0..y.rows {
                            for (gv, &d) in g.row_mut(i).iter_mut().zip(&dy.row(i)[offset..offset + width]) {
                                *gv = *gv + d;
                            }
                        }
                    }
                    offset += width;
                }
            }
            Op::GatherRows(a, indices) => {
                if let Some(g) = self.slot(grads, *a) {
                    for (r, &i) in indices.iter().enumerate() {
                        for (gv, &d) in g.row_mut(i).iter_mut().zip(dy.row(r)) {
                            *gv = *gv + d;
                        }
                    }
                }
            }
            Op::MaskRows { x, emb, mask } => {
                if let Some(g) = self.slot(grads, *x) {
                    for (i, _) in mask.iter().enumerate().filter(|(_, &on)| !on) {
                        for (gv, &d) in g.row_mut(i).iter_mut().zip(dy.row(i)) {
                            *gv = *gv + d;
                        }
                    }
                }
                if let Some(g) = self.slot(grads, *emb) {
                    for (i, _) in mask.iter().enumerate().filter(|(_, &on)| on) {
                        g.add_assign(dy.row(i));
                    }
                }
            }
            Op::L2NormRows { x, norms } => {
                if let Some(g) = self.slot(grads, *x) {
                    for i in 0..y.rows {
                        let (yr, dr) = (y.row(i), dy.row(i));
                        let dot: S = yr.iter().zip(dr).map(|(&p, &d)| p * d).sum();
                        for (j, gv) in g.row_mut(i).iter_mut().enumerate() {
                            *gv = *gv + (dr[j] - yr[j] * dot) / norms[i];
                        }
                    }
                }
            }
            Op::RowSum(a) => {
                if let Some(g) = self.slot(grads, *a) {
                    for i in 0..g.rows {
                        let d = dy.data[i];
                        g.row_mut(i).iter_mut().for_each(|gv| *gv = *gv + d);
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(g) = self.slot(grads, *a) {
                    g.add_assign(&dy.data);
                }
            }
            Op::PickCols(a, cols) => {
                if let Some(g) = self.slot(grads, *a) {
                    let n = g.cols;
                    for (i, &j) in cols.iter().enumerate() {
                        g.data[i * n + j] = g.data[i * n + j] + dy.data[i];
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(g) = self.slot(grads, *a) {
                    let d = dy.item();
                    g.data.iter_mut().for_each(|gv| *gv = *gv + d);
                }
            }
            Op::MeanRows(a) => {
                if let Some(g) = self.slot(grads, *a) {
                    let scale = S::one() / S::of(g.rows as f64);
                    for i in 0..g.rows {
                        for (gv, &d) in g.row_mut(i).iter_mut().zip(&dy.data) {
                            *gv = *gv + d * scale;
                        }
                    }
                }
            }
            Op::Gumbel { x, soft, tau } => {
                if let Some(g) = self.slot(grads, *x) {
                    let n = g.cols;
                    for i in 0..g.rows {
                        let (sr, dr) = (&soft[i * n..(i + 1) * n], dy.row(i));
                        let dot: S = sr.iter().zip(dr).map(|(&p, &d)| p * d).sum();
                        for (j, gv) in g.row_mut(i).iter_mut().enumerate() {
                            *gv = *gv + sr[j] * (dr[j] - dot) / *tau;
                        }
                    }
                }
            }
            Op::Custom(a, local) => {
                if let Some(g) = self.slot(grads, *a) {
                    let d = dy.item();
                    for (gv, &l) in g.data.iter_mut().zip(&local.data) {
                        *gv = *gv + d * l;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Checks d f / d input against central differences for every element.
    fn check(inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out);
        let eval = |ins: &[Tensor<f64>]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone(), true)).collect();
            let o = f(&mut t, &vs);
            t.value(o).item()
        };
        let h = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            for i in 0..input.data.len() {
                let mut plus = inputs.to_vec();
                plus[k].data[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data[i] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let analytic = grads.get(vars[k]).map_or(0.0, |g| g.data[i]);
                let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-3);
                assert!(err < 1e-6, "input {k} element {i}: numeric {numeric} analytic {analytic}");
            }
        }
    }

    /// Reduces a matrix to a scalar with fixed random weights so that every
    /// output element gets a distinct upstream gradient.
    fn project(tape: &mut Tape<f64>, v: Var, seed: u64) -> Var {
        let (m, n) = tape.value(v).shape();
        let w = random(&mut ChaCha8Rng::seed_from_u64(seed), m, n);
        let w = tape.constant(w);
        let p = tape.mul(v, w);
        tape.sum(p)
    }

    #[test]
    fn matmul_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b, c) = (random(&mut rng, 3, 4), random(&mut rng, 4, 2), random(&mut rng, 5, 4));
        check(&[a.clone(), b], |t, v| {
            let y = t.matmul(v[0], v[1]);
            project(t, y, 9)
        });
        check(&[a, c], |t, v| {
            let y = t.matmul_t(v[0], v[1]);
            project(t, y, 9)
        });
    }

    #[test]
    fn elementwise_and_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b, r) = (random(&mut rng, 3, 4), random(&mut rng, 3, 4), random(&mut rng, 1, 4));
        check(&[a.clone(), b.clone(), r.clone()], |t, v| {
            let x = t.add(v[0], v[1]);
            let x = t.add_row(x, v[2]);
            let x = t.mul(x, v[0]);
            let x = t.scale(x, 0.7);
            let x = t.add_scalar(x, 0.3);
            let x = t.gelu(x);
            let x = t.exp(x);
            let x = t.add_scalar(x, 1.0);
            let x = t.ln(x);
            project(t, x, 3)
        });
        check(&[a, r.clone(), b.cast()], |t, v| {
            let x = t.layer_norm(v[0], v[1], v[1]);
            let s = t.softmax_rows(x);
            let l = t.log_softmax_rows(v[2]);
            let m = t.mean_rows(s);
            let n = t.l2_normalize_rows(l);
            let a = project(t, m, 4);
            let b = project(t, n, 5);
            t.add(a, b)
        });
    }

    #[test]
    fn structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, e) = (random(&mut rng, 4, 6), random(&mut rng, 1, 6));
        check(&[a, e], |t, v| {
            let l = t.slice_cols(v[0], 1, 3);
            let r = t.slice_cols(v[0], 3, 3);
            let rows = t.slice_rows(v[0], 1, 2);
            let x = t.concat_cols(&[l, r]);
            let x = t.mask_rows(x, v[1], &[true, false, false, true]);
            let x = t.gather_rows(x, &[3, 0, 0, 2]);
            let s = t.row_sum(x);
            let s = t.reshape(s, 2, 2);
            let p = t.pick_cols(s, &[1, 0]);
            let a = project(t, p, 6);
            let b = project(t, rows, 7);
            let c = t.add(a, b);
            let m = t.mean(x);
            t.add(c, m)
        });
    }

    #[test]
    fn convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (x, w, b) = (random(&mut rng, 11, 2), random(&mut rng, 6, 3), random(&mut rng, 1, 3));
        check(&[x, w, b], |t, v| {
            let y = t.conv1d(v[0], v[1], v[2], 3, 2);
            assert_eq!(t.value(y).shape(), (5, 3));
            project(t, y, 8)
        });
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (x, w, b) = (random(&mut rng, 9, 2), random(&mut rng, 4, 3), random(&mut rng, 1, 3));
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
        let y = t.conv1d(xv, wv, bv, 2, 3);
        let y = t.value(y);
        assert_eq!(y.shape(), (3, 3));
        for frame in 0..3 {
            for o in 0..3 {
                let mut s = b.data[o];
                for j in 0..2 {
                    for c in 0..2 {
                        s += x.get(frame * 3 + j, c) * w.get(j * 2 + c, o);
                    }
                }
                assert!((y.get(frame, o) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gumbel_soft_and_hard() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (x, noise) = (random(&mut rng, 3, 4), random(&mut rng, 3, 4));
        let n2 = noise.clone();
        check(&[x.clone()], move |t, v| {
            let y = t.gumbel_softmax(v[0], &n2, 0.7, false);
            project(t, y, 10)
        });
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let y = t.gumbel_softmax(xv, &noise, 1e-3, true);
        for i in 0..3 {
            let row: Vec<f64> = (0..4).map(|j| x.get(i, j) + noise.get(i, j)).collect();
            let best = (0..4).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            assert_eq!(t.value(y).row(i).iter().sum::<f64>(), 1.0);
            assert_eq!(t.value(y).get(i, best), 1.0);
        }
    }

    #[test]
    fn custom_loss_routes_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(1, 2, vec![1.0, 2.0]), true);
        let s = t.scale(x, 3.0);
        let l = t.custom_loss(s, 5.0, Tensor::from_vec(1, 2, vec![0.5, -1.0]));
        let g = t.backward(l);
        assert_eq!(g.get(x).unwrap().data, [1.5, -3.0]);
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::scalar(2.0), false);
        let b = t.leaf(Tensor::scalar(3.0), true);
        let y = t.mul(a, b);
        let g = t.backward(y);
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap().item(), 2.0);
    }
}
