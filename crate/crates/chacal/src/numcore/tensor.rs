//! Dense row-major tensors and the forward kernels of the model.
//!
//! Compute is generic over the element type: `f32` for training and
//! inference, `f64` when checking gradients against finite differences.
//! Kernels are plain functions over `Tensor`; the autodiff tape wraps them
//! and adds the backward rules, and the incremental decoder calls them
//! directly, so both paths run the exact same arithmetic.

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Additive mask value standing in for -inf. A finite sentinel keeps the
/// stabilized softmax free of NaNs while still flushing masked entries to
/// exactly zero probability.
pub const MASK_SENTINEL: f64 = -1e9;

/// Scalar element of a tensor: `f32` or `f64`.
pub trait Real:
    Copy
    + PartialOrd
    + PartialEq
    + fmt::Debug
    + fmt::Display
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
{
    const ZERO: Self;
    const ONE: Self;
    /// Name stored in checkpoint headers.
    const DTYPE: &'static str;
    /// Bytes per element on disk (little-endian).
    const BYTE_WIDTH: usize;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE: &'static str = "f32";
    const BYTE_WIDTH: usize = 4;

    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn exp(self) -> Self {
        self.exp()
    }
    #[inline(always)]
    fn ln(self) -> Self {
        self.ln()
    }
    #[inline(always)]
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    #[inline(always)]
    fn tanh(self) -> Self {
        self.tanh()
    }
    #[inline(always)]
    fn abs(self) -> Self {
        self.abs()
    }
    #[inline(always)]
    fn maximum(self, other: Self) -> Self {
        self.max(other)
    }
    #[inline(always)]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE: &'static str = "f64";
    const BYTE_WIDTH: usize = 8;

    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn exp(self) -> Self {
        self.exp()
    }
    #[inline(always)]
    fn ln(self) -> Self {
        self.ln()
    }
    #[inline(always)]
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    #[inline(always)]
    fn tanh(self) -> Self {
        self.tanh()
    }
    #[inline(always)]
    fn abs(self) -> Self {
        self.abs()
    }
    #[inline(always)]
    fn maximum(self, other: Self) -> Self {
        self.max(other)
    }
    #[inline(always)]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Errors raised by tensor construction and kernels.
#[derive(Debug, Clone, PartialEq)]
pub enum NumError {
    /// Operand shapes incompatible for the named operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A single shape is unusable for the named operation.
    InvalidShape { op: &'static str, detail: String },
    /// Triangular solve hit a zero (or sub-tolerance) diagonal entry.
    SingularSystem { row: usize },
    /// Softmax row with every entry masked out.
    FullyMaskedRow { row: usize },
    /// Lookup index out of range.
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
}

impl fmt::Display for NumError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NumError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch {lhs:?} vs {rhs:?}")
            }
            NumError::InvalidShape { op, detail } => write!(f, "{op}: invalid shape: {detail}"),
            NumError::SingularSystem { row } => {
                write!(f, "triangular solve: zero diagonal at row {row}")
            }
            NumError::FullyMaskedRow { row } => {
                write!(f, "softmax: row {row} has every entry masked")
            }
            NumError::IndexOutOfRange { op, index, bound } => {
                write!(f, "{op}: index {index} out of range (< {bound})")
            }
        }
    }
}

impl std::error::Error for NumError {}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<R> {
    shape: Vec<usize>,
    data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    pub fn new(shape: Vec<usize>, data: Vec<R>) -> Result<Self, NumError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumError::InvalidShape {
                op: "new",
                detail: format!("shape {:?} wants {} values, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![R::ZERO; numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: R) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = R::ONE;
        }
        t
    }

    pub fn scalar(value: R) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_f64_slice(shape: Vec<usize>, values: &[f64]) -> Result<Self, NumError> {
        Tensor::new(shape, values.iter().map(|&v| R::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<R> {
        self.data
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Row count of a matrix.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a matrix.
    pub fn cols(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    /// Row `i` of a matrix as a slice.
    pub fn row(&self, i: usize) -> &[R] {
        let d = self.cols();
        &self.data[i * d..(i + 1) * d]
    }

    /// Value at a 2-D index (test and inspection helper).
    pub fn at(&self, i: usize, j: usize) -> R {
        self.data[i * self.cols() + j]
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> R {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, NumError> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(NumError::InvalidShape {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape, shape),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(R) -> R) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .fold(0.0f64, |acc, v| acc.max(v.to_f64().abs()))
    }

    /// Largest absolute elementwise difference (shapes must match).
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |acc, (a, b)| {
                acc.max((a.to_f64() - b.to_f64()).abs())
            })
    }

    /// Normal(0, std) fill from the given generator.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut crate::rng::Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| R::from_f64(rng.normal() * std))
            .collect();
        Tensor { shape, data }
    }

    pub fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut crate::rng::Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| R::from_f64(rng.uniform(lo, hi)))
            .collect();
        Tensor { shape, data }
    }
}

fn expect_matrix<R: Real>(op: &'static str, t: &Tensor<R>) -> Result<(), NumError> {
    if !t.is_matrix() {
        return Err(NumError::InvalidShape {
            op,
            detail: format!("expected a matrix, got shape {:?}", t.shape()),
        });
    }
    Ok(())
}

// ── matmul family ─────────────────────────────────────────────────────────

/// C += A[m×k] · B[k×n], flat row-major slices.
pub(crate) fn matmul2_acc<R: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[R],
    b: &[R],
    out: &mut [R],
) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == R::ZERO {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c, &bv) in c_row.iter_mut().zip(b_row) {
                *c += aip * bv;
            }
        }
    }
}

/// C = A[m×k] · B[n×k]ᵀ.
pub(crate) fn matmul2_nt<R: Real>(m: usize, k: usize, n: usize, a: &[R], b: &[R], out: &mut [R]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = R::ZERO;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            out[i * n + j] = acc;
        }
    }
}

/// C += A[m×k]ᵀ · B[m×n] (accumulating; used by backward rules).
pub(crate) fn matmul2_tn_acc<R: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[R],
    b: &[R],
    out: &mut [R],
) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == R::ZERO {
                continue;
            }
            let c_row = &mut out[p * n..(p + 1) * n];
            for (c, &bv) in c_row.iter_mut().zip(b_row) {
                *c += aip * bv;
            }
        }
    }
}

/// Leading (batch) dimensions of a matmul operand: everything before the
/// final two axes. Empty for plain matrices.
fn batch_dims(shape: &[usize]) -> &[usize] {
    &shape[..shape.len() - 2]
}

/// Matrix product with optional leading batch dimensions.
///
/// Both operands must have rank >= 2; leading dimensions must be equal or 1
/// (broadcast). Inner dimensions must agree.
pub fn matmul<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>, NumError> {
    let (ar, br) = (a.shape().len(), b.shape().len());
    if ar < 2 || br < 2 {
        return Err(NumError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, ka) = (a.shape()[ar - 2], a.shape()[ar - 1]);
    let (kb, n) = (b.shape()[br - 2], b.shape()[br - 1]);
    if ka != kb {
        return Err(NumError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let ab = batch_dims(a.shape());
    let bb = batch_dims(b.shape());
    let out_batch = broadcast_batch("matmul", ab, bb, a.shape(), b.shape())?;
    let batch: usize = out_batch.iter().product();
    let a_batch: usize = ab.iter().product::<usize>().max(1);
    let b_batch: usize = bb.iter().product::<usize>().max(1);

    let mut out_shape = out_batch;
    out_shape.push(m);
    out_shape.push(n);
    let mut out = Tensor::zeros(out_shape);
    for idx in 0..batch {
        let ai = if a_batch == 1 { 0 } else { idx };
        let bi = if b_batch == 1 { 0 } else { idx };
        matmul2_acc(
            m,
            ka,
            n,
            &a.data()[ai * m * ka..(ai + 1) * m * ka],
            &b.data()[bi * ka * n..(bi + 1) * ka * n],
            &mut out.data_mut()[idx * m * n..(idx + 1) * m * n],
        );
    }
    Ok(out)
}

fn broadcast_batch(
    op: &'static str,
    a: &[usize],
    b: &[usize],
    full_a: &[usize],
    full_b: &[usize],
) -> Result<Vec<usize>, NumError> {
    if a.is_empty() {
        return Ok(b.to_vec());
    }
    if b.is_empty() {
        return Ok(a.to_vec());
    }
    if a == b {
        return Ok(a.to_vec());
    }
    let a_one = a.iter().product::<usize>() == 1;
    let b_one = b.iter().product::<usize>() == 1;
    if a_one {
        return Ok(b.to_vec());
    }
    if b_one {
        return Ok(a.to_vec());
    }
    Err(NumError::ShapeMismatch {
        op,
        lhs: full_a.to_vec(),
        rhs: full_b.to_vec(),
    })
}

/// A · Bᵀ for matrices (rows of `b` are the columns of the product).
pub fn matmul_nt<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>, NumError> {
    expect_matrix("matmul_nt", a)?;
    expect_matrix("matmul_nt", b)?;
    if a.cols() != b.cols() {
        return Err(NumError::ShapeMismatch {
            op: "matmul_nt",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    let mut out = Tensor::zeros(vec![m, n]);
    matmul2_nt(m, k, n, a.data(), b.data(), out.data_mut());
    Ok(out)
}

// ── elementwise and affine ────────────────────────────────────────────────

pub fn add<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>, NumError> {
    if a.shape() != b.shape() {
        return Err(NumError::ShapeMismatch {
            op: "add",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn sub<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>, NumError> {
    if a.shape() != b.shape() {
        return Err(NumError::ShapeMismatch {
            op: "sub",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn mul<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>, NumError> {
    if a.shape() != b.shape() {
        return Err(NumError::ShapeMismatch {
            op: "mul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn scale<R: Real>(a: &Tensor<R>, alpha: R) -> Tensor<R> {
    a.map(|v| v * alpha)
}

/// x[n×d] + bias[d] broadcast over rows.
pub fn add_row_broadcast<R: Real>(x: &Tensor<R>, bias: &Tensor<R>) -> Result<Tensor<R>, NumError> {
    expect_matrix("add_row_broadcast", x)?;
    if bias.shape() != [x.cols()] {
        return Err(NumError::ShapeMismatch {
            op: "add_row_broadcast",
            lhs: x.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let d = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        for (o, &b) in row.iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    Ok(out)
}

/// diag·I + scale·x for a square matrix x.
pub fn add_scaled_identity<R: Real>(
    x: &Tensor<R>,
    diag: R,
    scale: R,
) -> Result<Tensor<R>, NumError> {
    expect_matrix("add_scaled_identity", x)?;
    if x.rows() != x.cols() {
        return Err(NumError::InvalidShape {
            op: "add_scaled_identity",
            detail: format!("square matrix required, got {:?}", x.shape()),
        });
    }
    let n = x.rows();
    let mut out = x.map(|v| v * scale);
    for i in 0..n {
        out.data_mut()[i * n + i] += diag;
    }
    Ok(out)
}

/// Copy with the main diagonal zeroed.
pub fn zero_diagonal<R: Real>(x: &Tensor<R>) -> Result<Tensor<R>, NumError> {
    expect_matrix("zero_diagonal", x)?;
    if x.rows() != x.cols() {
        return Err(NumError::InvalidShape {
            op: "zero_diagonal",
            detail: format!("square matrix required, got {:?}", x.shape()),
        });
    }
    let n = x.rows();
    let mut out = x.clone();
    for i in 0..n {
        out.data_mut()[i * n + i] = R::ZERO;
    }
    Ok(out)
}

pub fn transpose<R: Real>(x: &Tensor<R>) -> Result<Tensor<R>, NumError> {
    expect_matrix("transpose", x)?;
    let (m, n) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(vec![n, m]);
    for i in 0..m {
        for j in 0..n {
            out.data_mut()[j * m + i] = x.data()[i * n + j];
        }
    }
    Ok(out)
}

/// Concatenate matrices with equal row counts along the feature axis.
pub fn concat_cols<R: Real>(parts: &[&Tensor<R>]) -> Result<Tensor<R>, NumError> {
    if parts.is_empty() {
        return Err(NumError::InvalidShape {
            op: "concat_cols",
            detail: "no parts".into(),
        });
    }
    let rows = parts[0].rows();
    for p in parts {
        expect_matrix("concat_cols", p)?;
        if p.rows() != rows {
            return Err(NumError::ShapeMismatch {
                op: "concat_cols",
                lhs: parts[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut out = Tensor::zeros(vec![rows, total]);
    for i in 0..rows {
        let mut offset = 0;
        for p in parts {
            let d = p.cols();
            out.data_mut()[i * total + offset..i * total + offset + d]
                .copy_from_slice(p.row(i));
            offset += d;
        }
    }
    Ok(out)
}

pub fn slice_cols<R: Real>(
    x: &Tensor<R>,
    start: usize,
    len: usize,
) -> Result<Tensor<R>, NumError> {
    expect_matrix("slice_cols", x)?;
    if start + len > x.cols() {
        return Err(NumError::IndexOutOfRange {
            op: "slice_cols",
            index: start + len,
            bound: x.cols(),
        });
    }
    let (m, d) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(vec![m, len]);
    for i in 0..m {
        out.data_mut()[i * len..(i + 1) * len]
            .copy_from_slice(&x.data()[i * d + start..i * d + start + len]);
    }
    Ok(out)
}

pub fn slice_rows<R: Real>(
    x: &Tensor<R>,
    start: usize,
    len: usize,
) -> Result<Tensor<R>, NumError> {
    expect_matrix("slice_rows", x)?;
    if start + len > x.rows() {
        return Err(NumError::IndexOutOfRange {
            op: "slice_rows",
            index: start + len,
            bound: x.rows(),
        });
    }
    let d = x.cols();
    Tensor::new(
        vec![len, d],
        x.data()[start * d..(start + len) * d].to_vec(),
    )
}

pub fn sum_all<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    let mut acc = R::ZERO;
    for &v in x.data() {
        acc += v;
    }
    Tensor::scalar(acc)
}

// ── activations and normalization ─────────────────────────────────────────

const GELU_COEFF: f64 = 0.044715;

fn gelu_inner<R: Real>(x: R) -> (R, R) {
    // tanh approximation, as in the GPT-2 lineage
    let sq2pi = R::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let c = R::from_f64(GELU_COEFF);
    let half = R::from_f64(0.5);
    let three = R::from_f64(3.0);
    let u = sq2pi * (x + c * x * x * x);
    let t = u.tanh();
    let y = half * x * (R::ONE + t);
    let du = sq2pi * (R::ONE + three * c * x * x);
    let dy = half * (R::ONE + t) + half * x * (R::ONE - t * t) * du;
    (y, dy)
}

pub fn gelu<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    x.map(|v| gelu_inner(v).0)
}

pub(crate) fn gelu_derivative<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    x.map(|v| gelu_inner(v).1)
}

/// Row-wise softmax of `x + mask` over the last axis.
///
/// Mask entries are 0 (visible) or the [`MASK_SENTINEL`] (hidden). Rows are
/// stabilized by max subtraction; a row whose every entry is hidden is an
/// error.
pub fn softmax_rows<R: Real>(x: &Tensor<R>, mask: &Tensor<R>) -> Result<Tensor<R>, NumError> {
    if x.shape() != mask.shape() {
        return Err(NumError::ShapeMismatch {
            op: "softmax_rows",
            lhs: x.shape().to_vec(),
            rhs: mask.shape().to_vec(),
        });
    }
    if x.shape().is_empty() {
        return Err(NumError::InvalidShape {
            op: "softmax_rows",
            detail: "rank 0".into(),
        });
    }
    let d = x.cols();
    let masked_below = R::from_f64(MASK_SENTINEL / 2.0);
    let mut out = Tensor::zeros(x.shape().to_vec());
    for (r, (row, mrow)) in x.data().chunks(d).zip(mask.data().chunks(d)).enumerate() {
        if mrow.iter().all(|&m| m <= masked_below) {
            return Err(NumError::FullyMaskedRow { row: r });
        }
        let orow = &mut out.data_mut()[r * d..(r + 1) * d];
        let mut maxv = row[0] + mrow[0];
        for i in 1..d {
            maxv = maxv.maximum(row[i] + mrow[i]);
        }
        let mut sum = R::ZERO;
        for i in 0..d {
            let e = (row[i] + mrow[i] - maxv).exp();
            orow[i] = e;
            sum += e;
        }
        let inv = R::ONE / sum;
        for o in orow.iter_mut() {
            *o *= inv;
        }
    }
    Ok(out)
}

/// Softmax over an unmasked slice (decode path: every cached position is visible).
pub(crate) fn softmax_slice<R: Real>(row: &mut [R]) {
    let mut maxv = row[0];
    for &v in row.iter() {
        maxv = maxv.maximum(v);
    }
    let mut sum = R::ZERO;
    for v in row.iter_mut() {
        *v = (*v - maxv).exp();
        sum += *v;
    }
    let inv = R::ONE / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row normalization with affine gain/bias. Returns per-row mean and
/// 1/std alongside the output (the backward rule needs them).
pub(crate) fn layer_norm_full<R: Real>(
    x: &Tensor<R>,
    gain: &Tensor<R>,
    bias: &Tensor<R>,
) -> Result<(Tensor<R>, Vec<R>, Vec<R>), NumError> {
    let d = x.cols();
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(NumError::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    let rows = x.numel() / d;
    let inv_d = R::ONE / R::from_f64(d as f64);
    let eps = R::from_f64(LAYER_NORM_EPS);
    let mut out = Tensor::zeros(x.shape().to_vec());
    let mut means = Vec::with_capacity(rows);
    let mut inv_stds = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mut mean = R::ZERO;
        for &v in row {
            mean += v;
        }
        mean *= inv_d;
        let mut var = R::ZERO;
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var *= inv_d;
        let inv_std = R::ONE / (var + eps).sqrt();
        let orow = &mut out.data_mut()[r * d..(r + 1) * d];
        for i in 0..d {
            orow[i] = (row[i] - mean) * inv_std * gain.data()[i] + bias.data()[i];
        }
        means.push(mean);
        inv_stds.push(inv_std);
    }
    Ok((out, means, inv_stds))
}

pub fn layer_norm<R: Real>(
    x: &Tensor<R>,
    gain: &Tensor<R>,
    bias: &Tensor<R>,
) -> Result<Tensor<R>, NumError> {
    layer_norm_full(x, gain, bias).map(|(out, _, _)| out)
}

// ── embedding and loss ────────────────────────────────────────────────────

/// Gather rows of `table` at `ids`.
pub fn embedding<R: Real>(table: &Tensor<R>, ids: &[usize]) -> Result<Tensor<R>, NumError> {
    expect_matrix("embedding", table)?;
    let (v, d) = (table.rows(), table.cols());
    let mut out = Tensor::zeros(vec![ids.len(), d]);
    for (i, &id) in ids.iter().enumerate() {
        if id >= v {
            return Err(NumError::IndexOutOfRange {
                op: "embedding",
                index: id,
                bound: v,
            });
        }
        out.data_mut()[i * d..(i + 1) * d].copy_from_slice(table.row(id));
    }
    Ok(out)
}

/// Mean negative log-likelihood of `targets` under row-softmax of `logits`,
/// restricted to positions where `mask` is true. Also returns the softmax
/// probabilities (saved for the backward rule) and the unmasked count.
pub(crate) fn cross_entropy_full<R: Real>(
    logits: &Tensor<R>,
    targets: &[usize],
    mask: &[bool],
) -> Result<(R, Tensor<R>, usize), NumError> {
    expect_matrix("cross_entropy", logits)?;
    let (n, v) = (logits.rows(), logits.cols());
    if targets.len() != n || mask.len() != n {
        return Err(NumError::InvalidShape {
            op: "cross_entropy",
            detail: format!(
                "logits {:?} vs {} targets / {} mask entries",
                logits.shape(),
                targets.len(),
                mask.len()
            ),
        });
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(NumError::InvalidShape {
            op: "cross_entropy",
            detail: "every position masked".into(),
        });
    }
    let mut probs = Tensor::zeros(vec![n, v]);
    let mut loss = R::ZERO;
    for i in 0..n {
        if mask[i] && targets[i] >= v {
            return Err(NumError::IndexOutOfRange {
                op: "cross_entropy",
                index: targets[i],
                bound: v,
            });
        }
        let row = logits.row(i);
        let mut maxv = row[0];
        for &x in row {
            maxv = maxv.maximum(x);
        }
        let mut sum = R::ZERO;
        let prow = &mut probs.data_mut()[i * v..(i + 1) * v];
        for j in 0..v {
            let e = (row[j] - maxv).exp();
            prow[j] = e;
            sum += e;
        }
        let inv = R::ONE / sum;
        for p in prow.iter_mut() {
            *p *= inv;
        }
        if mask[i] {
            // -log p[target] = log(sum) + max - logit[target]
            loss += sum.ln() + maxv - row[targets[i]];
        }
    }
    loss *= R::ONE / R::from_f64(count as f64);
    Ok((loss, probs, count))
}

pub fn cross_entropy<R: Real>(
    logits: &Tensor<R>,
    targets: &[usize],
    mask: &[bool],
) -> Result<R, NumError> {
    cross_entropy_full(logits, targets, mask).map(|(loss, _, _)| loss)
}

// ── triangular solve ──────────────────────────────────────────────────────

/// Diagonal entries smaller than this are treated as singular.
pub const SOLVE_DIAG_TOL: f64 = 1e-12;

/// Solve B·Y = C by forward substitution, B lower-triangular n×n, C n×d.
///
/// Only the lower triangle of B is read; the inverse is never formed.
pub fn solve_lower_triangular<R: Real>(
    b: &Tensor<R>,
    c: &Tensor<R>,
) -> Result<Tensor<R>, NumError> {
    expect_matrix("solve_lower_triangular", b)?;
    expect_matrix("solve_lower_triangular", c)?;
    let n = b.rows();
    if b.cols() != n || c.rows() != n {
        return Err(NumError::ShapeMismatch {
            op: "solve_lower_triangular",
            lhs: b.shape().to_vec(),
            rhs: c.shape().to_vec(),
        });
    }
    let d = c.cols();
    let tol = R::from_f64(SOLVE_DIAG_TOL);
    let mut y = c.clone();
    let ydata = y.data_mut();
    for i in 0..n {
        let (solved, rest) = ydata.split_at_mut(i * d);
        let yrow = &mut rest[..d];
        let brow = &b.data()[i * n..i * n + i];
        for (j, &bij) in brow.iter().enumerate() {
            if bij == R::ZERO {
                continue;
            }
            let yj = &solved[j * d..(j + 1) * d];
            for (o, &v) in yrow.iter_mut().zip(yj) {
                *o -= bij * v;
            }
        }
        let bii = b.data()[i * n + i];
        if bii.abs() <= tol {
            return Err(NumError::SingularSystem { row: i });
        }
        let inv = R::ONE / bii;
        for o in yrow.iter_mut() {
            *o *= inv;
        }
    }
    Ok(y)
}

/// Solve Bᵀ·Z = G by back substitution, where B is the lower-triangular
/// matrix of the forward solve (so Bᵀ is upper-triangular). Used by the
/// solve backward rule; never materializes the transpose.
pub(crate) fn solve_upper_from_transpose<R: Real>(
    b: &Tensor<R>,
    g: &Tensor<R>,
) -> Result<Tensor<R>, NumError> {
    let n = b.rows();
    let d = g.cols();
    let tol = R::from_f64(SOLVE_DIAG_TOL);
    let mut z = g.clone();
    for i in (0..n).rev() {
        // z_i = (g_i - sum_{j>i} B[j][i] * z_j) / B[i][i]
        let (head, tail) = z.data_mut().split_at_mut((i + 1) * d);
        let zrow = &mut head[i * d..(i + 1) * d];
        for j in (i + 1)..n {
            let bji = b.data()[j * n + i];
            if bji == R::ZERO {
                continue;
            }
            let zj = &tail[(j - i - 1) * d..(j - i) * d];
            for (o, &v) in zrow.iter_mut().zip(zj) {
                *o -= bji * v;
            }
        }
        let bii = b.data()[i * n + i];
        if bii.abs() <= tol {
            return Err(NumError::SingularSystem { row: i });
        }
        let inv = R::ONE / bii;
        for o in zrow.iter_mut() {
            *o *= inv;
        }
    }
    Ok(z)
}

/// True if every strictly-upper entry is exactly zero.
pub fn is_lower_triangular<R: Real>(x: &Tensor<R>) -> bool {
    if !x.is_matrix() || x.rows() != x.cols() {
        return false;
    }
    let n = x.rows();
    for i in 0..n {
        for j in (i + 1)..n {
            if x.data()[i * n + j] != R::ZERO {
                return false;
            }
        }
    }
    true
}
