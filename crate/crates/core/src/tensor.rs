//! Dense row-major tensors and the numeric kernels shared by the forward
//! functions and the autodiff tape.
//!
//! Every kernel computes an output row from the matching input row only, with
//! a fixed summation order. That keeps results bitwise independent of how many
//! other rows are present, which the causality and incremental-decoding
//! checks rely on.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl std::str::FromStr for DType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(format!("unknown dtype `{other}` (expected f32 or f64)")),
        }
    }
}

/// Floating-point element type of a run (f32 for training, f64 for verification).
pub trait Scalar:
    Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
{
    const DTYPE: DType;

    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn erf(self) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn erf(self) -> Self {
        libm::erff(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], v: F) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.iter().map(|&v| F::of(v)).collect())
    }

    pub fn scalar(v: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Product of all axes but the last.
    pub fn rows(&self) -> usize {
        let c = self.cols();
        if c == 0 {
            0
        } else {
            self.data.len() / c
        }
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::of(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Numerically stable softmax of `logits` along the last axis, restricted to
/// entries where `keep` is true. Dropped entries come out exactly zero.
pub fn softmax_masked<F: Scalar>(logits: &Tensor<F>, keep: &[bool]) -> Result<Tensor<F>> {
    if keep.len() != logits.len() {
        return Err(Error::Shape(format!(
            "mask has {} entries, logits have {}",
            keep.len(),
            logits.len()
        )));
    }
    let cols = logits.cols();
    let mut out = Tensor::zeros(logits.shape());
    for r in 0..logits.rows() {
        let span = r * cols..(r + 1) * cols;
        let idx: Vec<usize> = (0..cols).filter(|&j| keep[span.start + j]).collect();
        if idx.is_empty() {
            return Err(Error::DegenerateAttentionRow { row: r });
        }
        let src = &logits.data()[span.clone()];
        let dst = &mut out.data_mut()[span];
        softmax_indexed(src, &idx, dst);
    }
    Ok(out)
}

pub fn layer_norm<F: Scalar>(x: &Tensor<F>, gain: &Tensor<F>, bias: &Tensor<F>, eps: F) -> Result<Tensor<F>> {
    let cols = x.cols();
    if gain.len() != cols || bias.len() != cols {
        return Err(Error::Shape(format!(
            "layer_norm gain/bias extent {}/{} does not match {cols}",
            gain.len(),
            bias.len()
        )));
    }
    let mut out = Tensor::zeros(x.shape());
    for r in 0..x.rows() {
        layer_norm_row(x.row(r), gain.data(), bias.data(), eps, out.row_mut(r));
    }
    Ok(out)
}

/// Mean over rows of `-log softmax(logits)[target]`.
pub fn cross_entropy<F: Scalar>(logits: &Tensor<F>, targets: &[u32]) -> Result<F> {
    let v = logits.cols();
    if logits.rows() != targets.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} targets",
            logits.rows(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut total = F::zero();
    for (r, &t) in targets.iter().enumerate() {
        if t as usize >= v {
            return Err(Error::TargetOutOfRange { id: t, vocab: v });
        }
        let row = logits.row(r);
        total += log_sum_exp(row) - row[t as usize];
    }
    Ok(total / F::of(targets.len() as f64))
}

pub fn gelu<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| gelu_scalar(v)).collect(),
    }
}

// ---------------------------------------------------------------------------
// kernels

const LANES: usize = 8;

#[inline]
pub(crate) fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let split = n - n % LANES;
    let mut acc = [F::zero(); LANES];
    for (ca, cb) in a[..split].chunks_exact(LANES).zip(b[..split].chunks_exact(LANES)) {
        for l in 0..LANES {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for i in split..n {
        s += a[i] * b[i];
    }
    s
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

const MR: usize = 4;
const NR: usize = 16;

/// `R` output rows times all columns: `out[r, j] += Σ_p a(r, p) · b[p, j]`
/// with `a(r, p) = a[r * ars + p * aps]`. Each element adds its products in
/// order `p = 0..k`, so results do not depend on the blocking.
#[inline(always)]
fn mm_rows<F: Scalar, const R: usize>(a: &[F], ars: usize, aps: usize, b: &[F], out: &mut [F], k: usize, n: usize) {
    let mut j = 0;
    while j + NR <= n {
        let mut acc = [[F::zero(); NR]; R];
        for (r, row) in acc.iter_mut().enumerate() {
            row.copy_from_slice(&out[r * n + j..r * n + j + NR]);
        }
        for p in 0..k {
            let brow = &b[p * n + j..p * n + j + NR];
            for (r, row) in acc.iter_mut().enumerate() {
                let av = a[r * ars + p * aps];
                for c in 0..NR {
                    row[c] += av * brow[c];
                }
            }
        }
        for (r, row) in acc.iter().enumerate() {
            out[r * n + j..r * n + j + NR].copy_from_slice(row);
        }
        j += NR;
    }
    for r in 0..R {
        for c in j..n {
            let mut s = out[r * n + c];
            for p in 0..k {
                s += a[r * ars + p * aps] * b[p * n + c];
            }
            out[r * n + c] = s;
        }
    }
}

/// `out[m,n] += a[m,k] @ b[k,n]`
pub(crate) fn matmul_acc<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    let mut i = 0;
    while i + MR <= m {
        mm_rows::<F, MR>(&a[i * k..], k, 1, b, &mut out[i * n..(i + MR) * n], k, n);
        i += MR;
    }
    for i in i..m {
        mm_rows::<F, 1>(&a[i * k..], k, 1, b, &mut out[i * n..(i + 1) * n], k, n);
    }
}

/// `out[m,k] += g[m,n] @ b[k,n]^T`
pub(crate) fn matmul_bt_acc<F: Scalar>(g: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    let mut bt = vec![F::zero(); n * k];
    for p in 0..k {
        for j in 0..n {
            bt[j * k + p] = b[p * n + j];
        }
    }
    matmul_acc(g, &bt, out, m, n, k);
}

/// `out[k,n] += a[m,k]^T @ g[m,n]`
pub(crate) fn matmul_at_acc<F: Scalar>(a: &[F], g: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    let mut p = 0;
    while p + MR <= k {
        mm_rows::<F, MR>(&a[p..], 1, k, g, &mut out[p * n..(p + MR) * n], m, n);
        p += MR;
    }
    for p in p..k {
        mm_rows::<F, 1>(&a[p..], 1, k, g, &mut out[p * n..(p + 1) * n], m, n);
    }
}

pub(crate) fn log_sum_exp<F: Scalar>(row: &[F]) -> F {
    let m = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
    let s: F = row.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

/// Softmax over `src[idx]`, written to `dst[idx]`. Other entries of `dst` are
/// left untouched (callers pass zeroed rows).
pub(crate) fn softmax_indexed<F: Scalar>(src: &[F], idx: &[usize], dst: &mut [F]) {
    let m = idx.iter().fold(F::neg_infinity(), |a, &j| a.max(src[j]));
    let mut s = F::zero();
    for &j in idx {
        let e = (src[j] - m).exp();
        dst[j] = e;
        s += e;
    }
    for &j in idx {
        dst[j] /= s;
    }
}

/// Writes the normalized row into `out` and returns `(mean, rstd)`.
pub(crate) fn layer_norm_row<F: Scalar>(x: &[F], gain: &[F], bias: &[F], eps: F, out: &mut [F]) -> (F, F) {
    let n = F::of(x.len() as f64);
    let mean = x.iter().copied().sum::<F>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
    let rstd = F::one() / (var + eps).sqrt();
    for j in 0..x.len() {
        out[j] = (x[j] - mean) * rstd * gain[j] + bias[j];
    }
    (mean, rstd)
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
// 1 / sqrt(2 pi)
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub(crate) fn gelu_scalar<F: Scalar>(x: F) -> F {
    F::of(0.5) * x * (F::one() + (x * F::of(FRAC_1_SQRT_2)).erf())
}

#[inline]
pub(crate) fn gelu_grad<F: Scalar>(x: F) -> F {
    let cdf = F::of(0.5) * (F::one() + (x * F::of(FRAC_1_SQRT_2)).erf());
    let pdf = F::of(FRAC_1_SQRT_2PI) * (F::of(-0.5) * x * x).exp();
    cdf + x * pdf
}
