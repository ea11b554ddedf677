//! Dense arrays, log-domain arithmetic, seeded random streams and the
//! parameter-visiting contract shared by every network module.
//!
//! Everything here is 64-bit and deterministic. Probabilities are carried in
//! the log domain, with `f64::NEG_INFINITY` standing for an exact zero.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix. Vectors are stored as `n x 1` matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Array2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Array2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn vector(len: usize) -> Self {
        Self::zeros(len, 1)
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::dim(
                "Array2::from_vec",
                format!("{} elements ({rows}x{cols})", rows * cols),
                data.len(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::dim(format!("Array2::from_rows row {i}"), cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn random_normal(rows: usize, cols: usize, scale: f64, rng: &mut RandomStream) -> Self {
        let data = (0..rows * cols).map(|_| scale * rng.normal()).collect();
        Self { rows, cols, data }
    }

    pub fn random_uniform(rows: usize, cols: usize, bound: f64, rng: &mut RandomStream) -> Self {
        let data = (0..rows * cols)
            .map(|_| bound * (2.0 * rng.uniform() - 1.0))
            .collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn require_shape(&self, what: &str, rows: usize, cols: usize) -> Result<()> {
        if self.shape() != (rows, cols) {
            return Err(Error::dim(
                what,
                format!("{rows}x{cols}"),
                format!("{}x{}", self.rows, self.cols),
            ));
        }
        Ok(())
    }

    /// `out = self * x`.
    pub fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols.max(1))) {
            *o = dot(row, x);
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        if self.cols > 0 {
            self.matvec_into(x, &mut out);
        }
        out
    }

    /// `out += self^T * v`.
    pub fn matvec_t_acc(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (r, &vr) in v.iter().enumerate() {
            if vr == 0.0 {
                continue;
            }
            axpy_slice(vr, self.row(r), out);
        }
    }

    /// `self += a * b^T`.
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (r, &ar) in a.iter().enumerate() {
            if ar == 0.0 {
                continue;
            }
            axpy_slice(ar, b, self.row_mut(r));
        }
    }

    /// `X W^T` where `self` is `n x k` and `w` is `m x k`; result is `n x m`.
    pub fn matmul_t(&self, w: &Array2) -> Array2 {
        debug_assert_eq!(self.cols, w.cols);
        let mut out = Array2::zeros(self.rows, w.rows);
        for i in 0..self.rows {
            let x = self.row(i);
            let o = out.row_mut(i);
            for (j, oj) in o.iter_mut().enumerate() {
                *oj = dot(x, w.row(j));
            }
        }
        out
    }

    /// `self W` where `self` is `n x m` and `w` is `m x k`; result is `n x k`.
    pub fn matmul(&self, w: &Array2) -> Array2 {
        debug_assert_eq!(self.cols, w.rows);
        let mut out = Array2::zeros(self.rows, w.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = out.row_mut(i);
            for (k, &aik) in a.iter().enumerate() {
                if aik != 0.0 {
                    axpy_slice(aik, w.row(k), o);
                }
            }
        }
        out
    }

    /// `self += A^T B` where `a` is `n x m` and `b` is `n x k`; `self` is `m x k`.
    pub fn add_t_matmul(&mut self, a: &Array2, b: &Array2) {
        debug_assert_eq!(a.rows, b.rows);
        debug_assert_eq!(self.rows, a.cols);
        debug_assert_eq!(self.cols, b.cols);
        for n in 0..a.rows {
            self.add_outer(a.row(n), b.row(n));
        }
    }

    pub fn hadamard(&self, other: &Array2) -> Array2 {
        debug_assert_eq!(self.shape(), other.shape());
        Array2 {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a * b)
                .collect(),
        }
    }

    pub fn axpy(&mut self, alpha: f64, other: &Array2) {
        debug_assert_eq!(self.shape(), other.shape());
        axpy_slice(alpha, &other.data, &mut self.data);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|x| *x *= alpha);
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.data.iter().sum::<f64>() / self.data.len() as f64
        }
    }

    /// Rows `[start, end)` as a new array.
    pub fn slice_rows(&self, start: usize, end: usize) -> Array2 {
        Array2 {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Rows in reverse order.
    pub fn reversed_rows(&self) -> Array2 {
        let mut out = Array2::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(self.row(self.rows - 1 - r));
        }
        out
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn hconcat(&self, other: &Array2) -> Result<Array2> {
        if self.rows != other.rows {
            return Err(Error::dim("hconcat rows", self.rows, other.rows));
        }
        let mut out = Array2::zeros(self.rows, self.cols + other.cols);
        for r in 0..self.rows {
            let o = out.row_mut(r);
            o[..self.cols].copy_from_slice(self.row(r));
            o[self.cols..].copy_from_slice(other.row(r));
        }
        Ok(out)
    }

    /// Columns `[start, end)` as a new array.
    pub fn slice_cols(&self, start: usize, end: usize) -> Array2 {
        let mut out = Array2::zeros(self.rows, end - start);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[start..end]);
        }
        out
    }
}

/// Dense rank-3 array, `d0 x d1 x d2`, last axis contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Array3 {
    dims: (usize, usize, usize),
    data: Vec<f64>,
}

impl Array3 {
    pub fn zeros(d0: usize, d1: usize, d2: usize) -> Self {
        Self::filled(d0, d1, d2, 0.0)
    }

    pub fn filled(d0: usize, d1: usize, d2: usize, v: f64) -> Self {
        Self {
            dims: (d0, d1, d2),
            data: vec![v; d0 * d1 * d2],
        }
    }

    pub fn from_vec(dims: (usize, usize, usize), data: Vec<f64>) -> Result<Self> {
        let n = dims.0 * dims.1 * dims.2;
        if n != data.len() {
            return Err(Error::dim("Array3::from_vec", n, data.len()));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    fn offset(&self, i: usize, j: usize) -> usize {
        (i * self.dims.1 + j) * self.dims.2
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.offset(i, j) + k]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let o = self.offset(i, j);
        self.data[o + k] = v;
    }

    #[inline]
    pub fn slice(&self, i: usize, j: usize) -> &[f64] {
        let o = self.offset(i, j);
        &self.data[o..o + self.dims.2]
    }

    #[inline]
    pub fn slice_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let o = self.offset(i, j);
        let n = self.dims.2;
        &mut self.data[o..o + n]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Four accumulators; the summation order is fixed so results stay bitwise
    // reproducible.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub fn axpy_slice(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// A log-domain probability in `(-inf, 0]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct LogProb(f64);

impl LogProb {
    pub const ZERO_PROB: LogProb = LogProb(f64::NEG_INFINITY);
    pub const ONE: LogProb = LogProb(0.0);

    /// Accepts values up to a few ulps above zero (accumulated rounding) and
    /// clamps them to zero.
    pub fn new(value: f64) -> Result<Self> {
        if value.is_nan() {
            return Err(Error::Contract("log-probability is NaN".into()));
        }
        if value > 1e-9 {
            return Err(Error::Contract(format!("log-probability {value} > 0")));
        }
        Ok(LogProb(value.min(0.0)))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn prob(self) -> f64 {
        self.0.exp()
    }
}

/// `log(exp(a) + exp(b))` for two log-domain values.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a > b {
        a + (b - a).exp().ln_1p()
    } else {
        b + (a - b).exp().ln_1p()
    }
}

/// `log sum_i exp(v_i)`, shifted by the maximum. An all `-inf` input yields
/// `-inf`.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Contract("log_sum_exp of an empty list".into()));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Contract("log_sum_exp input contains NaN".into()));
    }
    Ok(log_sum_exp_unchecked(values))
}

pub(crate) fn log_sum_exp_unchecked(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let s: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + s.ln()
}

pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("softmax input must be finite".into()));
    }
    let mut out = logits.to_vec();
    log_softmax_in_place(&mut out);
    out.iter_mut().for_each(|v| *v = v.exp());
    Ok(out)
}

/// In-place `x_k - log sum_j exp(x_j)`.
pub fn log_softmax_in_place(x: &mut [f64]) {
    let lse = log_sum_exp_unchecked(x);
    x.iter_mut().for_each(|v| *v -= lse);
}

/// Gradient with respect to logits, given the gradient with respect to the
/// log-softmax outputs and those outputs.
pub fn log_softmax_backward(grad_logprob: &[f64], logprob: &[f64], out: &mut [f64]) {
    let total: f64 = grad_logprob.iter().sum();
    for ((o, g), lp) in out.iter_mut().zip(grad_logprob).zip(logprob) {
        *o = g - lp.exp() * total;
    }
}

/// Central-difference gradient estimate of `f` at `x`.
pub fn finite_difference_gradient<F>(mut f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let plus = f(&probe);
        if !plus.is_finite() {
            return Err(Error::OracleFailure {
                coordinate: i,
                value: plus,
            });
        }
        probe[i] = x[i] - eps;
        let minus = f(&probe);
        if !minus.is_finite() {
            return Err(Error::OracleFailure {
                coordinate: i,
                value: minus,
            });
        }
        probe[i] = x[i];
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// Coordinates whose magnitude is below this fraction of the largest
/// reference coordinate are compared against that scale instead of their own
/// magnitude; central differences carry ~1e-10 absolute error, which would
/// otherwise dominate near-zero entries.
pub const GRADIENT_CHECK_SCALE_FLOOR: f64 = 1e-3;

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

/// Largest per-coordinate relative error between an analytic gradient and a
/// reference (usually finite-difference) gradient, with the floor set to
/// `GRADIENT_CHECK_SCALE_FLOOR` times the reference's largest magnitude.
pub fn max_relative_error(analytic: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(analytic.len(), reference.len(), "gradient length mismatch");
    let scale = reference.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let floor = (GRADIENT_CHECK_SCALE_FLOOR * scale).max(1e-12);
    analytic
        .iter()
        .zip(reference)
        .map(|(x, y)| relative_error(*x, *y, floor))
        .fold(0.0, f64::max)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded ChaCha stream. Identical `(seed, stream id)` pairs produce
/// identical draws on every platform; `derive` splits off independent child
/// streams for augmentation, dropout masks and data order.
#[derive(Debug, Clone)]
pub struct RandomStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RandomStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Child stream keyed by `tag`; does not consume draws from `self`.
    pub fn derive(&self, tag: u64) -> RandomStream {
        RandomStream::new(self.seed, splitmix64(self.stream_id ^ splitmix64(tag)))
    }

    pub fn derive_path(&self, tags: &[u64]) -> RandomStream {
        tags.iter().fold(self.clone(), |s, &t| s.derive(t))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "RandomStream::below(0)");
        self.rng.random_range(0..n)
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        assert!(lo <= hi);
        self.rng.random_range(lo..=hi)
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }

    /// Index drawn from unnormalized non-negative `weights`.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut r = self.uniform() * total;
        for (i, w) in weights.iter().enumerate() {
            if r < *w {
                return i;
            }
            r -= w;
        }
        weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
    }
}

/// The differentiable-module contract: a module exposes its parameter
/// tensors by name, in a fixed order. Gradients are stored in a value of the
/// same type, so optimizers, checkpoints and finite-difference checks can all
/// walk parameters and gradients in lockstep.
pub trait Parameterized {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2));
}

pub fn join_name(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn param_count<M: Parameterized + ?Sized>(m: &M) -> usize {
    let mut n = 0;
    m.visit_params("", &mut |_, a| n += a.len());
    n
}

pub fn param_names<M: Parameterized + ?Sized>(m: &M) -> Vec<(String, (usize, usize))> {
    let mut out = Vec::new();
    m.visit_params("", &mut |name, a| out.push((name.to_string(), a.shape())));
    out
}

pub fn flatten_params<M: Parameterized + ?Sized>(m: &M) -> Vec<f64> {
    let mut out = Vec::new();
    m.visit_params("", &mut |_, a| out.extend_from_slice(a.data()));
    out
}

pub fn assign_params<M: Parameterized + ?Sized>(m: &mut M, flat: &[f64]) {
    let mut offset = 0;
    m.visit_params_mut("", &mut |_, a| {
        let n = a.len();
        a.data_mut().copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    });
    assert_eq!(offset, flat.len(), "assign_params length mismatch");
}

pub fn zeros_like<M: Parameterized + Clone>(m: &M) -> M {
    let mut z = m.clone();
    z.visit_params_mut("", &mut |_, a| a.fill(0.0));
    z
}

/// `target += alpha * source`, parameter by parameter.
pub fn accumulate<M: Parameterized + ?Sized>(target: &mut M, alpha: f64, source: &M) {
    let mut src = Vec::new();
    source.visit_params("", &mut |_, a| src.push(a.data().to_vec()));
    let mut i = 0;
    target.visit_params_mut("", &mut |_, a| {
        axpy_slice(alpha, &src[i], a.data_mut());
        i += 1;
    });
}

pub fn scale_params<M: Parameterized + ?Sized>(m: &mut M, alpha: f64) {
    m.visit_params_mut("", &mut |_, a| a.scale(alpha));
}

pub fn global_norm<M: Parameterized + ?Sized>(m: &M) -> f64 {
    let mut s = 0.0;
    m.visit_params("", &mut |_, a| s += a.sum_squares());
    s.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_examples() {
        let half = 0.5f64.ln();
        assert!((log_sum_exp(&[half, half]).unwrap()).abs() < 1e-15);
        assert_eq!(log_sum_exp(&[-3.7]).unwrap(), -3.7);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, -1.0]).unwrap(), -1.0);
        assert_eq!(
            log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap(),
            f64::NEG_INFINITY
        );
        assert!(matches!(log_sum_exp(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn log_sum_exp_large_values() {
        // log(e^1234 + e^1232) = 1232 + log(1 + e^2)
        let v = log_sum_exp(&[1234.0, 1232.0]).unwrap();
        assert!((v - 1234.126928011042972).abs() < 1e-12);
        assert!((log_add(1234.0, 1232.0) - v).abs() < 1e-12);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        for c in [-40.0, 0.0, 3.3, 700.0] {
            let p = softmax(&[c, c, c, c]).unwrap();
            for v in p {
                assert!((v - 0.25).abs() < 1e-15);
            }
        }
        let p = softmax(&[1f64.ln(), 3f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        assert!(softmax(&[0.0, f64::NAN]).is_err());
    }

    #[test]
    fn finite_difference_examples() {
        let g = finite_difference_gradient(|x| x[0] * x[0], &[3.0], 1e-3).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_difference_gradient(|_| 4.2, &[1.0, -2.0, 0.5], 1e-5).unwrap();
        assert_eq!(g, vec![0.0; 3]);
        let err = finite_difference_gradient(|x| if x[1] > 0.0 { f64::NAN } else { 0.0 }, &[0.0, 0.0], 1e-3)
            .unwrap_err();
        assert!(matches!(err, Error::OracleFailure { coordinate: 1, .. }));
    }

    #[test]
    fn log_softmax_backward_matches_finite_differences() {
        let mut rng = RandomStream::new(7, 0);
        let logits: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let weights: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let f = |z: &[f64]| {
            let mut lp = z.to_vec();
            log_softmax_in_place(&mut lp);
            dot(&lp, &weights)
        };
        let num = finite_difference_gradient(f, &logits, 1e-5).unwrap();
        let mut lp = logits.clone();
        log_softmax_in_place(&mut lp);
        let mut ana = vec![0.0; 5];
        log_softmax_backward(&weights, &lp, &mut ana);
        assert!(max_relative_error(&num, &ana) < 1e-6);
    }

    #[test]
    fn random_stream_is_reproducible_and_splittable() {
        let mut a = RandomStream::new(42, 3);
        let mut b = RandomStream::new(42, 3);
        let xa: Vec<f64> = (0..16).map(|_| a.uniform()).collect();
        let xb: Vec<f64> = (0..16).map(|_| b.uniform()).collect();
        assert_eq!(xa, xb);
        let mut c = RandomStream::new(42, 4);
        assert_ne!(xa[0], c.uniform());
        let d1 = a.derive(9).uniform();
        let d2 = RandomStream::new(42, 3).derive(9).uniform();
        assert_eq!(d1, d2);
    }

    #[test]
    fn matmul_helpers_agree_with_loops() {
        let mut rng = RandomStream::new(1, 1);
        let x = Array2::random_normal(3, 4, 1.0, &mut rng);
        let w = Array2::random_normal(5, 4, 1.0, &mut rng);
        let y = x.matmul_t(&w);
        for i in 0..3 {
            for j in 0..5 {
                let s: f64 = (0..4).map(|k| x.get(i, k) * w.get(j, k)).sum();
                assert!((y.get(i, j) - s).abs() < 1e-12);
            }
        }
        let z = y.matmul(&w);
        for i in 0..3 {
            for k in 0..4 {
                let s: f64 = (0..5).map(|j| y.get(i, j) * w.get(j, k)).sum();
                assert!((z.get(i, k) - s).abs() < 1e-12);
            }
        }
        let mut acc = Array2::zeros(4, 5);
        acc.add_t_matmul(&x, &y);
        for a in 0..4 {
            for b in 0..5 {
                let s: f64 = (0..3).map(|n| x.get(n, a) * y.get(n, b)).sum();
                assert!((acc.get(a, b) - s).abs() < 1e-12);
            }
        }
    }
}
