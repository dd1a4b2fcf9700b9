//! Dense rank-0..3 tensors and the eager numeric primitives shared by the
//! gradient tape, the recurrence oracle and the attention block.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 3;

/// Floating-point width of a computation graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// Scalar type a [`Tensor`] can hold.
pub trait Element:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    const PRECISION: Precision;

    /// `C <- alpha * A * B + beta * C` over raw strided storage.
    ///
    /// # Safety
    /// Every index reachable through the given strides must be in bounds.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }

    /// Logistic function; every sigmoid in the crate goes through here.
    #[inline(always)]
    fn sigmoid(self) -> Self {
        Self::one() / (Self::one() + (-self).exp())
    }
}

impl Element for f32 {
    const PRECISION: Precision = Precision::F32;

    #[inline(always)]
    fn sigmoid(self) -> f32 {
        1.0 / (1.0 + exp_f32(-self))
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Element for f64 {
    const PRECISION: Precision = Precision::F64;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major matrix product over slices.
///
/// `op(A)` is `m x k`: stored `m x k` or, when `trans_a`, as `k x m`.
/// `op(B)` is `k x n`: stored `k x n` or, when `trans_b`, as `n x k`.
/// The result is written to (or, with `accumulate`, added into) `c` (`m x n`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<E: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[E],
    trans_a: bool,
    b: &[E],
    trans_b: bool,
    c: &mut [E],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs storage");
    assert_eq!(b.len(), k * n, "gemm: rhs storage");
    assert_eq!(c.len(), m * n, "gemm: output storage");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = E::zero());
        }
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { E::one() } else { E::zero() };
    // SAFETY: the storage lengths were checked against the logical shapes and
    // the strides above address exactly those row-major layouts.
    unsafe {
        E::gemm_raw(
            m,
            k,
            n,
            E::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Dimension list of a tensor (rank at most [`MAX_RANK`]).
#[derive(Clone, PartialEq, Eq, Hash, Debug, Default)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.len() > MAX_RANK {
            return Err(Error::InvalidShape {
                shape: dims,
                reason: format!("rank exceeds {MAX_RANK}"),
            });
        }
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Size of the last axis (1 for scalars).
    pub fn last(&self) -> usize {
        self.0.last().copied().unwrap_or(1)
    }
}

impl From<&[usize]> for Shape {
    fn from(d: &[usize]) -> Self {
        Shape::new(d.to_vec()).expect("rank <= 3")
    }
}

impl<const N: usize> From<[usize; N]> for Shape {
    fn from(d: [usize; N]) -> Self {
        Shape::new(d.to_vec()).expect("rank <= 3")
    }
}

/// Immutable dense tensor; clones share storage.
#[derive(Clone, PartialEq)]
pub struct Tensor<E> {
    shape: Shape,
    data: Arc<Vec<E>>,
}

impl<E: Debug> Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let n = self.data.len().min(8);
        write!(f, "Tensor{:?}{:?}", self.shape.0, &self.data[..n])?;
        if self.data.len() > n {
            write!(f, "..")?;
        }
        Ok(())
    }
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<E>) -> Result<Self> {
        let shape = Shape::new(shape)?;
        if shape.numel() != data.len() {
            return Err(Error::InvalidShape {
                shape: shape.0,
                reason: format!("holds {} values", data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        let shape = shape.into();
        let n = shape.numel();
        Tensor {
            shape,
            data: Arc::new(vec![E::zero(); n]),
        }
    }

    pub fn full(shape: impl Into<Shape>, value: E) -> Self {
        let shape = shape.into();
        let n = shape.numel();
        Tensor {
            shape,
            data: Arc::new(vec![value; n]),
        }
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: Shape(Vec::new()),
            data: Arc::new(vec![value]),
        }
    }

    pub fn from_fn(shape: impl Into<Shape>, mut f: impl FnMut(usize) -> E) -> Self {
        let shape = shape.into();
        let data = (0..shape.numel()).map(&mut f).collect();
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(
            [n, n],
            |i| if i / n == i % n { E::one() } else { E::zero() },
        )
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<E>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape.0
    }

    pub fn shape_obj(&self) -> &Shape {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.rank()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    /// Mutable access; copies the storage if it is shared.
    pub fn data_mut(&mut self) -> &mut [E] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<E> {
        Arc::try_unwrap(self.data).unwrap_or_else(|a| (*a).clone())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> E {
        assert_eq!(
            self.data.len(),
            1,
            "item() on tensor of shape {:?}",
            self.shape.0
        );
        self.data[0]
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.0[..] {
            [m, n] => Ok((m, n)),
            _ => Err(Error::InvalidShape {
                shape: self.shape.0.clone(),
                reason: "expected rank 2".into(),
            }),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.0[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(Error::InvalidShape {
                shape: self.shape.0.clone(),
                reason: "expected rank 3".into(),
            }),
        }
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = Shape::new(shape)?;
        if shape.numel() != self.len() {
            return Err(Error::shape("reshape", self.shape(), shape.dims()));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| F::of(v.f64())).collect()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<E>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shapes");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (*a - *b).abs().f64())
            .fold(0.0, f64::max)
    }

    pub fn sum(&self) -> E {
        self.data.iter().copied().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v.f64() * v.f64()).sum()
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn zip_map(
        &self,
        other: &Tensor<E>,
        op: &'static str,
        f: impl Fn(E, E) -> E,
    ) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, self.shape(), other.shape()));
        }
        Ok(Tensor::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn add(&self, other: &Tensor<E>) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<E>) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: E) -> Self {
        self.map(|v| v * c)
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid)
    }

    /// `1 - x` elementwise.
    pub fn one_minus(&self) -> Self {
        self.map(|v| E::one() - v)
    }

    fn row_vector_op(
        &self,
        vec: &Tensor<E>,
        op: &'static str,
        f: impl Fn(E, E) -> E,
    ) -> Result<Self> {
        let n = self.shape.last();
        if vec.rank() != 1 || vec.len() != n {
            return Err(Error::shape(op, self.shape(), vec.shape()));
        }
        let data = self
            .data
            .chunks(n.max(1))
            .flat_map(|row| row.iter().zip(vec.data.iter()).map(|(&a, &b)| f(a, b)))
            .collect();
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    /// Adds a length-`n` vector to every last-axis slice.
    pub fn add_row_vector(&self, vec: &Tensor<E>) -> Result<Self> {
        self.row_vector_op(vec, "add_row_vector", |a, b| a + b)
    }

    /// Multiplies every last-axis slice by a length-`n` vector.
    pub fn mul_row_vector(&self, vec: &Tensor<E>) -> Result<Self> {
        self.row_vector_op(vec, "mul_row_vector", |a, b| a * b)
    }

    /// Index `i` along the leading axis (copied out).
    pub fn select0(&self, i: usize) -> Result<Self> {
        let dims = self.shape();
        if dims.is_empty() || i >= dims[0] {
            return Err(Error::IndexOutOfRange {
                what: "select0",
                index: i,
                bound: dims.first().copied().unwrap_or(0),
            });
        }
        let inner: usize = dims[1..].iter().product();
        let data = self.data[i * inner..(i + 1) * inner].to_vec();
        Ok(Tensor::from_parts(Shape(dims[1..].to_vec()), data))
    }

    /// Columns `[start, start + len)` of the last axis.
    pub fn narrow_last(&self, start: usize, len: usize) -> Result<Self> {
        let n = self.shape.last();
        if start + len > n {
            return Err(Error::IndexOutOfRange {
                what: "narrow_last",
                index: start + len,
                bound: n,
            });
        }
        let data = self
            .data
            .chunks(n.max(1))
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut dims = self.shape.0.clone();
        *dims.last_mut().expect("rank >= 1") = len;
        Ok(Tensor::from_parts(Shape(dims), data))
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack0(parts: &[Tensor<E>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("stack0 of nothing".into()))?;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::shape("stack0", first.shape(), p.shape()));
            }
            data.extend_from_slice(&p.data);
        }
        let mut dims = vec![parts.len()];
        dims.extend_from_slice(first.shape());
        Ok(Tensor::from_parts(Shape::new(dims)?, data))
    }

    /// Swaps the first two axes of a rank-3 tensor.
    pub fn swap01(&self) -> Result<Self> {
        let (a, b, c) = self.dims3()?;
        let mut out = vec![E::zero(); self.len()];
        swap01_into(&self.data, a, b, c, &mut out);
        Ok(Tensor::from_parts(Shape(vec![b, a, c]), out))
    }

    /// Concatenates two rank-3 tensors along axis 1.
    pub fn concat1(&self, other: &Tensor<E>) -> Result<Self> {
        let (a0, a1, a2) = self.dims3()?;
        let (b0, b1, b2) = other.dims3()?;
        if a0 != b0 || a2 != b2 {
            return Err(Error::shape("concat1", self.shape(), other.shape()));
        }
        let mut out = Vec::with_capacity(self.len() + other.len());
        for i in 0..a0 {
            out.extend_from_slice(&self.data[i * a1 * a2..(i + 1) * a1 * a2]);
            out.extend_from_slice(&other.data[i * b1 * b2..(i + 1) * b1 * b2]);
        }
        Ok(Tensor::from_parts(Shape(vec![a0, a1 + b1, a2]), out))
    }

    /// Positions `[start, start + len)` of axis 1 of a rank-3 tensor.
    pub fn narrow1(&self, start: usize, len: usize) -> Result<Self> {
        let (a0, a1, a2) = self.dims3()?;
        if start + len > a1 {
            return Err(Error::IndexOutOfRange {
                what: "narrow1",
                index: start + len,
                bound: a1,
            });
        }
        let mut out = Vec::with_capacity(a0 * len * a2);
        for i in 0..a0 {
            let base = (i * a1 + start) * a2;
            out.extend_from_slice(&self.data[base..base + len * a2]);
        }
        Ok(Tensor::from_parts(Shape(vec![a0, len, a2]), out))
    }
}

#[inline(always)]
pub(crate) fn sigmoid<E: Element>(x: E) -> E {
    x.sigmoid()
}

/// Branch-free `exp` for 32-bit floats (range reduction by `ln 2` and a
/// degree-6 polynomial, within 2 ulp of `f32::exp` on `[-87, 88]`) that the
/// compiler can vectorize, unlike the libm call. Inputs are clamped to that
/// range; NaN propagates.
#[inline(always)]
pub fn exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    // Adding and subtracting 1.5 * 2^23 rounds to the nearest integer.
    const ROUND: f32 = 12_582_912.0;
    let xc = x.clamp(-87.0, 88.0);
    let shifted = xc * LOG2E + ROUND;
    let n = shifted - ROUND;
    let r = xc - n * LN2_HI - n * LN2_LO;
    let p = 1.987_569_1e-4;
    let p = p * r + 1.398_199_9e-3;
    let p = p * r + 8.333_452e-3;
    let p = p * r + 4.166_579_6e-2;
    let p = p * r + 1.666_666_5e-1;
    let p = p * r + 0.5;
    let y = p * r * r + r + 1.0;
    // The low mantissa bits of `shifted` hold `n` offset by 2^22.
    let n_int = (shifted.to_bits() as i32).wrapping_sub(0x4B40_0000);
    let scale = f32::from_bits((n_int.wrapping_add(127) as u32) << 23);
    // NaN survives the clamp and the polynomial.
    y * scale
}

pub(crate) fn swap01_into<E: Copy>(src: &[E], a: usize, b: usize, c: usize, out: &mut [E]) {
    for i in 0..a {
        for j in 0..b {
            let s = (i * b + j) * c;
            let d = (j * a + i) * c;
            out[d..d + c].copy_from_slice(&src[s..s + c]);
        }
    }
}

/// Standard matrix product `a (m x k) * b (k x n)`.
pub fn matmul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![E::zero(); m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Ok(Tensor::from_parts(Shape(vec![m, n]), out))
}

/// In-place stable softmax of each length-`n` row.
pub(crate) fn softmax_rows_inplace<E: Element>(x: &mut [E], n: usize) {
    if n == 0 {
        return;
    }
    for row in x.chunks_mut(n) {
        let max = row.iter().copied().fold(E::neg_infinity(), E::max);
        let mut total = E::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        let inv = E::one() / total;
        row.iter_mut().for_each(|v| *v = *v * inv);
    }
}

/// Row-wise softmax over the last axis.
pub fn softmax_rows<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    if !x.all_finite() {
        return Err(Error::NonFinite {
            op: "softmax_rows".into(),
        });
    }
    let mut out = x.data().to_vec();
    softmax_rows_inplace(&mut out, x.shape_obj().last());
    Ok(Tensor::from_parts(x.shape_obj().clone(), out))
}

/// Layer normalisation statistics saved for the backward pass.
pub(crate) struct LayerNormOut<E> {
    pub out: Vec<E>,
    pub xhat: Vec<E>,
    pub rstd: Vec<E>,
}

pub(crate) fn layer_norm_forward<E: Element>(
    x: &[E],
    n: usize,
    gain: &[E],
    bias: &[E],
    eps: E,
) -> LayerNormOut<E> {
    let rows = x.len().checked_div(n).unwrap_or(0);
    let mut out = vec![E::zero(); x.len()];
    let mut xhat = vec![E::zero(); x.len()];
    let mut rstd = vec![E::zero(); rows];
    let nf = E::of(n as f64);
    for r in 0..rows {
        let row = &x[r * n..(r + 1) * n];
        let mean = row.iter().copied().sum::<E>() / nf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / nf;
        let rs = E::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for i in 0..n {
            let h = (row[i] - mean) * rs;
            xhat[r * n + i] = h;
            out[r * n + i] = h * gain[i] + bias[i];
        }
    }
    LayerNormOut { out, xhat, rstd }
}

/// `(x - mean) / sqrt(var + eps) * gain + bias` over the last axis, with the
/// biased (population) variance.
pub fn layer_norm<E: Element>(
    x: &Tensor<E>,
    gain: &Tensor<E>,
    bias: &Tensor<E>,
    eps: E,
) -> Result<Tensor<E>> {
    let n = x.shape_obj().last();
    if gain.shape() != [n] || bias.shape() != [n] {
        return Err(Error::shape("layer_norm", x.shape(), gain.shape()));
    }
    let res = layer_norm_forward(x.data(), n, gain.data(), bias.data(), eps);
    Ok(Tensor::from_parts(x.shape_obj().clone(), res.out))
}

/// Per-row log-softmax normaliser `max + ln(sum(exp(x - max)))`.
pub(crate) fn log_sum_exp<E: Element>(row: &[E]) -> E {
    let max = row.iter().copied().fold(E::neg_infinity(), E::max);
    let total: E = row.iter().map(|&v| (v - max).exp()).sum();
    max + total.ln()
}

pub(crate) fn check_targets(targets: &[usize], vocab: usize) -> Result<()> {
    match targets.iter().find(|&&t| t >= vocab) {
        Some(&t) => Err(Error::IndexOutOfRange {
            what: "cross_entropy target",
            index: t,
            bound: vocab,
        }),
        None => Ok(()),
    }
}

/// Mean negative log-likelihood (nats) of `targets` under row-wise softmax
/// of `logits` (`N x V`).
pub fn cross_entropy_logits<E: Element>(logits: &Tensor<E>, targets: &[usize]) -> Result<E> {
    let (rows, vocab) = logits.dims2()?;
    if targets.len() != rows {
        return Err(Error::shape(
            "cross_entropy_logits",
            logits.shape(),
            &[targets.len()],
        ));
    }
    check_targets(targets, vocab)?;
    if rows == 0 {
        return Ok(E::zero());
    }
    let total: E = logits
        .data()
        .chunks(vocab)
        .zip(targets)
        .map(|(row, &t)| log_sum_exp(row) - row[t])
        .sum();
    Ok(total / E::of(rows as f64))
}

/// Converts a mean NLL in nats to bits per character.
pub fn nats_to_bpc(nll_nats: f64) -> f64 {
    nll_nats / std::f64::consts::LN_2
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fast_exp_matches_libm() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut worst = 0.0f64;
        for i in 0..200_000 {
            let x: f32 = if i < 100 {
                i as f32 - 50.0
            } else {
                rng.gen_range(-87.0..88.0)
            };
            let (got, want) = (exp_f32(x) as f64, (x as f64).exp());
            worst = worst.max((got - want).abs() / want);
        }
        assert!(worst < 4.0 * f32::EPSILON as f64, "{worst:e}");
        assert_eq!(exp_f32(0.0), 1.0);
        assert!(exp_f32(f32::NAN).is_nan());
        assert!(exp_f32(f32::NEG_INFINITY) >= 0.0 && exp_f32(f32::NEG_INFINITY) < 1e-37);
        assert!(exp_f32(f32::INFINITY).is_finite());
        assert_eq!(1.0f32.sigmoid(), 1.0 / (1.0 + exp_f32(-1.0)));
        assert_eq!(f32::INFINITY.sigmoid(), 1.0);
        assert!(f32::NEG_INFINITY.sigmoid() < 1e-37);
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn naive_matmul(a: &Tensor<f32>, b: &Tensor<f32>) -> Tensor<f32> {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f64;
                for l in 0..k {
                    s += a.data()[i * k + l] as f64 * b.data()[l * n + j] as f64;
                }
                out[i * n + j] = s as f32;
            }
        }
        Tensor::new([m, n], out).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[3, 3], &mut rng);
        assert_eq!(matmul(&Tensor::eye(3), &a).unwrap(), a);
        let two = Tensor::new([1, 1], vec![2.0f32]).unwrap();
        let three = Tensor::new([1, 1], vec![3.0f32]).unwrap();
        assert_eq!(matmul(&two, &three).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&[7, 5], &mut rng);
        let b = random(&[5, 4], &mut rng);
        let fast = matmul(&a, &b).unwrap();
        assert!(fast.max_abs_diff(&naive_matmul(&a, &b)) < 1e-6);
        // Bitwise deterministic across runs.
        assert_eq!(fast.data(), matmul(&a, &b).unwrap().data());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros([2, 3]);
        let b = Tensor::<f32>::zeros([4, 2]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn rank_four_is_rejected() {
        assert!(Tensor::<f32>::new(vec![1, 1, 1, 1], vec![0.0]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let x = Tensor::new([1, 2], vec![0.0f64, 0.0]).unwrap();
        assert_eq!(softmax_rows(&x).unwrap().data(), &[0.5, 0.5]);
        for c in [-50.0, 0.0, 3.5, 1e6] {
            let x = Tensor::new([1, 1], vec![c]).unwrap();
            assert_eq!(softmax_rows(&x).unwrap().data(), &[1.0f64]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Tensor<f64> = Tensor::from_fn([4, 6], |_| rng.gen_range(-3.0..3.0));
        let shifted = x.map(|v| v + 1000.0);
        let (a, b) = (softmax_rows(&x).unwrap(), softmax_rows(&shifted).unwrap());
        assert!(a.max_abs_diff(&b) < 1e-7);
        let bad = Tensor::new([1, 2], vec![f64::NAN, 0.0]).unwrap();
        assert!(softmax_rows(&bad).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let one = Tensor::full([2], 1.0f64);
        let zero = Tensor::zeros([2]);
        let x = Tensor::new([2], vec![1.0f64, 3.0]).unwrap();
        assert_eq!(
            layer_norm(&x, &one, &zero, 0.0).unwrap().data(),
            &[-1.0, 1.0]
        );

        let bias = Tensor::new([3], vec![0.25f64, -1.0, 2.0]).unwrap();
        let x = Tensor::full([3], 5.0f64);
        let y = layer_norm(&x, &Tensor::full([3], 1.0), &bias, 1e-5).unwrap();
        assert!(y.max_abs_diff(&bias) < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 64;
        let x: Tensor<f64> = Tensor::from_fn([n], |_| rng.gen_range(-4.0..4.0));
        let y = layer_norm(&x, &Tensor::full([n], 1.0), &Tensor::zeros([n]), 1e-5).unwrap();
        let mean = y.sum() / n as f64;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 1e-6);
        assert!((1.0 - 1e-3..=1.0).contains(&var), "{var}");
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::<f64>::zeros([3, 256]);
        let nll = cross_entropy_logits(&uniform, &[0, 17, 255]).unwrap();
        assert!((nll - 256f64.ln()).abs() < 1e-12);

        let mut confident = vec![0.0f64; 5];
        confident[2] = 1000.0;
        let x = Tensor::new([1, 5], confident).unwrap();
        assert!(cross_entropy_logits(&x, &[2]).unwrap().abs() < 1e-12);
        assert!(matches!(
            cross_entropy_logits(&x, &[5]),
            Err(Error::IndexOutOfRange { index: 5, .. })
        ));

        // Oracle: explicit normalisation then log.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Tensor<f64> = Tensor::from_fn([4, 5], |_| rng.gen_range(-2.0..2.0));
        let targets = [0usize, 4, 2, 2];
        let mut oracle = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &x.data()[r * 5..(r + 1) * 5];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            oracle -= (row[t].exp() / z).ln();
        }
        oracle /= 4.0;
        assert!((cross_entropy_logits(&x, &targets).unwrap() - oracle).abs() < 1e-6);
    }

    #[test]
    fn bpc_conversion() {
        assert_eq!(nats_to_bpc(std::f64::consts::LN_2), 1.0);
        assert_eq!(nats_to_bpc(0.0), 0.0);
        assert!((nats_to_bpc(256f64.ln()) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn gemm_transposed_operands() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random(&[4, 3], &mut rng);
        let b = random(&[5, 3], &mut rng);
        // a * b^T
        let mut out = vec![0.0f32; 20];
        gemm(4, 3, 5, a.data(), false, b.data(), true, &mut out, false);
        let bt = Tensor::from_fn([3, 5], |i| b.data()[(i % 5) * 3 + i / 5]);
        let expect = naive_matmul(&a, &bt);
        let got = Tensor::new([4, 5], out).unwrap();
        assert!(got.max_abs_diff(&expect) < 1e-6);
        // a^T * a accumulated twice
        let mut out = vec![0.0f32; 9];
        gemm(3, 4, 3, a.data(), true, a.data(), false, &mut out, false);
        gemm(3, 4, 3, a.data(), true, a.data(), false, &mut out, true);
        let at = Tensor::from_fn([3, 4], |i| a.data()[(i % 4) * 3 + i / 4]);
        let expect = naive_matmul(&at, &a).scale(2.0);
        assert!(Tensor::new([3, 3], out).unwrap().max_abs_diff(&expect) < 1e-5);
    }

    #[test]
    fn swap_concat_narrow() {
        let x = Tensor::<f32>::from_fn([2, 3, 2], |i| i as f32);
        let s = x.swap01().unwrap();
        assert_eq!(s.shape(), &[3, 2, 2]);
        assert_eq!(s.swap01().unwrap(), x);
        let y = Tensor::<f32>::from_fn([2, 1, 2], |i| 100.0 + i as f32);
        let c = x.concat1(&y).unwrap();
        assert_eq!(c.shape(), &[2, 4, 2]);
        assert_eq!(c.narrow1(0, 3).unwrap(), x);
        assert_eq!(c.narrow1(3, 1).unwrap(), y);
    }
}
