//! Dense row-major tensors and a reverse-mode autodiff tape.
//!
//! [`Tensor`] is a plain value: it carries no gradient state. Differentiation
//! happens on a [`Tape`], which records primitive applications over [`Var`]
//! handles and replays them backwards.

mod tape;

pub use tape::{Gradients, Tape, Var};

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// Element type tag, used by the checkpoint container.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ElemType {
    F32,
    F64,
}

impl ElemType {
    pub fn size(self) -> usize {
        match self {
            ElemType::F32 => 4,
            ElemType::F64 => 8,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            ElemType::F32 => 0,
            ElemType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ElemType::F32),
            1 => Some(ElemType::F64),
            _ => None,
        }
    }
}

/// Floating-point element usable in tensors.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + Sum + 'static
{
    const ELEM: ElemType;

    /// `c = alpha * a·b + beta * c` over raw strided storage.
    ///
    /// # Safety
    /// The pointers and strides must describe valid `m×k`, `k×n` and `m×n`
    /// matrices, with `c` not aliasing `a` or `b`.
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

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// True when no element is infinite or NaN.
    fn all_finite(xs: &[Self]) -> bool;

    /// `exp` for the activation functions. Implementations may trade the
    /// last ulp or two for a branch-free body that vectorizes.
    #[inline(always)]
    fn fast_exp(self) -> Self {
        self.exp()
    }

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

impl Scalar for f32 {
    const ELEM: ElemType = ElemType::F32;

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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }

    #[inline(always)]
    fn fast_exp(self) -> f32 {
        // Range reduction by ln 2 and a degree-7 polynomial on the remainder;
        // the clamp keeps 2^n a normal number. NaN passes through.
        const MAGIC: f32 = 12_582_912.0;
        let x = self.clamp(-87.0, 88.0);
        let shifted = x * std::f32::consts::LOG2_E + MAGIC;
        let nf = shifted - MAGIC;
        let n = shifted.to_bits() as i32 - MAGIC.to_bits() as i32;
        let r = x - nf * 0.693_359_4 + nf * 2.121_944_4e-4;
        let p = ((((1.987_569_1e-4 * r + 1.398_199_9e-3) * r + 8.333_452e-3) * r + 4.166_579_6e-2)
            * r
            + 1.666_666_5e-1)
            * r
            + 5.000_000_1e-1;
        let y = p * r * r + r + 1.0;
        y * f32::from_bits(((n + 127) as u32) << 23)
    }

    fn all_finite(xs: &[f32]) -> bool {
        // Adding one exponent ulp carries into the sign bit only when the
        // exponent is all ones (inf or NaN).
        const EXP: u32 = 0x7f80_0000;
        const ULP: u32 = 0x0080_0000;
        xs.iter()
            .fold(0, |acc, v| acc | ((v.to_bits() & EXP) + ULP))
            >> 31
            == 0
    }
}

impl Scalar for f64 {
    const ELEM: ElemType = ElemType::F64;

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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }

    fn all_finite(xs: &[f64]) -> bool {
        const EXP: u64 = 0x7ff0_0000_0000_0000;
        const ULP: u64 = 0x0010_0000_0000_0000;
        xs.iter()
            .fold(0, |acc, v| acc | ((v.to_bits() & EXP) + ULP))
            >> 63
            == 0
    }
}

/// `c (+)= op(a) · op(b)` where `a` is stored `m×k` (or `k×m` when
/// `trans_a`) and `b` is stored `k×n` (or `n×k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
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
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: lengths were asserted above and `c` is a distinct &mut borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
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
        );
    }
}

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Input(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(dim_err(
                "tensor",
                format!("shape {shape:?} needs {numel} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor whose shape is known to match; panics otherwise.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(dim_err("from_rows", "ragged rows"));
        }
        Self::new(
            vec![r, c],
            rows.iter().flat_map(|row| row.iter().copied()).collect(),
        )
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    /// Entries drawn from `N(0, std²)`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let v: f64 = StandardNormal.sample(rng);
            T::lit(v * std)
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Leading extent of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Trailing extent (the row width).
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        T::all_finite(&self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(dim_err(
                "zip_map",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    /// Plain (tape-free) matrix product.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(dim_err(
                "matmul",
                format!("{:?} x {:?}", self.shape, other.shape),
            ));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            &self.data,
            false,
            &other.data,
            false,
            &mut out,
            false,
        );
        Ok(Self::from_parts(vec![m, n], out))
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(dim_err("transpose", format!("{:?}", self.shape)));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Ok(Self::from_parts(vec![c, r], out))
    }

    /// Selects rows by index.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let c = self.cols();
        let r = self.rows();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::Input(format!("row {i} out of range for {r} rows")));
            }
            out.extend_from_slice(self.row(i));
        }
        Tensor::new(vec![idx.len(), c], out)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        )
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data
            .iter()
            .map(|v| v.to_f64().unwrap_or(f64::NAN))
            .collect()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().to_f64().unwrap_or(f64::INFINITY))
            .fold(0.0, f64::max)
    }

    pub fn sum_sq(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v * v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_exp_tracks_std() {
        let mut worst = 0.0f64;
        for i in -8700..=8800 {
            let x = i as f32 * 0.01;
            let exact = (x as f64).exp();
            worst = worst.max(((x.fast_exp() as f64) - exact).abs() / exact);
        }
        assert!(worst < 5e-7, "relative error {worst}");
        assert!(f32::NAN.fast_exp().is_nan());
        assert!(f32::INFINITY.fast_exp().is_finite());
        assert!(f32::NEG_INFINITY.fast_exp() >= 0.0);
    }

    #[test]
    fn finiteness_scan() {
        for len in [0, 1, 7, 8, 9, 33] {
            let mut xs = vec![1.5f32; len];
            assert!(f32::all_finite(&xs));
            if len > 0 {
                for bad in [f32::NAN, f32::INFINITY, f32::NEG_INFINITY] {
                    xs[len - 1] = bad;
                    assert!(!f32::all_finite(&xs));
                    xs[0] = bad;
                    assert!(!f32::all_finite(&xs));
                    xs = vec![1.5; len];
                }
            }
        }
        assert!(f32::all_finite(&[f32::MAX, f32::MIN, 1e-45, -0.0]));
        assert!(f64::all_finite(&[f64::MAX, f64::MIN_POSITIVE * 0.5, 0.0]));
        assert!(!f64::all_finite(&[0.0, 0.0, 0.0, 0.0, f64::NAN]));
        assert!(!f64::all_finite(&[f64::NEG_INFINITY]));
    }
}
