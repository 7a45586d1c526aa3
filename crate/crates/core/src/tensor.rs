//! Dense row-major tensors and the matrix kernels everything else is built on.
//!
//! All reductions accumulate left to right along the reduced axis. The matrix
//! kernels in particular keep one running sum per output element and add the
//! inner-dimension terms in ascending index order, so a product computed in
//! pieces (first `k0` inner terms, then the rest into the same accumulator) is
//! bit-identical to the product computed in one pass. The nested expert code
//! relies on this.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element type stored in checkpoints.
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

/// Floating point element usable by the tensors, the autodiff graph and the
/// checkpoint container.
pub trait Real:
    Float + Default + Debug + Display + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    const DTYPE: DType;

    fn cast(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    fn cast(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    fn cast(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Builds a matrix from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::cast(v)).collect())
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::contract(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        Ok(Self {
            shape: vec![c, r],
            data: transpose(&self.data, r, c),
        })
    }

    /// Matrix product `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        matmul_acc(&self.data, &other.data, &mut out, m, k, n);
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Rows `[start, end)` of the first axis, as a new tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        let cols: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Self {
            shape,
            data: self.data[start * cols..end * cols].to_vec(),
        }
    }

    /// Columns `[0, width)` of a matrix.
    pub fn prefix_cols(&self, width: usize) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if width > c {
            return Err(Error::Index {
                what: "column prefix",
                index: width,
                limit: c,
            });
        }
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c..i * c + width]);
        }
        Ok(Self {
            shape: vec![r, width],
            data,
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Row-major transpose of an `r × c` buffer.
pub fn transpose<T: Copy>(data: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(r * c);
    for j in 0..c {
        for i in 0..r {
            out.push(data[i * c + j]);
        }
    }
    out
}

const MR: usize = 4;
const NR: usize = 64;

/// `c += a · b` with `a: m × k`, `b: k × n`, `c: m × n`.
///
/// Each `c[i][j]` receives its inner-dimension terms in ascending `k` order,
/// starting from its current value.
pub fn matmul_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    matmul_acc_range(a, k, b, n, c, 0, k);
}

/// Accumulates inner indices `k0..k1` of `a: m × a_cols` against rows
/// `k0..k1` of `b: · × n` into `c: m × n`.
///
/// Continuing a previous call that covered `0..k0` reproduces a single
/// `0..k1` product bit for bit.
pub fn matmul_acc_range<T: Real>(
    a: &[T],
    a_cols: usize,
    b: &[T],
    n: usize,
    c: &mut [T],
    k0: usize,
    k1: usize,
) {
    if n == 0 || k0 >= k1 || a_cols == 0 {
        return;
    }
    let m = c.len() / n;
    let mut i0 = 0;
    while i0 < m {
        let mr = MR.min(m - i0);
        let mut j0 = 0;
        while j0 < n {
            let nr = NR.min(n - j0);
            if mr == MR && nr == NR {
                tile_full(a, a_cols, b, n, c, k0, k1, i0, j0);
            } else {
                for i in i0..i0 + mr {
                    let a_row = &a[i * a_cols..(i + 1) * a_cols];
                    let c_row = &mut c[i * n + j0..i * n + j0 + nr];
                    for kk in k0..k1 {
                        let a_ik = a_row[kk];
                        let b_row = &b[kk * n + j0..kk * n + j0 + nr];
                        for (c_ij, &b_kj) in c_row.iter_mut().zip(b_row) {
                            *c_ij += a_ik * b_kj;
                        }
                    }
                }
            }
            j0 += nr;
        }
        i0 += mr;
    }
}

/// One `MR × NR` block of `c`, held in registers across the inner loop.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn tile_full<T: Real>(
    a: &[T],
    a_cols: usize,
    b: &[T],
    n: usize,
    c: &mut [T],
    k0: usize,
    k1: usize,
    i0: usize,
    j0: usize,
) {
    let mut acc = [[T::zero(); NR]; MR];
    for (r, row) in acc.iter_mut().enumerate() {
        row.copy_from_slice(&c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR]);
    }
    for kk in k0..k1 {
        let b_row: &[T; NR] = b[kk * n + j0..kk * n + j0 + NR]
            .try_into()
            .expect("NR wide");
        for (r, row) in acc.iter_mut().enumerate() {
            let a_ik = a[(i0 + r) * a_cols + kk];
            for (c_ij, &b_kj) in row.iter_mut().zip(b_row) {
                *c_ij += a_ik * b_kj;
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(row);
    }
}

/// `c += aᵀ · b` with `a: m × k`, `b: m × n`, `c: k × n`; terms are added in
/// ascending row order of `a`.
pub fn matmul_tn_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    if n == 0 || k == 0 || m == 0 {
        return;
    }
    let at = transpose(a, m, k);
    matmul_acc(&at, b, c, k, m, n);
}
