//! Dense row-major tensors over f32 or f64.
//!
//! f32 is the training/inference default; gradient tests run the same code in
//! f64 so central finite differences at eps=1e-5 stay meaningful.

use rand::Rng;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use super::NnError;

/// Scalar element type for all tensor math.
pub trait Scalar:
    num_traits::Float
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self {
        <Self as num_traits::NumCast>::from(x).expect("f64 -> scalar conversion")
    }
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("scalar -> f64 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?} {:?}", self.shape, self.data)
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![S::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: S) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self, NnError> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(NnError::Shape(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn rand_uniform<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Self {
        let data = (0..shape.iter().product())
            .map(|_| S::from_f64(rng.gen_range(lo..hi)))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn rand_normal<R: Rng>(rng: &mut R, shape: &[usize], mean: f64, std: f64) -> Self {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(mean, std).expect("valid normal");
        let data = (0..shape.iter().product())
            .map(|_| S::from_f64(normal.sample(rng)))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// The single element of a scalar-shaped tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Rows/cols of a 2-D tensor.
    pub fn dims2(&self) -> (usize, usize) {
        debug_assert_eq!(self.shape.len(), 2, "dims2 on shape {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    pub fn row(&self, i: usize) -> &[S] {
        let (_, m) = self.dims2();
        &self.data[i * m..(i + 1) * m]
    }

    pub fn at(&self, i: usize, j: usize) -> S {
        let (_, m) = self.dims2();
        self.data[i * m + j]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape == other.shape
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Self {
        debug_assert!(self.same_shape(other));
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, c: S) -> Self {
        self.map(|v| v * c)
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    /// `[n,k] x [k,m] -> [n,m]`.
    pub fn matmul(&self, rhs: &Self) -> Self {
        let (n, k) = self.dims2();
        let (k2, m) = rhs.dims2();
        debug_assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![S::zero(); n * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * m..(i + 1) * m];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &rhs.data[p * m..(p + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Self {
            shape: vec![n, m],
            data: out,
        }
    }

    /// `[n,k] x [m,k]^T -> [n,m]` (rows dotted with rows).
    pub fn matmul_nt(&self, rhs: &Self) -> Self {
        let (n, k) = self.dims2();
        let (m, k2) = rhs.dims2();
        debug_assert_eq!(k, k2, "matmul_nt inner dims {k} vs {k2}");
        let mut out = vec![S::zero(); n * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let b_row = &rhs.data[j * k..(j + 1) * k];
                let mut acc = S::zero();
                for (&a, &b) in a_row.iter().zip(b_row) {
                    acc += a * b;
                }
                out[i * m + j] = acc;
            }
        }
        Self {
            shape: vec![n, m],
            data: out,
        }
    }

    /// `[n,k]^T x [n,m] -> [k,m]`.
    pub fn matmul_tn(&self, rhs: &Self) -> Self {
        let (n, k) = self.dims2();
        let (n2, m) = rhs.dims2();
        debug_assert_eq!(n, n2, "matmul_tn outer dims {n} vs {n2}");
        let mut out = vec![S::zero(); k * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            let b_row = &rhs.data[i * m..(i + 1) * m];
            for (p, &a) in a_row.iter().enumerate() {
                let o_row = &mut out[p * m..(p + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Self {
            shape: vec![k, m],
            data: out,
        }
    }

    pub fn transpose(&self) -> Self {
        let (n, m) = self.dims2();
        let mut out = vec![S::zero(); n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = self.data[i * m + j];
            }
        }
        Self {
            shape: vec![m, n],
            data: out,
        }
    }

    /// Column sums of a 2-D tensor, shape `[m]`.
    pub fn col_sums(&self) -> Self {
        let (n, m) = self.dims2();
        let mut out = vec![S::zero(); m];
        for i in 0..n {
            for (o, &v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        Self {
            shape: vec![m],
            data: out,
        }
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        let (n, m) = self.dims2();
        debug_assert!(start <= end && end <= n);
        Self {
            shape: vec![end - start, m],
            data: self.data[start * m..end * m].to_vec(),
        }
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Self {
        let (n, m) = self.dims2();
        debug_assert!(start <= end && end <= m);
        let mut data = Vec::with_capacity(n * (end - start));
        for i in 0..n {
            data.extend_from_slice(&self.data[i * m + start..i * m + end]);
        }
        Self {
            shape: vec![n, end - start],
            data,
        }
    }

    pub fn concat_rows(parts: &[&Self]) -> Self {
        debug_assert!(!parts.is_empty());
        let m = parts[0].dims2().1;
        let n: usize = parts.iter().map(|p| p.dims2().0).sum();
        let mut data = Vec::with_capacity(n * m);
        for p in parts {
            debug_assert_eq!(p.dims2().1, m);
            data.extend_from_slice(&p.data);
        }
        Self {
            shape: vec![n, m],
            data,
        }
    }

    pub fn concat_cols(parts: &[&Self]) -> Self {
        debug_assert!(!parts.is_empty());
        let n = parts[0].dims2().0;
        let m: usize = parts.iter().map(|p| p.dims2().1).sum();
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            for p in parts {
                debug_assert_eq!(p.dims2().0, n);
                data.extend_from_slice(p.row(i));
            }
        }
        Self {
            shape: vec![n, m],
            data,
        }
    }

    /// Mean over rows, shape `[1,m]`.
    pub fn mean_rows(&self) -> Self {
        let (n, m) = self.dims2();
        debug_assert!(n > 0);
        let inv = S::from_f64(1.0 / n as f64);
        let mut sums = self.col_sums();
        for v in sums.data.iter_mut() {
            *v *= inv;
        }
        Self {
            shape: vec![1, m],
            data: sums.data,
        }
    }

    /// Frobenius norm.
    pub fn norm(&self) -> S {
        self.data.iter().map(|&v| v * v).sum::<S>().sqrt()
    }

    /// Converts element type (used when writing f32 checkpoints from f64 models).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.as_f64())).collect(),
        }
    }
}

/// Index of the maximum element; ties break to the lowest index.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    debug_assert!(!row.is_empty());
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
