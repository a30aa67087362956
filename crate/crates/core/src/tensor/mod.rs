//! Dense row-major `f64` tensors and the handful of kernels the simulator needs.
//!
//! Every reduction runs in a fixed loop order, so results are bit-reproducible
//! regardless of how callers schedule work around them.

pub mod conv;
pub mod kernels;
pub mod pool;
pub mod rng;

use std::fmt;

use crate::error::{Error, Result};

pub use conv::{conv2d, conv2d_backward, ConvGeom};
pub use pool::{pool2d, pool2d_backward, PoolMode, Pooled};
pub use rng::RngStream;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from external data, rejecting NaN/Inf.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor data at flat index {pos}")));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Internal constructor for values produced by our own kernels.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    fn flat_index(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return Err(Error::Index(format!(
                "index {index:?} has rank {}, tensor has rank {}",
                index.len(),
                self.shape.len()
            )));
        }
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            if i >= d {
                return Err(Error::Index(format!("{index:?} out of {:?}", self.shape)));
            }
            flat = flat * d + i;
        }
        Ok(flat)
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.flat_index(index)?])
    }

    pub fn set(&mut self, index: &[usize], value: f64) -> Result<()> {
        let i = self.flat_index(index)?;
        self.data[i] = value;
        Ok(())
    }

    /// Row `i` of a tensor viewed as `[shape[0], rest...]`.
    pub fn row(&self, i: usize) -> &[f64] {
        let stride = self.data.len() / self.shape[0].max(1);
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Serial left-to-right sum.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn transpose2(&self) -> Result<Self> {
        let (m, n) = self.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self::from_parts(vec![n, m], out))
    }

    pub(crate) fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[m, n] => Ok((m, n)),
            s => Err(Error::Dimension(format!("expected a matrix, got shape {s:?}"))),
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}[", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

/// Matrix product `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension(format!("matmul inner dimensions {k} and {k2} differ")));
    }
    let mut out = vec![0.0; m * n];
    kernels::gemm_nn(m, k, n, a.data(), b.data(), &mut out);
    Ok(Tensor::from_parts(vec![m, n], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        let n = rows[0].len();
        Tensor::new(&[rows.len(), n], rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    #[test]
    fn rejects_non_finite_input() {
        assert!(matches!(
            Tensor::new(&[2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(Tensor::new(&[2], vec![1.0, f64::INFINITY]).is_err());
        assert!(matches!(Tensor::new(&[3], vec![1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_identity_left() {
        let b = mat(&[&[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(matmul(&Tensor::identity(2), &b).unwrap(), b);
    }

    #[test]
    fn matmul_hand_values() {
        let a = mat(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = mat(&[&[5.0, 6.0], &[7.0, 8.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), mat(&[&[19.0, 22.0], &[43.0, 50.0]]));
    }

    #[test]
    fn matmul_zero_matrix() {
        let z = Tensor::zeros(&[3, 2]);
        let b = mat(&[&[1.5, -2.0, 3.0], &[0.25, 9.0, -1.0]]);
        let out = matmul(&z, &b).unwrap();
        assert_eq!(out.shape(), &[3, 3]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn transpose_roundtrip() {
        let a = mat(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        assert_eq!(a.transpose2().unwrap().transpose2().unwrap(), a);
    }

    #[test]
    fn indexing() {
        let mut t = Tensor::zeros(&[2, 3, 4]);
        t.set(&[1, 2, 3], 7.0).unwrap();
        assert_eq!(t.get(&[1, 2, 3]).unwrap(), 7.0);
        assert_eq!(t.data()[23], 7.0);
        assert!(t.get(&[2, 0, 0]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn matmul_right_identity_is_exact(m in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
                let mut rng = RngStream::new(seed, 0);
                let a = rng.uniform(&[m, n]).map(|v| v * 4.0 - 2.0);
                prop_assert_eq!(matmul(&a, &Tensor::identity(n)).unwrap(), a);
            }
        }
    }
}
