//! Dense row-major `f64` tensors and the small linear-algebra kernel set
//! shared by every solver in the crate.
//!
//! Tensors are immutable after construction and cheap to clone relative to
//! the solver work done on them; all operations are pure functions.

mod io;
mod linalg;

pub use io::{decode_tensor, encode_tensor, read_tensor, write_csv, write_tensor, MAGIC};
pub use linalg::{
    power_method_sigma_max_sq, psd_sqrt, soft_threshold, solve_spd, sym_eigen, sym_eigenvalues,
    SpdFactor,
};

use crate::error::{Error, Result};

/// Dense n-dimensional array of `f64`, row-major. An empty shape denotes a
/// scalar (one element).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn shape_len(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a tensor, checking that `data.len()` matches the shape product.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape_len(&shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} requires {} elements, got {}",
                shape,
                shape_len(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape_len(shape)],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn diag(entries: &[f64]) -> Self {
        let n = entries.len();
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = entries[i];
        }
        t
    }

    /// 2-D tensor from rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(m * n);
        for r in rows {
            if r.len() != n {
                return Err(Error::shape(format!(
                    "ragged rows: expected width {}, got {}",
                    n,
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![m, n], data)
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Scalar value; errors unless the tensor holds exactly one element.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::shape(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn rows(&self) -> usize {
        *self.shape.first().unwrap_or(&1)
    }

    pub fn cols(&self) -> usize {
        *self.shape.get(1).unwrap_or(&1)
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub(crate) fn set2(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{}: {:?} vs {:?}",
                op, self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "elementwise multiply")?;
        Ok(self.zip_map(other, |a, b| a * b))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| c * v)
    }

    pub fn neg(&self) -> Tensor {
        self.map(|v| -v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn norm_l1(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// 2-D transpose. Rank-1 tensors are treated as a single column.
    pub fn transpose(&self) -> Tensor {
        match self.rank() {
            0 => self.clone(),
            1 => Tensor {
                shape: vec![1, self.data.len()],
                data: self.data.clone(),
            },
            2 => {
                let (m, n) = (self.shape[0], self.shape[1]);
                let mut out = Tensor::zeros(&[n, m]);
                for i in 0..m {
                    for j in 0..n {
                        out.data[j * m + i] = self.data[i * n + j];
                    }
                }
                out
            }
            _ => panic!("transpose only defined for rank <= 2, got {:?}", self.shape),
        }
    }

    /// Matrix product of 2-D operands; a rank-1 right operand of length k is
    /// treated as a k-by-1 column and the result flattened back to rank 1.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let flatten = other.rank() == 1;
        let (m, k) = match self.rank() {
            2 => (self.shape[0], self.shape[1]),
            r => {
                return Err(Error::shape(format!(
                    "matmul left operand must be 2-D, got rank {} shape {:?}",
                    r, self.shape
                )))
            }
        };
        let (k2, n) = match other.rank() {
            1 => (other.shape[0], 1),
            2 => (other.shape[0], other.shape[1]),
            r => {
                return Err(Error::shape(format!(
                    "matmul right operand must be 1-D or 2-D, got rank {} shape {:?}",
                    r, other.shape
                )))
            }
        };
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner extents differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        // i-k-j loop order keeps the inner loop contiguous in both operands.
        for i in 0..m {
            for kk in 0..k {
                let a = self.data[i * k + kk];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[kk * n..kk * n + n];
                let crow = &mut out[i * n..i * n + n];
                for j in 0..n {
                    crow[j] += a * brow[j];
                }
            }
        }
        let shape = if flatten { vec![m] } else { vec![m, n] };
        Tensor::new(shape, out)
    }

    /// `self^T * other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.transpose().matmul(other)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        // Independent triple-loop oracle.
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at2(i, p) * b.at2(p, j);
                }
                out.set2(i, j, s);
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let prod = Tensor::eye(2).matmul(&a).unwrap();
        assert_eq!(prod, a);
    }

    #[test]
    fn matmul_hand_product() {
        let a = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = crate::rng::Prng::seed(7).into_rng();
        let a = crate::rng::gaussian_tensor(&mut rng, &[5, 4]);
        let b = crate::rng::gaussian_tensor(&mut rng, &[4, 3]);
        let fast = a.matmul(&b).unwrap();
        let slow = naive_matmul(&a, &b);
        for (x, y) in fast.data().iter().zip(slow.data()) {
            assert!((x - y).abs() <= 1e-12, "{} vs {}", x, y);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{}", err);
    }

    #[test]
    fn scalar_shape_is_empty() {
        let s = Tensor::scalar(3.5);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.len(), 1);
        assert_eq!(s.item().unwrap(), 3.5);
    }

    proptest! {
        #[test]
        fn matmul_associative(seed in 0u64..500) {
            let mut rng = crate::rng::Prng::seed(seed).into_rng();
            let a = crate::rng::gaussian_tensor(&mut rng, &[4, 3]);
            let b = crate::rng::gaussian_tensor(&mut rng, &[3, 5]);
            let c = crate::rng::gaussian_tensor(&mut rng, &[5, 2]);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let diff = left.sub(&right).unwrap().norm_l2();
            let scale = right.norm_l2().max(1.0);
            prop_assert!(diff / scale <= 1e-9);
        }
    }
}
