//! Factorizations and elementwise operators used by the solvers.

use super::Tensor;
use crate::error::{Error, Result};

/// Element-wise soft threshold `sign(x) * max(0, |x| - beta)`.
///
/// At `|x| == beta` the result is exactly zero, which is the convention the
/// rest of the crate (including gradients) relies on.
pub fn soft_threshold(x: &Tensor, beta: f64) -> Result<Tensor> {
    if beta < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "soft threshold requires beta >= 0, got {}",
            beta
        )));
    }
    Ok(x.map(|v| v.signum() * (v.abs() - beta).max(0.0)))
}

/// Cached Cholesky factorization of a symmetric positive definite matrix.
///
/// Solvers that repeatedly solve against the same matrix (ADMM keeps
/// `H^T H + 2*lambda*I` fixed across iterations) factor once and reuse.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    /// Lower-triangular factor, row-major n-by-n.
    l: Vec<f64>,
    n: usize,
}

const SYMMETRY_TOL: f64 = 1e-10;
const PIVOT_TOL: f64 = 1e-12;

impl SpdFactor {
    pub fn new(a: &Tensor) -> Result<Self> {
        if a.rank() != 2 || a.rows() != a.cols() {
            return Err(Error::shape(format!(
                "SPD factorization requires a square matrix, got {:?}",
                a.shape()
            )));
        }
        let n = a.rows();
        let tol = SYMMETRY_TOL * a.max_abs().max(1.0);
        for i in 0..n {
            for j in (i + 1)..n {
                if (a.at2(i, j) - a.at2(j, i)).abs() > tol {
                    return Err(Error::InvalidArgument(format!(
                        "matrix is not symmetric at ({}, {}): {} vs {}",
                        i,
                        j,
                        a.at2(i, j),
                        a.at2(j, i)
                    )));
                }
            }
        }
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = a.at2(i, j);
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if s <= PIVOT_TOL {
                        return Err(Error::NotSpd { index: i, pivot: s });
                    }
                    l[i * n + i] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        Ok(SpdFactor { l, n })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    fn solve_column(&self, b: &mut [f64]) {
        let n = self.n;
        // forward: L y = b
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[i * n + k] * b[k];
            }
            b[i] = s / self.l[i * n + i];
        }
        // backward: L^T x = y
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n {
                s -= self.l[k * n + i] * b[k];
            }
            b[i] = s / self.l[i * n + i];
        }
    }

    /// Solves `A x = b` for each column of `b` (rank 1 or 2).
    pub fn solve(&self, b: &Tensor) -> Result<Tensor> {
        if b.rows() != self.n {
            return Err(Error::shape(format!(
                "solve: factor is {}x{} but rhs has {} rows (shape {:?})",
                self.n,
                self.n,
                b.rows(),
                b.shape()
            )));
        }
        let cols = b.cols();
        let mut out = b.clone();
        let mut col = vec![0.0; self.n];
        for j in 0..cols {
            for i in 0..self.n {
                col[i] = b.data()[i * cols + j];
            }
            self.solve_column(&mut col);
            for i in 0..self.n {
                out.data_mut()[i * cols + j] = col[i];
            }
        }
        Ok(out)
    }
}

/// One-shot SPD solve; factor via [`SpdFactor`] directly when the factor can
/// be reused.
pub fn solve_spd(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    SpdFactor::new(a)?.solve(b)
}

/// Largest squared singular value of `h`, by 100 power iterations on
/// `H^T H` from a fixed deterministic start vector.
pub fn power_method_sigma_max_sq(h: &Tensor) -> f64 {
    let n = h.cols();
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64) * 1e-3).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    let mut v = Tensor::vector(v);
    let mut lambda = 0.0;
    for _ in 0..100 {
        let hv = h.matmul(&v).expect("power method shape");
        let w = h.t_matmul(&hv).expect("power method shape");
        lambda = w.norm_l2();
        if lambda == 0.0 {
            return 0.0;
        }
        v = w.scale(1.0 / lambda);
    }
    lambda
}

/// Eigen-decomposition of a symmetric matrix via cyclic Jacobi rotations.
/// Returns eigenvalues ascending and the matrix whose columns are the
/// matching eigenvectors.
pub fn sym_eigen(a: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    if a.rank() != 2 || a.rows() != a.cols() {
        return Err(Error::shape(format!(
            "eigen-decomposition requires a square matrix, got {:?}",
            a.shape()
        )));
    }
    let n = a.rows();
    let mut m: Vec<f64> = a.data().to_vec();
    // symmetrize to be safe against roundoff in the caller
    for i in 0..n {
        for j in 0..n {
            let avg = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = avg;
            m[j * n + i] = avg;
        }
    }
    let mut vecs = Tensor::eye(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if off.sqrt() <= 1e-14 * (1.0 + m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = vecs.at2(k, p);
                    let vkq = vecs.at2(k, q);
                    vecs.set2(k, p, c * vkp - s * vkq);
                    vecs.set2(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[i * n + i].partial_cmp(&m[j * n + j]).unwrap());
    let eig: Vec<f64> = order.iter().map(|&i| m[i * n + i]).collect();
    let mut sorted_vecs = Tensor::zeros(&[n, n]);
    for (col, &src) in order.iter().enumerate() {
        for row in 0..n {
            sorted_vecs.set2(row, col, vecs.at2(row, src));
        }
    }
    Ok((eig, sorted_vecs))
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(a: &Tensor) -> Result<Vec<f64>> {
    Ok(sym_eigen(a)?.0)
}

/// Symmetric PSD square root `U diag(sqrt(max(eig, 0))) U^T`; small negative
/// eigenvalues from roundoff are clamped, genuinely indefinite input is
/// rejected.
pub fn psd_sqrt(a: &Tensor) -> Result<Tensor> {
    let (eig, u) = sym_eigen(a)?;
    let scale = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut root = Tensor::zeros(&[a.rows(), a.rows()]);
    for (i, &l) in eig.iter().enumerate() {
        if l < -1e-8 * scale.max(1.0) {
            return Err(Error::InvalidArgument(format!(
                "matrix is not positive semidefinite: eigenvalue {}",
                l
            )));
        }
        root.set2(i, i, l.max(0.0).sqrt());
    }
    let ur = u.matmul(&root)?;
    ur.matmul(&u.transpose())
}
