//! Model-based sparse recovery: the LASSO objective and the ISTA, FISTA, and
//! ADMM iterative solvers.
//!
//! Recovery is always carried out in the sparse coordinates. With a
//! dictionary `Psi` the effective measurement operator is `H * Psi`, the
//! solvers work on the code `r`, and the returned signal is `Psi * r`;
//! with the identity dictionary the code is the signal.

use crate::error::{Error, Result};
use crate::rng::{gaussian_tensor, Prng};
use crate::tensor::{
    power_method_sigma_max_sq, read_tensor, soft_threshold, SpdFactor, Tensor,
};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

/// Objective data for `0.5*||x - H s||^2 + rho*||r||_1`, `s = Psi r`.
#[derive(Debug, Clone)]
pub struct SparseProblem {
    pub h: Tensor,
    /// Sparsifying dictionary; `None` means identity.
    pub psi: Option<Tensor>,
    /// Sparsity weight. The noise variance `sigma2` is carried for dataset
    /// bookkeeping; the solvers see one effective `rho`.
    pub rho: f64,
    pub sigma2: f64,
}

impl SparseProblem {
    pub fn new(h: Tensor, psi: Option<Tensor>, rho: f64, sigma2: f64) -> Result<Self> {
        if h.rank() != 2 || h.max_abs() == 0.0 {
            return Err(Error::InvalidArgument(
                "measurement operator must be a nonzero matrix".into(),
            ));
        }
        if rho < 0.0 || sigma2 < 0.0 {
            return Err(Error::InvalidArgument(
                "rho and sigma2 must be non-negative".into(),
            ));
        }
        if let Some(p) = &psi {
            if p.rank() != 2 || p.rows() != h.cols() || p.cols() != h.cols() {
                return Err(Error::shape(format!(
                    "dictionary must be {}x{}, got {:?}",
                    h.cols(),
                    h.cols(),
                    p.shape()
                )));
            }
        }
        Ok(SparseProblem { h, psi, rho, sigma2 })
    }

    pub fn identity_dict(h: Tensor, rho: f64, sigma2: f64) -> Result<Self> {
        SparseProblem::new(h, None, rho, sigma2)
    }

    /// `H` or `H * Psi`.
    pub fn effective_operator(&self) -> Result<Tensor> {
        match &self.psi {
            None => Ok(self.h.clone()),
            Some(p) => self.h.matmul(p),
        }
    }

    /// Maps a sparse code back to the signal domain.
    pub fn to_signal(&self, r: &Tensor) -> Result<Tensor> {
        match &self.psi {
            None => Ok(r.clone()),
            Some(p) => p.matmul(r),
        }
    }

    pub fn code_dim(&self) -> usize {
        self.h.cols()
    }

    /// Step size `0.9 / sigma_max^2(H_eff)`, the default the monotonicity
    /// guarantee asks for.
    pub fn default_step(&self) -> Result<f64> {
        let op = self.effective_operator()?;
        let s = power_method_sigma_max_sq(&op);
        if s == 0.0 {
            return Err(Error::Numerical("operator has zero spectral norm".into()));
        }
        Ok(0.9 / s)
    }
}

/// ADMM solver knobs: `lambda` the quadratic-coupling weight, `mu` the dual
/// step size.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdmmHyper {
    pub lambda: f64,
    pub mu: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl AdmmHyper {
    pub fn new(lambda: f64, mu: f64) -> Result<Self> {
        let h = AdmmHyper {
            lambda,
            mu,
            ..AdmmHyper::default()
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda <= 0.0 || self.mu <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "ADMM requires lambda > 0 and mu > 0, got lambda={} mu={}",
                self.lambda, self.mu
            )));
        }
        if self.max_iter == 0 || self.tol <= 0.0 {
            return Err(Error::InvalidArgument(
                "ADMM requires max_iter >= 1 and tol > 0".into(),
            ));
        }
        Ok(())
    }
}

impl Default for AdmmHyper {
    fn default() -> Self {
        AdmmHyper {
            lambda: 1.0,
            mu: 1.0,
            max_iter: 5000,
            tol: 1e-8,
        }
    }
}

/// Proximal-capable prior. `prox(v, w)` evaluates `prox_{w * phi}(v)`.
pub trait Prior {
    fn prox(&self, v: &Tensor, weight: f64) -> Result<Tensor>;
    /// `phi(s)` when available (used for objective traces).
    fn value(&self, s: &Tensor) -> Option<f64>;
}

/// The l1 prior; its proximal mapping is the soft threshold.
#[derive(Debug, Clone, Default)]
pub struct L1Prior;

impl Prior for L1Prior {
    fn prox(&self, v: &Tensor, weight: f64) -> Result<Tensor> {
        soft_threshold(v, weight)
    }

    fn value(&self, s: &Tensor) -> Option<f64> {
        Some(s.norm_l1())
    }
}

pub fn l1_prior_prox(v: &Tensor, weight: f64) -> Result<Tensor> {
    L1Prior.prox(v, weight)
}

/// Per-iteration record for objective traces.
#[derive(Debug, Clone)]
pub struct IterStat {
    pub iter: usize,
    pub objective: f64,
    pub residual: f64,
    pub wall_ns: u128,
}

#[derive(Debug, Clone)]
pub struct Solution {
    /// Recovered signal (`Psi r` in dictionary coordinates).
    pub s: Tensor,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<IterStat>,
}

/// LASSO objective `0.5*||x - H_eff r||^2 + rho*||r||_1` in code coordinates.
pub fn lasso_objective(p: &SparseProblem, x: &Tensor, r: &Tensor) -> Result<f64> {
    let op = p.effective_operator()?;
    if x.len() != op.rows() || r.len() != op.cols() {
        return Err(Error::shape(format!(
            "objective: operator {:?} with x len {} and r len {}",
            op.shape(),
            x.len(),
            r.len()
        )));
    }
    let resid = x.sub(&op.matmul(r)?)?;
    Ok(0.5 * resid.dot(&resid)? + p.rho * r.norm_l1())
}

/// ISTA from a zero start:
/// `r_{k+1} = T_{mu*rho}(r_k + mu * H^T (x - H r_k))`.
pub fn ista(p: &SparseProblem, x: &Tensor, mu: f64, iters: usize) -> Result<Solution> {
    if mu <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "ISTA step size must be positive, got {}",
            mu
        )));
    }
    let op = p.effective_operator()?;
    let start = Instant::now();
    let mut r = Tensor::zeros(&[op.cols()]);
    let mut trace = Vec::with_capacity(iters);
    for k in 0..iters {
        let grad_step = op.t_matmul(&x.sub(&op.matmul(&r)?)?)?;
        let next = soft_threshold(&r.add(&grad_step.scale(mu))?, mu * p.rho)?;
        let residual = next.sub(&r)?.norm_l2();
        r = next;
        trace.push(IterStat {
            iter: k + 1,
            objective: lasso_objective(p, x, &r)?,
            residual,
            wall_ns: start.elapsed().as_nanos(),
        });
    }
    Ok(Solution {
        s: p.to_signal(&r)?,
        iterations: iters,
        converged: true,
        trace,
    })
}

/// FISTA: ISTA with Nesterov momentum `t_{k+1} = (1 + sqrt(1 + 4 t_k^2)) / 2`.
pub fn fista(p: &SparseProblem, x: &Tensor, mu: f64, iters: usize) -> Result<Solution> {
    if mu <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "FISTA step size must be positive, got {}",
            mu
        )));
    }
    let op = p.effective_operator()?;
    let start = Instant::now();
    let n = op.cols();
    let mut r = Tensor::zeros(&[n]);
    let mut y = Tensor::zeros(&[n]);
    let mut t = 1.0f64;
    let mut trace = Vec::with_capacity(iters);
    for k in 0..iters {
        let grad_step = op.t_matmul(&x.sub(&op.matmul(&y)?)?)?;
        let next = soft_threshold(&y.add(&grad_step.scale(mu))?, mu * p.rho)?;
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / t_next;
        y = next.add(&next.sub(&r)?.scale(beta))?;
        let residual = next.sub(&r)?.norm_l2();
        r = next;
        t = t_next;
        trace.push(IterStat {
            iter: k + 1,
            objective: lasso_objective(p, x, &r)?,
            residual,
            wall_ns: start.elapsed().as_nanos(),
        });
    }
    Ok(Solution {
        s: p.to_signal(&r)?,
        iterations: iters,
        converged: true,
        trace,
    })
}

/// Initialization mode for ADMM; zero keeps runs deterministic, the seeded
/// variant reproduces a randomized start.
#[derive(Debug, Clone, Copy, Default)]
pub enum AdmmInit {
    #[default]
    Zero,
    Random(u64),
}

/// ADMM for `0.5*||x - H r||^2 + rho*||r||_1` (or a plug-in prior):
///
/// ```text
/// r_{k+1} = (H^T H + 2 lambda I)^{-1} (H^T x + 2 lambda (v_k - u_k))
/// v_{k+1} = prox_{rho/(2 lambda) * phi}(r_{k+1} + u_k)
/// u_{k+1} = u_k + mu (r_{k+1} - v_{k+1})
/// ```
///
/// Stops when `max(||r - v||, ||v - v_prev||) <= tol`.
pub fn admm(
    p: &SparseProblem,
    x: &Tensor,
    hyper: &AdmmHyper,
    prior: &dyn Prior,
) -> Result<Solution> {
    admm_with_init(p, x, hyper, prior, AdmmInit::Zero)
}

pub fn admm_with_init(
    p: &SparseProblem,
    x: &Tensor,
    hyper: &AdmmHyper,
    prior: &dyn Prior,
    init: AdmmInit,
) -> Result<Solution> {
    hyper.validate()?;
    let op = p.effective_operator()?;
    let n = op.cols();
    let start = Instant::now();

    // (H^T H + 2 lambda I) is positive definite for lambda > 0; factor once.
    let gram = op.t_matmul(&op)?;
    let a = gram.add(&Tensor::eye(n).scale(2.0 * hyper.lambda))?;
    let factor = SpdFactor::new(&a).expect("H^T H + 2 lambda I is SPD for lambda > 0");
    let htx = op.t_matmul(x)?;

    let (mut u, mut v) = match init {
        AdmmInit::Zero => (Tensor::zeros(&[n]), Tensor::zeros(&[n])),
        AdmmInit::Random(seed) => {
            let mut rng = Prng::seed(seed).into_rng();
            (
                gaussian_tensor(&mut rng, &[n]),
                gaussian_tensor(&mut rng, &[n]),
            )
        }
    };
    let prox_weight = p.rho / (2.0 * hyper.lambda);
    let mut r = Tensor::zeros(&[n]);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for k in 0..hyper.max_iter {
        let rhs = htx.add(&v.sub(&u)?.scale(2.0 * hyper.lambda))?;
        r = factor.solve(&rhs)?;
        let v_next = prior.prox(&r.add(&u)?, prox_weight)?;
        u = u.add(&r.sub(&v_next)?.scale(hyper.mu))?;
        let primal = r.sub(&v_next)?.norm_l2();
        let change = v_next.sub(&v)?.norm_l2();
        v = v_next;
        iterations = k + 1;
        let residual = primal.max(change);
        trace.push(IterStat {
            iter: iterations,
            objective: lasso_objective(p, x, &r)?,
            residual,
            wall_ns: start.elapsed().as_nanos(),
        });
        if residual <= hyper.tol {
            converged = true;
            break;
        }
    }

    Ok(Solution {
        s: p.to_signal(&r)?,
        iterations,
        converged,
        trace,
    })
}

/// On-disk description of a problem instance; tensor paths are resolved
/// relative to the descriptor file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparseProblemDescriptor {
    #[serde(rename = "H")]
    pub h: String,
    /// Path to the dictionary tensor, or the literal string `"identity"`.
    #[serde(rename = "Psi")]
    pub psi: String,
    pub rho: f64,
    pub sigma2: f64,
}

impl SparseProblemDescriptor {
    pub fn parse(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<SparseProblem> {
        let path = path.as_ref();
        let desc = Self::parse(&std::fs::read_to_string(path)?)?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let h = read_tensor(dir.join(&desc.h))?;
        let psi = if desc.psi == "identity" {
            None
        } else {
            Some(read_tensor(dir.join(&desc.psi))?)
        };
        SparseProblem::new(h, psi, desc.rho, desc.sigma2)
    }
}

/// Synthetic recovery instance: column-normalized Gaussian `H`, `k`-sparse
/// code with unit-Gaussian nonzeros, noise level `sigma`.
pub fn random_instance(
    m: usize,
    n: usize,
    sparsity: usize,
    sigma: f64,
    rho: f64,
    seed: u64,
) -> (SparseProblem, Tensor, Tensor) {
    let mut rng = Prng::seed(seed).into_rng();
    let mut h = gaussian_tensor(&mut rng, &[m, n]);
    for j in 0..n {
        let norm: f64 = (0..m).map(|i| h.at2(i, j) * h.at2(i, j)).sum::<f64>().sqrt();
        if norm > 0.0 {
            for i in 0..m {
                let v = h.at2(i, j) / norm;
                h.set2(i, j, v);
            }
        }
    }
    let mut s_true = vec![0.0; n];
    let mut placed = 0;
    while placed < sparsity.min(n) {
        let j = (crate::rng::uniform(&mut rng, 0.0, n as f64)) as usize % n;
        if s_true[j] == 0.0 {
            use rand::Rng as _;
            s_true[j] = rng.sample(rand_distr::StandardNormal);
            placed += 1;
        }
    }
    let s_true = Tensor::vector(s_true);
    let noise = gaussian_tensor(&mut rng, &[m]).scale(sigma);
    let x = h.matmul(&s_true).unwrap().add(&noise).unwrap();
    let problem = SparseProblem::identity_dict(h, rho, sigma * sigma).unwrap();
    (problem, x, s_true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;

    #[test]
    fn objective_zero_case() {
        let p = SparseProblem::identity_dict(Tensor::eye(3), 0.5, 0.0).unwrap();
        let zero = Tensor::zeros(&[3]);
        assert_eq!(lasso_objective(&p, &zero, &zero).unwrap(), 0.0);
    }

    #[test]
    fn objective_hand_arithmetic() {
        // H = I_1, x = [2], s = [1], rho = 0.5: 0.5*(2-1)^2 + 0.5*1 = 1.0
        let p = SparseProblem::identity_dict(Tensor::eye(1), 0.5, 0.0).unwrap();
        let obj = lasso_objective(&p, &Tensor::vector(vec![2.0]), &Tensor::vector(vec![1.0]))
            .unwrap();
        assert!((obj - 1.0).abs() < 1e-15);
    }

    #[test]
    fn objective_matches_direct_formula() {
        let (p, x, s) = random_instance(6, 10, 3, 0.1, 0.3, 42);
        let ours = lasso_objective(&p, &x, &s).unwrap();
        let direct = oracle::lasso_value(&p.h, &x, &s, p.rho);
        assert!((ours - direct).abs() <= 1e-12 * direct.max(1.0));
    }

    #[test]
    fn ista_identity_one_step() {
        let p = SparseProblem::identity_dict(Tensor::eye(4), 0.0, 0.0).unwrap();
        let x = Tensor::vector(vec![1.0, -2.0, 3.0, 0.5]);
        let sol = ista(&p, &x, 1.0, 1).unwrap();
        assert_eq!(sol.s.data(), x.data());
    }

    #[test]
    fn ista_1d_fixed_point() {
        let p = SparseProblem::identity_dict(Tensor::eye(1), 0.5, 0.0).unwrap();
        let sol = ista(&p, &Tensor::vector(vec![2.0]), 1.0, 200).unwrap();
        assert!((sol.s.data()[0] - 1.5).abs() < 1e-10);
    }

    #[test]
    fn ista_rejects_nonpositive_step() {
        let p = SparseProblem::identity_dict(Tensor::eye(1), 0.0, 0.0).unwrap();
        assert!(ista(&p, &Tensor::vector(vec![1.0]), 0.0, 3).is_err());
        assert!(ista(&p, &Tensor::vector(vec![1.0]), -0.5, 3).is_err());
    }

    #[test]
    fn ista_reaches_coordinate_descent_optimum() {
        let (p, x, _) = random_instance(32, 64, 5, 0.05, 0.1, 7);
        let mu = p.default_step().unwrap();
        let sol = ista(&p, &x, mu, 500).unwrap();
        let cd = oracle::lasso_coordinate_descent(&p.h, &x, p.rho, 20_000);
        let opt = oracle::lasso_value(&p.h, &x, &cd, p.rho);
        let got = lasso_objective(&p, &x, &sol.s).unwrap();
        // 500 iterations gets close; the acceptance suite runs the tight bound
        assert!((got - opt) / opt.max(1e-12) <= 1e-3, "{} vs {}", got, opt);
    }

    #[test]
    fn fista_not_slower_than_ista() {
        let (p, x, _) = random_instance(32, 64, 5, 0.05, 0.1, 19);
        let mu = p.default_step().unwrap();
        let slow = ista(&p, &x, mu, 50).unwrap();
        let fast = fista(&p, &x, mu, 50).unwrap();
        let o_slow = slow.trace.last().unwrap().objective;
        let o_fast = fast.trace.last().unwrap().objective;
        assert!(o_fast <= o_slow + 1e-12, "fista {} vs ista {}", o_fast, o_slow);
    }

    #[test]
    fn fista_matches_ista_500_within_150_iterations() {
        let (p, x, _) = random_instance(32, 64, 5, 0.05, 0.1, 7);
        let mu = p.default_step().unwrap();
        let target = ista(&p, &x, mu, 500).unwrap().trace.last().unwrap().objective;
        let run = fista(&p, &x, mu, 150).unwrap();
        // objectives compared at numerical precision (fista is non-monotone)
        let reached = run
            .trace
            .iter()
            .find(|st| st.objective <= target * (1.0 + 1e-8))
            .map(|st| st.iter);
        assert!(
            reached.is_some(),
            "fista did not reach {} in 150 iterations (best {})",
            target,
            run.trace.last().unwrap().objective
        );
    }

    #[test]
    fn ista_monotone_descent_under_safe_step() {
        for seed in 0..20 {
            let (p, x, _) = random_instance(16, 32, 4, 0.05, 0.1, 100 + seed);
            let mu = p.default_step().unwrap();
            let sol = ista(&p, &x, mu, 200).unwrap();
            let mut prev = f64::INFINITY;
            for st in &sol.trace {
                assert!(
                    st.objective <= prev + 1e-12,
                    "seed {} iter {}: {} > {}",
                    seed,
                    st.iter,
                    st.objective,
                    prev
                );
                prev = st.objective;
            }
        }
    }

    #[test]
    fn admm_zero_data_gives_zero() {
        let (p, _, _) = random_instance(8, 16, 3, 0.0, 0.4, 5);
        let sol = admm(&p, &Tensor::zeros(&[8]), &AdmmHyper::default(), &L1Prior).unwrap();
        assert!(sol.s.norm_l2() <= 1e-12);
        assert!(sol.converged);
    }

    #[test]
    fn admm_1d_matches_lasso_closed_form() {
        let h = Tensor::from_rows(&[vec![1.0]]).unwrap();
        let p = SparseProblem::identity_dict(h, 0.5, 0.0).unwrap();
        let sol = admm(&p, &Tensor::vector(vec![2.0]), &AdmmHyper::default(), &L1Prior).unwrap();
        assert!(
            (sol.s.data()[0] - 1.5).abs() < 1e-6,
            "got {}",
            sol.s.data()[0]
        );
    }

    #[test]
    fn admm_reaches_coordinate_descent_optimum() {
        let (p, x, _) = random_instance(32, 64, 5, 0.05, 0.1, 23);
        let sol = admm(&p, &x, &AdmmHyper::default(), &L1Prior).unwrap();
        assert!(sol.converged, "no convergence in {} iters", sol.iterations);
        let cd = oracle::lasso_coordinate_descent(&p.h, &x, p.rho, 20_000);
        let opt = oracle::lasso_value(&p.h, &x, &cd, p.rho);
        let got = lasso_objective(&p, &x, &sol.s).unwrap();
        assert!(
            (got - opt).abs() / opt.max(1e-12) <= 1e-5,
            "{} vs {}",
            got,
            opt
        );
    }

    #[test]
    fn solver_agreement_on_convex_instance() {
        let (p, x, _) = random_instance(24, 48, 4, 0.05, 0.15, 31);
        let mu = p.default_step().unwrap();
        let a = ista(&p, &x, mu, 2000).unwrap();
        let b = fista(&p, &x, mu, 500).unwrap();
        let c = admm(&p, &x, &AdmmHyper::default(), &L1Prior).unwrap();
        let oa = lasso_objective(&p, &x, &a.s).unwrap();
        let ob = lasso_objective(&p, &x, &b.s).unwrap();
        let oc = lasso_objective(&p, &x, &c.s).unwrap();
        let lo = oa.min(ob).min(oc);
        let hi = oa.max(ob).max(oc);
        assert!((hi - lo) / lo.max(1e-12) <= 1e-5, "{} {} {}", oa, ob, oc);
    }

    #[test]
    fn rho_zero_solution_scales_linearly() {
        let (mut p, x, _) = random_instance(12, 12, 3, 0.0, 0.1, 57);
        p.rho = 0.0;
        let mu = p.default_step().unwrap();
        let base = ista(&p, &x, mu, 3000).unwrap();
        let scaled = ista(&p, &x.scale(2.5), mu, 3000).unwrap();
        let diff = scaled.s.sub(&base.s.scale(2.5)).unwrap().norm_l2();
        assert!(diff <= 1e-6 * base.s.norm_l2().max(1.0), "diff {}", diff);
    }

    #[test]
    fn dictionary_coordinates_round_trip() {
        // Psi = 2I doubles the signal relative to the code.
        let h = Tensor::eye(3);
        let psi = Tensor::eye(3).scale(2.0);
        let p = SparseProblem::new(h, Some(psi), 0.0, 0.0).unwrap();
        let x = Tensor::vector(vec![2.0, 4.0, 6.0]);
        let mu = p.default_step().unwrap();
        let sol = ista(&p, &x, mu, 4000).unwrap();
        // H Psi r = x  =>  r = x / 2, s = Psi r = x
        for (a, b) in sol.s.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6, "{} vs {}", a, b);
        }
    }

    #[test]
    fn descriptor_parses_identity_and_paths() {
        let json = r#"{"H": "h.tnsr", "Psi": "identity", "rho": 0.3, "sigma2": 0.01}"#;
        let d = SparseProblemDescriptor::parse(json).unwrap();
        assert_eq!(d.psi, "identity");
        assert!((d.rho - 0.3).abs() < 1e-15);
        assert!(SparseProblemDescriptor::parse("{").is_err());
        assert!(SparseProblemDescriptor::parse("{}").is_err());
    }
}
