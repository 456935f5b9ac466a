//! Independent reference implementations used by tests and the verification
//! suite. Everything here is written for clarity, not speed, and deliberately
//! avoids the solver code paths it is used to check.

use crate::tensor::Tensor;

/// Central finite differences of a scalar function, step `h` per coordinate.
pub fn finite_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// LASSO objective `0.5*||x - H s||^2 + rho*||s||_1` evaluated directly.
pub fn lasso_value(h: &Tensor, x: &Tensor, s: &Tensor, rho: f64) -> f64 {
    let r = x.sub(&h.matmul(s).unwrap()).unwrap();
    0.5 * r.dot(&r).unwrap() + rho * s.norm_l1()
}

/// Cyclic coordinate descent for the LASSO, run to stationarity. This is the
/// optimum oracle the iterative solvers are compared against.
pub fn lasso_coordinate_descent(h: &Tensor, x: &Tensor, rho: f64, sweeps: usize) -> Tensor {
    let (m, n) = (h.rows(), h.cols());
    let mut s = vec![0.0; n];
    let mut residual: Vec<f64> = x.data().to_vec(); // x - H s
    let col_norms: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|i| h.at2(i, j) * h.at2(i, j)).sum())
        .collect();
    for _ in 0..sweeps {
        let mut max_change = 0.0f64;
        for j in 0..n {
            if col_norms[j] == 0.0 {
                continue;
            }
            // partial residual correlation with column j
            let mut corr = 0.0;
            for i in 0..m {
                corr += h.at2(i, j) * residual[i];
            }
            let z = corr + col_norms[j] * s[j];
            let new = z.signum() * (z.abs() - rho).max(0.0) / col_norms[j];
            let delta = new - s[j];
            if delta != 0.0 {
                for i in 0..m {
                    residual[i] -= delta * h.at2(i, j);
                }
                s[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        if max_change <= 1e-13 {
            break;
        }
    }
    Tensor::vector(s)
}

/// Fixed point of the scalar predicted-covariance Riccati map
/// `P <- a^2 * (P - P c^2 P / (c^2 P + r)) + q`, and the steady-state Kalman
/// gain it implies.
pub fn scalar_riccati_gain(a: f64, c: f64, q: f64, r: f64) -> (f64, f64) {
    let mut p = 1.0;
    for _ in 0..100_000 {
        let next = a * a * (p - p * c * c * p / (c * c * p + r)) + q;
        if (next - p).abs() <= 1e-15 * p.abs().max(1.0) {
            p = next;
            break;
        }
        p = next;
    }
    let gain = p * c / (c * c * p + r);
    (p, gain)
}

/// Backward LQR recursion on a scalar system, run to stationarity; returns
/// the stationary feedback gain.
pub fn scalar_lqr_gain(a: f64, b: f64, q: f64, r: f64) -> f64 {
    let mut p = q;
    for _ in 0..100_000 {
        let k = a * b * p / (r + b * b * p);
        let next = q + a * a * p - (a * b * p) * (a * b * p) / (r + b * b * p);
        let _ = k;
        if (next - p).abs() <= 1e-15 * p.abs().max(1.0) {
            p = next;
            break;
        }
        p = next;
    }
    a * b * p / (r + b * b * p)
}

/// Exhaustive two-stage grid search for a horizon-2 scalar MPC problem:
/// minimize over (s0, s1) of
///   q0*z0^2 + r0*s0^2 + q1*z1^2 + r1*s1^2   with z1 = a*z0 + b*s0 + v0,
/// evaluated exactly as the controller defines its objective. A coarse pass
/// brackets the optimum, a fine pass refines it.
#[allow(clippy::too_many_arguments)]
pub fn mpc_h2_grid_search(
    a: f64,
    b: f64,
    q: [f64; 2],
    r: [f64; 2],
    z0: f64,
    v0: f64,
    span: f64,
    fine_step: f64,
) -> (f64, f64, f64) {
    let cost = |s0: f64, s1: f64| {
        let z1 = a * z0 + b * s0 + v0;
        q[0] * z0 * z0 + r[0] * s0 * s0 + q[1] * z1 * z1 + r[1] * s1 * s1
    };
    let mut best = (0.0, 0.0, f64::INFINITY);
    let coarse = span / 200.0;
    let mut s0 = -span;
    while s0 <= span {
        let mut s1 = -span;
        while s1 <= span {
            let cval = cost(s0, s1);
            if cval < best.2 {
                best = (s0, s1, cval);
            }
            s1 += coarse;
        }
        s0 += coarse;
    }
    let (c0, c1, _) = best;
    let mut s0 = c0 - coarse;
    while s0 <= c0 + coarse {
        let mut s1 = c1 - coarse;
        while s1 <= c1 + coarse {
            let cval = cost(s0, s1);
            if cval < best.2 {
                best = (s0, s1, cval);
            }
            s1 += fine_step;
        }
        s0 += fine_step;
    }
    best
}
