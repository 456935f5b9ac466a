//! Learned components inside the filtering recursion: a recurrent network
//! replacing the Kalman gain, covariances fitted by backpropagation through
//! the filter, and a Kalman filter applied to learned observation features.

use super::lorenz::{LorenzModel, LorenzTrajectory};
use super::{kalman_step, row, state_mse, FilterState, StateSpaceModel, TrajectoryDataset};
use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{gaussian_tensor, Prng};
use crate::tensor::Tensor;
use crate::train::{sgd_step, SgdState, TrainConfig};

/// Recurrent gain network: one tanh recurrent layer, one linear output layer
/// reshaped to the `n x q` gain. Features per step are
/// `[x_t, s_{t-1}, innovation, z_hat_{t-1}]`.
#[derive(Debug, Clone)]
pub struct GainNetwork {
    pub w_in: Tensor,
    pub w_h: Tensor,
    pub b_h: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
    pub state_dim: usize,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub hidden: usize,
}

impl GainNetwork {
    pub fn feature_dim(&self) -> usize {
        self.obs_dim + self.action_dim + self.obs_dim + self.state_dim
    }

    /// Small random recurrent weights, near-zero output layer so the initial
    /// gain is close to zero (open-loop start).
    pub fn new(state_dim: usize, obs_dim: usize, action_dim: usize, hidden: usize, seed: u64) -> Self {
        let d_in = obs_dim + action_dim + obs_dim + state_dim;
        let mut rng = Prng::seed(seed).stream(0x6A).into_rng();
        let scale_in = 1.0 / (d_in as f64).sqrt();
        let scale_h = 1.0 / (hidden as f64).sqrt();
        GainNetwork {
            w_in: gaussian_tensor(&mut rng, &[hidden, d_in]).scale(scale_in),
            w_h: gaussian_tensor(&mut rng, &[hidden, hidden]).scale(0.5 * scale_h),
            b_h: Tensor::zeros(&[hidden]),
            w_out: gaussian_tensor(&mut rng, &[state_dim * obs_dim, hidden]).scale(0.01),
            b_out: Tensor::zeros(&[state_dim * obs_dim]),
            state_dim,
            obs_dim,
            action_dim,
            hidden,
        }
    }

    pub fn zeroed(mut self) -> Self {
        self.w_out = Tensor::zeros(self.w_out.shape());
        self.b_out = Tensor::zeros(self.b_out.shape());
        self
    }

    pub fn initial_hidden(&self) -> Tensor {
        Tensor::zeros(&[self.hidden])
    }

    /// Gain and next hidden state for a feature vector.
    pub fn forward(&self, feat: &Tensor, h_prev: &Tensor) -> Result<(Tensor, Tensor)> {
        let pre = self
            .w_in
            .matmul(feat)?
            .add(&self.w_h.matmul(h_prev)?)?
            .add(&self.b_h)?;
        let h = pre.map(f64::tanh);
        let gain = self
            .w_out
            .matmul(&h)?
            .add(&self.b_out)?
            .reshaped(vec![self.state_dim, self.obs_dim])?;
        Ok((gain, h))
    }

    fn params(&self) -> Vec<Tensor> {
        vec![
            self.w_in.clone(),
            self.w_h.clone(),
            self.b_h.clone(),
            self.w_out.clone(),
            self.b_out.clone(),
        ]
    }

    fn set_params(&mut self, p: &[Tensor]) {
        self.w_in = p[0].clone();
        self.w_h = p[1].clone();
        self.b_h = p[2].clone();
        self.w_out = p[3].clone();
        self.b_out = p[4].clone();
    }
}

/// The transition the learned filter runs on.
#[derive(Clone)]
pub enum Dynamics<'a> {
    Linear(&'a StateSpaceModel),
    Lorenz(&'a LorenzModel),
}

impl Dynamics<'_> {
    fn state_dim(&self) -> usize {
        match self {
            Dynamics::Linear(m) => m.state_dim(),
            Dynamics::Lorenz(_) => 3,
        }
    }

    fn predict(&self, z: &Tensor, s_prev: &Tensor) -> Result<Tensor> {
        match self {
            Dynamics::Linear(m) => Ok(m.a.matmul(z)?.add(&m.b.matmul(s_prev)?)?),
            Dynamics::Lorenz(lm) => Ok(lm.step(z)),
        }
    }

    fn observe(&self, z: &Tensor) -> Result<Tensor> {
        match self {
            Dynamics::Linear(m) => m.c.matmul(z),
            Dynamics::Lorenz(_) => Ok(z.clone()),
        }
    }
}

/// One gain-network filter step: prediction, learned gain, correction.
/// Returns the new estimate and hidden state.
pub fn kalmannet_step(
    dynamics: &Dynamics,
    net: &GainNetwork,
    z_hat_prev: &Tensor,
    hidden_prev: &Tensor,
    x_t: &Tensor,
    s_prev: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let pred = dynamics.predict(z_hat_prev, s_prev)?;
    let innov = x_t.sub(&dynamics.observe(&pred)?)?;
    let feat = concat_features(x_t, s_prev, &innov, z_hat_prev);
    let (gain, h) = net.forward(&feat, hidden_prev)?;
    let z_hat = pred.add(&gain.matmul(&innov)?)?;
    Ok((z_hat, h))
}

fn concat_features(x: &Tensor, s: &Tensor, innov: &Tensor, z: &Tensor) -> Tensor {
    let mut data = Vec::with_capacity(x.len() + s.len() + innov.len() + z.len());
    data.extend_from_slice(x.data());
    data.extend_from_slice(s.data());
    data.extend_from_slice(innov.data());
    data.extend_from_slice(z.data());
    Tensor::vector(data)
}

/// Full-rollout estimates `[T, n]`; row 0 is the initialization (the true
/// initial state by the conventions of this benchmark), hidden state reset.
pub fn kalmannet_estimates(
    dynamics: &Dynamics,
    net: &GainNetwork,
    xs: &Tensor,
    actions: Option<&Tensor>,
    z0: &Tensor,
) -> Result<Tensor> {
    let t_steps = xs.rows();
    let n = dynamics.state_dim();
    let mut z = z0.clone();
    let mut h = net.initial_hidden();
    let mut out = Vec::with_capacity(t_steps * n);
    out.extend_from_slice(z0.data());
    for t in 1..t_steps {
        let s_prev = match actions {
            Some(a) => row(a, t - 1),
            None => Tensor::zeros(&[net.action_dim]),
        };
        let (z_next, h_next) =
            kalmannet_step(dynamics, net, &z, &h, &row(xs, t), &s_prev)?;
        z = z_next;
        h = h_next;
        out.extend_from_slice(z.data());
    }
    Tensor::new(vec![t_steps, n], out)
}

struct NetVars {
    w_in: Var,
    w_h: Var,
    b_h: Var,
    w_out: Var,
    b_out: Var,
}

fn emit_net_vars(tape: &Tape, net: &GainNetwork) -> NetVars {
    NetVars {
        w_in: tape.leaf(net.w_in.clone()),
        w_h: tape.leaf(net.w_h.clone()),
        b_h: tape.leaf(net.b_h.clone()),
        w_out: tape.leaf(net.w_out.clone()),
        b_out: tape.leaf(net.b_out.clone()),
    }
}

fn net_grads(grads: &Gradients, nv: &NetVars) -> Vec<Tensor> {
    vec![
        grads.wrt(nv.w_in),
        grads.wrt(nv.w_h),
        grads.wrt(nv.b_h),
        grads.wrt(nv.w_out),
        grads.wrt(nv.b_out),
    ]
}

/// Constant tensors for building the Lorenz Taylor transition on a tape.
struct LorenzTapeConsts {
    eye: Var,
    a0_dt: Var,
    d2_dt: Var,
    d3_dt: Var,
    e2: Var,
    e3: Var,
    order: usize,
}

fn lorenz_tape_consts(tape: &Tape, lm: &LorenzModel) -> LorenzTapeConsts {
    let a0 = Tensor::from_rows(&[
        vec![-lm.sigma, lm.sigma, 0.0],
        vec![lm.rho, -1.0, 0.0],
        vec![0.0, 0.0, -lm.beta],
    ])
    .unwrap()
    .scale(lm.dt);
    let d2 = Tensor::from_rows(&[
        vec![0.0, 0.0, 0.0],
        vec![0.0, 0.0, 0.0],
        vec![1.0, 0.0, 0.0],
    ])
    .unwrap()
    .scale(lm.dt);
    let d3 = Tensor::from_rows(&[
        vec![0.0, 0.0, 0.0],
        vec![-1.0, 0.0, 0.0],
        vec![0.0, 0.0, 0.0],
    ])
    .unwrap()
    .scale(lm.dt);
    LorenzTapeConsts {
        eye: tape.leaf(Tensor::eye(3)),
        a0_dt: tape.leaf(a0),
        d2_dt: tape.leaf(d2),
        d3_dt: tape.leaf(d3),
        e2: tape.leaf(Tensor::vector(vec![0.0, 1.0, 0.0])),
        e3: tape.leaf(Tensor::vector(vec![0.0, 0.0, 1.0])),
        order: lm.taylor_order,
    }
}

/// `F(z) z` on the tape via a Horner evaluation of the Taylor series, exact
/// with respect to the recorded primitives so BPTT flows through the
/// state-dependent transition.
fn tape_lorenz_predict(tape: &Tape, c: &LorenzTapeConsts, z: Var) -> Result<Var> {
    let z2 = tape.sum(tape.hadamard(z, c.e2)?)?;
    let z3 = tape.sum(tape.hadamard(z, c.e3)?)?;
    let a_dt = tape.add(
        c.a0_dt,
        tape.add(tape.scale(z2, c.d2_dt)?, tape.scale(z3, c.d3_dt)?)?,
    )?;
    let mut f = c.eye;
    for j in (1..=c.order).rev() {
        f = tape.add(tape.scale_const(1.0 / j as f64, tape.matmul(a_dt, f)?)?, c.eye)?;
    }
    tape.matmul(f, z)
}

enum TapeDynamics<'t> {
    Linear { a: Var, b: Var, c: Var },
    Lorenz(&'t LorenzTapeConsts),
}

fn tape_predict(tape: &Tape, dyns: &TapeDynamics, z: Var, s_prev: Var) -> Result<Var> {
    match dyns {
        TapeDynamics::Linear { a, b, .. } => {
            tape.add(tape.matmul(*a, z)?, tape.matmul(*b, s_prev)?)
        }
        TapeDynamics::Lorenz(c) => tape_lorenz_predict(tape, c, z),
    }
}

fn tape_observe(tape: &Tape, dyns: &TapeDynamics, z: Var) -> Result<Var> {
    match dyns {
        TapeDynamics::Linear { c, .. } => tape.matmul(*c, z),
        TapeDynamics::Lorenz(_) => Ok(z),
    }
}

#[allow(clippy::too_many_arguments)]
fn tape_kalmannet_window(
    tape: &Tape,
    dyns: &TapeDynamics,
    nv: &NetVars,
    net: &GainNetwork,
    xs: &Tensor,
    actions: Option<&Tensor>,
    truth: &Tensor,
    z_start: &Tensor,
    h_start: &Tensor,
    t_range: std::ops::Range<usize>,
) -> Result<(Var, Tensor, Tensor, usize)> {
    let mut z = tape.leaf(z_start.clone());
    let mut h = tape.leaf(h_start.clone());
    let (n, q) = (net.state_dim, net.obs_dim);
    let mut loss: Option<Var> = None;
    let mut steps = 0;
    for t in t_range {
        let s_prev = match actions {
            Some(a) => row(a, t - 1),
            None => Tensor::zeros(&[net.action_dim]),
        };
        let s_leaf = tape.leaf(s_prev);
        let x_leaf = tape.leaf(row(xs, t));
        let pred = tape_predict(tape, dyns, z, s_leaf)?;
        let innov = tape.sub(x_leaf, tape_observe(tape, dyns, pred)?)?;
        let feat = tape.concat(&[x_leaf, s_leaf, innov, z])?;
        let pre = tape.add(
            tape.add(tape.matmul(nv.w_in, feat)?, tape.matmul(nv.w_h, h)?)?,
            nv.b_h,
        )?;
        h = tape.tanh(pre)?;
        let gain_vec = tape.add(tape.matmul(nv.w_out, h)?, nv.b_out)?;
        let gain = tape.reshape(gain_vec, vec![n, q])?;
        z = tape.add(pred, tape.matmul(gain, innov)?)?;
        let err = tape.sub(z, tape.leaf(row(truth, t)))?;
        let sq = tape.squared_l2(err)?;
        loss = Some(match loss {
            None => sq,
            Some(acc) => tape.add(acc, sq)?,
        });
        steps += 1;
    }
    let loss = loss.ok_or_else(|| Error::InvalidArgument("empty training window".into()))?;
    Ok((loss, tape.value(z), tape.value(h), steps))
}

/// Supervised trajectories for gain-network training; observations, optional
/// actions, and true states per trajectory.
pub struct GainTrainData {
    pub xs: Vec<Tensor>,
    pub actions: Vec<Option<Tensor>>,
    pub truth: Vec<Tensor>,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
}

impl GainTrainData {
    pub fn from_linear(ds: &TrajectoryDataset) -> Self {
        let count = ds.count();
        GainTrainData {
            xs: (0..count).map(|i| row(&ds.x, i)).collect(),
            actions: (0..count).map(|i| Some(row(&ds.s, i))).collect(),
            truth: (0..count).map(|i| row(&ds.z, i)).collect(),
            train_idx: ds.train_idx.clone(),
            val_idx: ds.val_idx.clone(),
        }
    }

    pub fn from_lorenz(trajs: &[LorenzTrajectory], val_fraction: f64) -> Self {
        let count = trajs.len();
        let n_val = ((count as f64) * val_fraction).round() as usize;
        GainTrainData {
            xs: trajs.iter().map(|t| t.x.clone()).collect(),
            actions: trajs.iter().map(|_| None).collect(),
            truth: trajs.iter().map(|t| t.z.clone()).collect(),
            train_idx: (0..count - n_val).collect(),
            val_idx: (count - n_val..count).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GainTrainOutcome {
    pub net: GainNetwork,
    /// Validation state MSE per epoch, entry 0 before training.
    pub val_trace: Vec<f64>,
    pub diverged: bool,
}

/// Mean state MSE of full rollouts over a set of trajectories.
pub fn gain_net_mse(
    dynamics: &Dynamics,
    net: &GainNetwork,
    data: &GainTrainData,
    idx: &[usize],
) -> Result<f64> {
    let mut total = 0.0;
    for &i in idx {
        let est = kalmannet_estimates(
            dynamics,
            net,
            &data.xs[i],
            data.actions[i].as_ref(),
            &row(&data.truth[i], 0),
        )?;
        total += state_mse(&est, &data.truth[i]);
    }
    Ok(total / idx.len().max(1) as f64)
}

/// End-to-end training of the gain network by truncated BPTT, returning the
/// best-validation checkpoint.
pub fn train_gain_network(
    dynamics: &Dynamics,
    net0: &GainNetwork,
    data: &GainTrainData,
    cfg: &TrainConfig,
    tbptt_window: usize,
) -> Result<GainTrainOutcome> {
    cfg.validate(data.train_idx.len())?;
    let window = tbptt_window.max(1);
    let mut net = net0.clone();
    let val_idx: &[usize] = if data.val_idx.is_empty() {
        &data.train_idx
    } else {
        &data.val_idx
    };
    let v0 = gain_net_mse(dynamics, &net, data, val_idx)?;
    let mut trace = vec![v0];
    let mut best = (v0, net.clone());
    let mut sgd = SgdState::default();
    let mut diverged = false;
    let mut step = 0usize;

    'epochs: for epoch in 0..cfg.epochs {
        for batch in cfg.batches(&data.train_idx, epoch) {
            let mut grad_acc: Option<Vec<Tensor>> = None;
            let mut loss_acc = 0.0;
            let mut steps_acc = 0usize;
            for &i in &batch {
                let xs = &data.xs[i];
                let truth = &data.truth[i];
                let t_total = xs.rows();
                let mut z_carry = row(truth, 0);
                let mut h_carry = net.initial_hidden();
                let mut start = 1usize;
                while start < t_total {
                    let end = (start + window).min(t_total);
                    let tape = Tape::new();
                    let nv = emit_net_vars(&tape, &net);
                    let lorenz_consts;
                    let dyns = match dynamics {
                        Dynamics::Linear(m) => TapeDynamics::Linear {
                            a: tape.leaf(m.a.clone()),
                            b: tape.leaf(m.b.clone()),
                            c: tape.leaf(m.c.clone()),
                        },
                        Dynamics::Lorenz(lm) => {
                            lorenz_consts = lorenz_tape_consts(&tape, lm);
                            TapeDynamics::Lorenz(&lorenz_consts)
                        }
                    };
                    let (loss, z_end, h_end, steps) = tape_kalmannet_window(
                        &tape,
                        &dyns,
                        &nv,
                        &net,
                        xs,
                        data.actions[i].as_ref(),
                        truth,
                        &z_carry,
                        &h_carry,
                        start..end,
                    )?;
                    let loss_value = tape.value(loss).item()?;
                    if !loss_value.is_finite() {
                        diverged = true;
                        break 'epochs;
                    }
                    loss_acc += loss_value;
                    steps_acc += steps;
                    let grads = tape.backward(loss)?;
                    let g = net_grads(&grads, &nv);
                    grad_acc = Some(match grad_acc {
                        None => g,
                        Some(acc) => acc
                            .iter()
                            .zip(&g)
                            .map(|(a, b)| a.add(b).unwrap())
                            .collect(),
                    });
                    z_carry = z_end;
                    h_carry = h_end;
                    start = end;
                }
            }
            let scale = 1.0 / steps_acc.max(1) as f64;
            let grads: Vec<Tensor> = grad_acc
                .expect("non-empty batch")
                .iter()
                .map(|g| g.scale(scale))
                .collect();
            let _ = loss_acc;
            let mut params = net.params();
            sgd_step(&mut params, &grads, &mut sgd, cfg, step)?;
            step += 1;
            net.set_params(&params);
        }
        let v = gain_net_mse(dynamics, &net, data, val_idx)?;
        if !v.is_finite() {
            diverged = true;
            break;
        }
        trace.push(v);
        if v < best.0 {
            best = (v, net.clone());
        }
    }

    Ok(GainTrainOutcome {
        net: best.1,
        val_trace: trace,
        diverged,
    })
}

/// Covariance pair fitted by backpropagating the filter's state error.
#[derive(Debug, Clone)]
pub struct FittedCovariances {
    pub v_noise: Tensor,
    pub w_noise: Tensor,
    /// Validation filter MSE per epoch, entry 0 at the initial guess.
    pub val_trace: Vec<f64>,
    pub diverged: bool,
}

const COV_EPS: f64 = 1e-8;

fn lower_mask(n: usize) -> Tensor {
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..=i {
            m.set2(i, j, 1.0);
        }
    }
    m
}

/// Cholesky-style factor of `max(M - eps I, scaled)` for initializing the
/// parameterization at a given covariance.
fn factor_of(cov: &Tensor) -> Result<Tensor> {
    let n = cov.rows();
    let shifted = cov.sub(&Tensor::eye(n).scale(COV_EPS))?;
    // fall back to a PSD square root if the shift makes it indefinite
    match crate::tensor::SpdFactor::new(&shifted) {
        Ok(_) => {}
        Err(_) => return crate::tensor::psd_sqrt(&shifted.add(&Tensor::eye(n).scale(COV_EPS))?),
    }
    // dense lower-triangular factor via the definition
    let mut l = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..=i {
            let mut s = shifted.at2(i, j);
            for k in 0..j {
                s -= l.at2(i, k) * l.at2(j, k);
            }
            if i == j {
                l.set2(i, i, s.max(0.0).sqrt());
            } else {
                let d = l.at2(j, j);
                l.set2(i, j, if d > 0.0 { s / d } else { 0.0 });
            }
        }
    }
    Ok(l)
}

/// In-tape Kalman filter over one window with `V = L_v L_v^T + eps I`,
/// `W = L_w L_w^T + eps I` built from masked factor leaves.
#[allow(clippy::too_many_arguments)]
fn tape_filter_window(
    tape: &Tape,
    model: &StateSpaceModel,
    lv: Var,
    lw: Var,
    traj_x: &Tensor,
    traj_s: &Tensor,
    truth: &Tensor,
    z_start: &Tensor,
    p_start: &Tensor,
    t_range: std::ops::Range<usize>,
) -> Result<(Var, Tensor, Tensor, usize)> {
    let n = model.state_dim();
    let q = model.obs_dim();
    let a = tape.leaf(model.a.clone());
    let b = tape.leaf(model.b.clone());
    let c = tape.leaf(model.c.clone());
    let eye_n = tape.leaf(Tensor::eye(n));
    let mask_n = tape.leaf(lower_mask(n));
    let mask_q = tape.leaf(lower_mask(q));
    let eps_n = tape.leaf(Tensor::eye(n).scale(COV_EPS));
    let eps_q = tape.leaf(Tensor::eye(q).scale(COV_EPS));

    let lv_m = tape.hadamard(lv, mask_n)?;
    let v_cov = tape.add(tape.matmul_tt(lv_m, lv_m, false, true)?, eps_n)?;
    let lw_m = tape.hadamard(lw, mask_q)?;
    let w_cov = tape.add(tape.matmul_tt(lw_m, lw_m, false, true)?, eps_q)?;

    let mut z = tape.leaf(z_start.clone());
    let mut p = tape.leaf(p_start.clone());
    let mut loss: Option<Var> = None;
    let mut steps = 0usize;
    for t in t_range {
        let s_prev = tape.leaf(row(traj_s, t - 1));
        let x_t = tape.leaf(row(traj_x, t));
        let pred = tape.add(tape.matmul(a, z)?, tape.matmul(b, s_prev)?)?;
        let ap = tape.matmul(a, p)?;
        let p_pred = tape.add(tape.matmul_tt(ap, a, false, true)?, v_cov)?;
        let cp = tape.matmul(c, p_pred)?;
        let innov_cov = tape.add(tape.matmul_tt(cp, c, false, true)?, w_cov)?;
        // gain^T = S^{-1} C P_pred
        let gain_t = tape.spd_solve(innov_cov, cp)?;
        let innov = tape.sub(x_t, tape.matmul(c, pred)?)?;
        z = tape.add(pred, tape.matmul_tt(gain_t, innov, true, false)?)?;
        // Joseph update keeps P positive semidefinite on the tape as well
        let lc = tape.matmul_tt(gain_t, c, true, false)?;
        let closed = tape.sub(eye_n, lc)?;
        let cp2 = tape.matmul(closed, p_pred)?;
        let j1 = tape.matmul_tt(cp2, closed, false, true)?;
        let lw_part = tape.matmul_tt(gain_t, w_cov, true, false)?;
        let j2 = tape.matmul(lw_part, gain_t)?;
        p = tape.add(j1, j2)?;
        let err = tape.sub(z, tape.leaf(row(truth, t)))?;
        let sq = tape.squared_l2(err)?;
        loss = Some(match loss {
            None => sq,
            Some(acc) => tape.add(acc, sq)?,
        });
        steps += 1;
    }
    let loss = loss.ok_or_else(|| Error::InvalidArgument("empty window".into()))?;
    Ok((loss, tape.value(z), tape.value(p), steps))
}

/// Filter MSE of a model over dataset trajectories (plain evaluation).
pub fn filter_mse(model: &StateSpaceModel, ds: &TrajectoryDataset, idx: &[usize]) -> Result<f64> {
    let n = model.state_dim();
    let mut total = 0.0;
    for &i in idx {
        let traj = ds.trajectory(i);
        let est = super::kalman_estimates(model, &traj, &traj.state(0), &Tensor::eye(n))?;
        total += state_mse(&est, &traj.z);
    }
    Ok(total / idx.len().max(1) as f64)
}

/// Fits `V`, `W` by SGD on the filter's empirical state error with gradients
/// by BPTT through the Riccati recursion. The covariances are parameterized
/// as `L L^T + eps I` so iterates stay positive definite.
pub fn fit_covariances(
    model0: &StateSpaceModel,
    ds: &TrajectoryDataset,
    cfg: &TrainConfig,
    tbptt_window: usize,
) -> Result<FittedCovariances> {
    cfg.validate(ds.train_idx.len())?;
    let n = model0.state_dim();
    let q = model0.obs_dim();
    let window = tbptt_window.max(1);
    let mut lv = factor_of(&model0.v_noise)?;
    let mut lw = factor_of(&model0.w_noise)?;

    let model_at = |lv: &Tensor, lw: &Tensor| -> Result<StateSpaceModel> {
        let mut m = model0.clone();
        let mask_n = lower_mask(n);
        let mask_q = lower_mask(q);
        let lvm = lv.hadamard(&mask_n)?;
        let lwm = lw.hadamard(&mask_q)?;
        m.v_noise = lvm
            .matmul(&lvm.transpose())?
            .add(&Tensor::eye(n).scale(COV_EPS))?;
        m.w_noise = lwm
            .matmul(&lwm.transpose())?
            .add(&Tensor::eye(q).scale(COV_EPS))?;
        Ok(m)
    };

    let val_idx: Vec<usize> = if ds.val_idx.is_empty() {
        ds.train_idx.clone()
    } else {
        ds.val_idx.clone()
    };
    let v0 = filter_mse(&model_at(&lv, &lw)?, ds, &val_idx)?;
    let mut trace = vec![v0];
    let mut best = (v0, lv.clone(), lw.clone());
    let mut sgd = SgdState::default();
    let mut diverged = false;
    let mut step = 0usize;

    'epochs: for epoch in 0..cfg.epochs {
        for batch in cfg.batches(&ds.train_idx, epoch) {
            let mut grad_lv = Tensor::zeros(&[n, n]);
            let mut grad_lw = Tensor::zeros(&[q, q]);
            let mut steps_acc = 0usize;
            for &i in &batch {
                let traj = ds.trajectory(i);
                let t_total = traj.len();
                let mut z_carry = traj.state(0);
                let mut p_carry = Tensor::eye(n);
                let mut start = 1usize;
                while start < t_total {
                    let end = (start + window).min(t_total);
                    let tape = Tape::new();
                    let lv_leaf = tape.leaf(lv.clone());
                    let lw_leaf = tape.leaf(lw.clone());
                    let (loss, z_end, p_end, steps) = tape_filter_window(
                        &tape, model0, lv_leaf, lw_leaf, &traj.x, &traj.s, &traj.z, &z_carry,
                        &p_carry, start..end,
                    )?;
                    if !tape.value(loss).item()?.is_finite() {
                        diverged = true;
                        break 'epochs;
                    }
                    let grads = tape.backward(loss)?;
                    grad_lv = grad_lv.add(&grads.wrt(lv_leaf))?;
                    grad_lw = grad_lw.add(&grads.wrt(lw_leaf))?;
                    steps_acc += steps;
                    z_carry = z_end;
                    p_carry = p_end;
                    start = end;
                }
            }
            let scale = 1.0 / steps_acc.max(1) as f64;
            let mut params = vec![lv.clone(), lw.clone()];
            let grads = vec![grad_lv.scale(scale), grad_lw.scale(scale)];
            sgd_step(&mut params, &grads, &mut sgd, cfg, step)?;
            step += 1;
            lv = params[0].clone();
            lw = params[1].clone();
        }
        let v = filter_mse(&model_at(&lv, &lw)?, ds, &val_idx)?;
        if !v.is_finite() {
            diverged = true;
            break;
        }
        trace.push(v);
        if v < best.0 {
            best = (v, lv.clone(), lw.clone());
        }
    }

    let final_model = model_at(&best.1, &best.2)?;
    Ok(FittedCovariances {
        v_noise: final_model.v_noise,
        w_noise: final_model.w_noise,
        val_trace: trace,
        diverged,
    })
}

/// Gradient of a single-trajectory filter loss with respect to the scalar
/// factors of `V` and `W` (for finite-difference verification).
pub fn covariance_gradient_scalar(
    model0: &StateSpaceModel,
    traj: &super::Trajectory,
) -> Result<(f64, f64, f64)> {
    let lv0 = factor_of(&model0.v_noise)?;
    let lw0 = factor_of(&model0.w_noise)?;
    let tape = Tape::new();
    let lv = tape.leaf(lv0);
    let lw = tape.leaf(lw0);
    let (loss, _, _, steps) = tape_filter_window(
        &tape,
        model0,
        lv,
        lw,
        &traj.x,
        &traj.s,
        &traj.z,
        &traj.state(0),
        &Tensor::eye(model0.state_dim()),
        1..traj.len(),
    )?;
    let loss_value = tape.value(loss).item()? / steps as f64;
    let grads = tape.backward(loss)?;
    Ok((
        grads.wrt(lv).data()[0] / steps as f64,
        grads.wrt(lw).data()[0] / steps as f64,
        loss_value,
    ))
}

/// Observation encoder for the learned-feature Kalman filter.
#[derive(Debug, Clone)]
pub enum FeatureEncoder {
    Identity,
    Mlp(EncoderMlp),
}

/// Two-layer tanh encoder mapping observations to filter features.
#[derive(Debug, Clone)]
pub struct EncoderMlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl EncoderMlp {
    pub fn new(obs_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = Prng::seed(seed).stream(0xE9C).into_rng();
        EncoderMlp {
            w1: gaussian_tensor(&mut rng, &[hidden, obs_dim]).scale(1.0 / (obs_dim as f64).sqrt()),
            b1: Tensor::zeros(&[hidden]),
            w2: gaussian_tensor(&mut rng, &[obs_dim, hidden]).scale(1.0 / (hidden as f64).sqrt()),
            b2: Tensor::zeros(&[obs_dim]),
        }
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.w1.matmul(x)?.add(&self.b1)?.map(f64::tanh);
        self.w2.matmul(&h)?.add(&self.b2)
    }
}

impl FeatureEncoder {
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            FeatureEncoder::Identity => Ok(x.clone()),
            FeatureEncoder::Mlp(m) => m.encode(x),
        }
    }
}

/// Kalman filtering on encoded observations: the gain sequence comes from the
/// assumed linear model (it does not depend on the data), and the innovation
/// uses `h(x_t)` in place of `x_t`.
pub fn feature_kalman_estimates(
    model: &StateSpaceModel,
    encoder: &FeatureEncoder,
    traj: &super::Trajectory,
    z0: &Tensor,
    p0: &Tensor,
) -> Result<Tensor> {
    let n = model.state_dim();
    let mut state = FilterState::new(z0.clone(), p0.clone());
    let mut out = Vec::with_capacity(traj.len() * n);
    out.extend_from_slice(z0.data());
    for t in 1..traj.len() {
        let encoded = encoder.encode(&traj.obs(t))?;
        state = kalman_step(model, &state, &encoded, &traj.action(t - 1))?;
        out.extend_from_slice(state.z_hat.data());
    }
    Tensor::new(vec![traj.len(), n], out)
}

/// Precomputed Kalman gains for each step (data-independent).
fn gain_schedule(model: &StateSpaceModel, p0: &Tensor, t_steps: usize) -> Result<Vec<Tensor>> {
    let mut p = p0.clone();
    let mut gains = Vec::with_capacity(t_steps);
    for _ in 0..t_steps {
        let p_pred = model
            .a
            .matmul(&p)?
            .matmul(&model.a.transpose())?
            .add(&model.v_noise)?;
        let gain = super::kalman_gain(model, &p_pred)?;
        let closed = Tensor::eye(model.state_dim()).sub(&gain.matmul(&model.c)?)?;
        p = closed
            .matmul(&p_pred)?
            .matmul(&closed.transpose())?
            .add(&gain.matmul(&model.w_noise)?.matmul(&gain.transpose())?)?;
        gains.push(gain);
    }
    Ok(gains)
}

#[derive(Debug, Clone)]
pub struct EncoderTrainOutcome {
    pub encoder: EncoderMlp,
    pub val_trace: Vec<f64>,
    pub diverged: bool,
}

pub fn feature_filter_mse(
    model: &StateSpaceModel,
    encoder: &FeatureEncoder,
    ds: &TrajectoryDataset,
    idx: &[usize],
) -> Result<f64> {
    let n = model.state_dim();
    let mut total = 0.0;
    for &i in idx {
        let traj = ds.trajectory(i);
        let est = feature_kalman_estimates(model, encoder, &traj, &traj.state(0), &Tensor::eye(n))?;
        total += state_mse(&est, &traj.z);
    }
    Ok(total / idx.len().max(1) as f64)
}

/// Trains the observation encoder end-to-end through the filter (gains fixed
/// by the model), minimizing state error.
pub fn train_feature_encoder(
    model: &StateSpaceModel,
    enc0: &EncoderMlp,
    ds: &TrajectoryDataset,
    cfg: &TrainConfig,
) -> Result<EncoderTrainOutcome> {
    cfg.validate(ds.train_idx.len())?;
    let n = model.state_dim();
    let t_steps = ds.steps();
    let gains = gain_schedule(model, &Tensor::eye(n), t_steps)?;
    let mut enc = enc0.clone();
    let val_idx: Vec<usize> = if ds.val_idx.is_empty() {
        ds.train_idx.clone()
    } else {
        ds.val_idx.clone()
    };
    let v0 = feature_filter_mse(model, &FeatureEncoder::Mlp(enc.clone()), ds, &val_idx)?;
    let mut trace = vec![v0];
    let mut best = (v0, enc.clone());
    let mut sgd = SgdState::default();
    let mut diverged = false;
    let mut step = 0usize;

    'epochs: for epoch in 0..cfg.epochs {
        for batch in cfg.batches(&ds.train_idx, epoch) {
            let tape = Tape::new();
            let w1 = tape.leaf(enc.w1.clone());
            let b1 = tape.leaf(enc.b1.clone());
            let w2 = tape.leaf(enc.w2.clone());
            let b2 = tape.leaf(enc.b2.clone());
            let a = tape.leaf(model.a.clone());
            let b_mat = tape.leaf(model.b.clone());
            let c = tape.leaf(model.c.clone());
            let mut loss: Option<Var> = None;
            let mut count = 0usize;
            for &i in &batch {
                let traj = ds.trajectory(i);
                let mut z = tape.leaf(traj.state(0));
                for t in 1..traj.len() {
                    let x_leaf = tape.leaf(traj.obs(t));
                    let s_leaf = tape.leaf(traj.action(t - 1));
                    let hid = tape.tanh(tape.add(tape.matmul(w1, x_leaf)?, b1)?)?;
                    let encoded = tape.add(tape.matmul(w2, hid)?, b2)?;
                    let pred = tape.add(tape.matmul(a, z)?, tape.matmul(b_mat, s_leaf)?)?;
                    let innov = tape.sub(encoded, tape.matmul(c, pred)?)?;
                    let gain = tape.leaf(gains[t - 1].clone());
                    z = tape.add(pred, tape.matmul(gain, innov)?)?;
                    let err = tape.sub(z, tape.leaf(traj.state(t)))?;
                    let sq = tape.squared_l2(err)?;
                    loss = Some(match loss {
                        None => sq,
                        Some(acc) => tape.add(acc, sq)?,
                    });
                    count += 1;
                }
            }
            let loss = tape.scale_const(
                1.0 / count.max(1) as f64,
                loss.ok_or_else(|| Error::InvalidArgument("empty batch".into()))?,
            )?;
            if !tape.value(loss).item()?.is_finite() {
                diverged = true;
                break 'epochs;
            }
            let grads = tape.backward(loss)?;
            let mut params = vec![
                enc.w1.clone(),
                enc.b1.clone(),
                enc.w2.clone(),
                enc.b2.clone(),
            ];
            let g = vec![
                grads.wrt(w1),
                grads.wrt(b1),
                grads.wrt(w2),
                grads.wrt(b2),
            ];
            sgd_step(&mut params, &g, &mut sgd, cfg, step)?;
            step += 1;
            enc.w1 = params[0].clone();
            enc.b1 = params[1].clone();
            enc.w2 = params[2].clone();
            enc.b2 = params[3].clone();
        }
        let v = feature_filter_mse(model, &FeatureEncoder::Mlp(enc.clone()), ds, &val_idx)?;
        if !v.is_finite() {
            diverged = true;
            break;
        }
        trace.push(v);
        if v < best.0 {
            best = (v, enc.clone());
        }
    }

    Ok(EncoderTrainOutcome {
        encoder: best.1,
        val_trace: trace,
        diverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::finite_diff;
    use crate::statespace::{gen_trajectory_dataset, kalman_estimates, ZeroPolicy};
    use crate::train::TrainConfig;

    fn rotation_model(noise_v: f64, noise_w: f64) -> StateSpaceModel {
        let th = 0.5f64;
        StateSpaceModel::new(
            Tensor::from_rows(&[
                vec![0.9 * th.cos(), -0.9 * th.sin()],
                vec![0.9 * th.sin(), 0.9 * th.cos()],
            ])
            .unwrap(),
            Tensor::from_rows(&[vec![0.1], vec![0.0]]).unwrap(),
            Tensor::eye(2),
            Tensor::eye(2),
            Tensor::eye(1),
            Tensor::eye(2).scale(noise_v),
            Tensor::eye(2).scale(noise_w),
        )
        .unwrap()
    }

    #[test]
    fn zero_gain_network_follows_open_loop_prediction() {
        let model = rotation_model(0.05, 0.2);
        let net = GainNetwork::new(2, 2, 1, 8, 0).zeroed();
        let dynamics = Dynamics::Linear(&model);
        let z = Tensor::vector(vec![1.0, -0.5]);
        let s = Tensor::vector(vec![0.3]);
        let x = Tensor::vector(vec![9.9, 9.9]);
        let (z_next, _) =
            kalmannet_step(&dynamics, &net, &z, &net.initial_hidden(), &x, &s).unwrap();
        let open_loop = model.a.matmul(&z).unwrap().add(&model.b.matmul(&s).unwrap()).unwrap();
        assert_eq!(z_next.data(), open_loop.data());
    }

    #[test]
    fn gain_applied_structurally_reproduces_kalman_means() {
        // feeding the filter's own gain sequence through the learned-gain
        // update structure reproduces kalman_step exactly
        let model = rotation_model(0.05, 0.2);
        let mut policy = ZeroPolicy { action_dim: 1 };
        let traj =
            crate::statespace::simulate(&model, &mut policy, 30, 4, &Tensor::vector(vec![1.0, 0.0]))
                .unwrap();
        let mut state = FilterState::new(traj.state(0), Tensor::eye(2));
        let mut z_struct = traj.state(0);
        for t in 1..traj.len() {
            let p_pred = model
                .a
                .matmul(&state.p_cov)
                .unwrap()
                .matmul(&model.a.transpose())
                .unwrap()
                .add(&model.v_noise)
                .unwrap();
            let gain = crate::statespace::kalman_gain(&model, &p_pred).unwrap();
            // structural update with the oracle gain
            let pred = model
                .a
                .matmul(&z_struct)
                .unwrap()
                .add(&model.b.matmul(&traj.action(t - 1)).unwrap())
                .unwrap();
            let innov = traj.obs(t).sub(&model.c.matmul(&pred).unwrap()).unwrap();
            z_struct = pred.add(&gain.matmul(&innov).unwrap()).unwrap();
            state = kalman_step(&model, &state, &traj.obs(t), &traj.action(t - 1)).unwrap();
            let diff = z_struct.sub(&state.z_hat).unwrap().max_abs();
            assert!(diff <= 1e-12, "t={} diff={}", t, diff);
        }
    }

    #[test]
    fn gain_network_training_improves_validation_mse() {
        let model = rotation_model(0.05, 0.5);
        let mut policy = ZeroPolicy { action_dim: 1 };
        let ds = gen_trajectory_dataset(&model, &mut policy, 40, 30, 17, &Tensor::vector(vec![1.0, 0.0]))
            .unwrap();
        let data = GainTrainData::from_linear(&ds);
        let net0 = GainNetwork::new(2, 2, 1, 16, 3);
        let dynamics = Dynamics::Linear(&model);
        let cfg = TrainConfig::constant(0.02, 7, 12, 0).with_momentum(0.9).with_clip(5.0);
        let out = train_gain_network(&dynamics, &net0, &data, &cfg, 50).unwrap();
        assert!(!out.diverged);
        let first = out.val_trace[0];
        let best = out.val_trace.iter().fold(f64::INFINITY, |m, &v| m.min(v));
        assert!(best < first, "no improvement {} -> {}", first, best);
    }

    #[test]
    fn zero_epochs_returns_initial_network() {
        let model = rotation_model(0.05, 0.5);
        let mut policy = ZeroPolicy { action_dim: 1 };
        let ds = gen_trajectory_dataset(&model, &mut policy, 10, 8, 3, &Tensor::vector(vec![1.0, 0.0]))
            .unwrap();
        let data = GainTrainData::from_linear(&ds);
        let net0 = GainNetwork::new(2, 2, 1, 8, 1);
        let cfg = TrainConfig::constant(0.01, 4, 0, 0);
        let out = train_gain_network(&Dynamics::Linear(&model), &net0, &data, &cfg, 50).unwrap();
        assert_eq!(out.net.w_in.data(), net0.w_in.data());
        assert_eq!(out.val_trace.len(), 1);
    }

    #[test]
    fn covariance_bptt_gradient_matches_finite_differences() {
        // scalar system, T = 5, full-window BPTT
        let model = crate::statespace::StateSpaceModel::new(
            Tensor::from_rows(&[vec![0.9]]).unwrap(),
            Tensor::from_rows(&[vec![0.0]]).unwrap(),
            Tensor::from_rows(&[vec![1.0]]).unwrap(),
            Tensor::from_rows(&[vec![1.0]]).unwrap(),
            Tensor::from_rows(&[vec![1.0]]).unwrap(),
            Tensor::from_rows(&[vec![0.3]]).unwrap(),
            Tensor::from_rows(&[vec![0.5]]).unwrap(),
        )
        .unwrap();
        let mut policy = ZeroPolicy { action_dim: 1 };
        let traj =
            crate::statespace::simulate(&model, &mut policy, 5, 11, &Tensor::vector(vec![1.5]))
                .unwrap();
        let (d_lv, d_lw, _) = covariance_gradient_scalar(&model, &traj).unwrap();

        let loss_at = |lv: f64, lw: f64| -> f64 {
            let mut m = model.clone();
            m.v_noise = Tensor::from_rows(&[vec![lv * lv + COV_EPS]]).unwrap();
            m.w_noise = Tensor::from_rows(&[vec![lw * lw + COV_EPS]]).unwrap();
            let est = kalman_estimates(&m, &traj, &traj.state(0), &Tensor::eye(1)).unwrap();
            state_mse(&est, &traj.z)
        };
        let lv0 = (0.3f64 - COV_EPS).sqrt();
        let lw0 = (0.5f64 - COV_EPS).sqrt();
        let fd_v = finite_diff(|v| loss_at(v[0], lw0), &[lv0], 1e-6)[0];
        let fd_w = finite_diff(|v| loss_at(lv0, v[0]), &[lw0], 1e-6)[0];
        assert!(
            (d_lv - fd_v).abs() / fd_v.abs().max(1e-4) <= 1e-4,
            "{} vs {}",
            d_lv,
            fd_v
        );
        assert!(
            (d_lw - fd_w).abs() / fd_w.abs().max(1e-4) <= 1e-4,
            "{} vs {}",
            d_lw,
            fd_w
        );
    }

    #[test]
    fn covariance_fitting_from_inflated_guess_recovers_filter_quality() {
        let true_model = rotation_model(0.1, 0.4);
        let mut policy = ZeroPolicy { action_dim: 1 };
        let ds = gen_trajectory_dataset(
            &true_model,
            &mut policy,
            30,
            40,
            23,
            &Tensor::vector(vec![1.0, 0.0]),
        )
        .unwrap();
        // inflate V only so the implied gain is genuinely wrong
        let mut wrong = true_model.clone();
        wrong.v_noise = true_model.v_noise.scale(25.0);
        let cfg = TrainConfig::constant(0.05, 10, 15, 0).with_momentum(0.9);
        let fitted = fit_covariances(&wrong, &ds, &cfg, 30).unwrap();
        assert!(!fitted.diverged);
        assert!(
            *fitted.val_trace.last().unwrap() <= fitted.val_trace[0] + 1e-12
                || fitted.val_trace.iter().fold(f64::INFINITY, |m, &v| m.min(v))
                    < fitted.val_trace[0]
        );
        let mut model_fit = true_model.clone();
        model_fit.v_noise = fitted.v_noise;
        model_fit.w_noise = fitted.w_noise;
        let oracle_mse = filter_mse(&true_model, &ds, &ds.test_idx).unwrap();
        let fit_mse = filter_mse(&model_fit, &ds, &ds.test_idx).unwrap();
        let wrong_mse = filter_mse(&wrong, &ds, &ds.test_idx).unwrap();
        assert!(
            wrong_mse > 1.02 * oracle_mse,
            "test setup vacuous: wrong {} oracle {}",
            wrong_mse,
            oracle_mse
        );
        assert!(
            fit_mse <= 1.10 * oracle_mse,
            "fitted {} vs oracle {} (wrong start {})",
            fit_mse,
            oracle_mse,
            wrong_mse
        );
    }

    #[test]
    fn identity_encoder_is_exactly_the_kalman_filter() {
        let model = rotation_model(0.05, 0.3);
        let mut policy = ZeroPolicy { action_dim: 1 };
        let traj =
            crate::statespace::simulate(&model, &mut policy, 25, 8, &Tensor::vector(vec![1.0, 0.0]))
                .unwrap();
        let plain = kalman_estimates(&model, &traj, &traj.state(0), &Tensor::eye(2)).unwrap();
        let feat = feature_kalman_estimates(
            &model,
            &FeatureEncoder::Identity,
            &traj,
            &traj.state(0),
            &Tensor::eye(2),
        )
        .unwrap();
        assert_eq!(plain.data(), feat.data());
    }

    #[test]
    fn encoder_training_on_cubed_observations_improves() {
        // observations pass through a fixed invertible cubic
        let model = rotation_model(0.05, 0.01);
        let mut policy = ZeroPolicy { action_dim: 1 };
        let ds = gen_trajectory_dataset(&model, &mut policy, 25, 40, 31, &Tensor::vector(vec![1.0, 0.0]))
            .unwrap();
        let cubed = TrajectoryDataset {
            x: ds.x.map(|v| v * v * v),
            ..ds.clone()
        };
        let enc0 = EncoderMlp::new(2, 16, 5);
        let cfg = TrainConfig::constant(0.05, 10, 20, 0).with_momentum(0.9).with_clip(10.0);
        let out = train_feature_encoder(&model, &enc0, &cubed, &cfg).unwrap();
        assert!(!out.diverged);
        let untrained =
            feature_filter_mse(&model, &FeatureEncoder::Mlp(enc0), &cubed, &cubed.test_idx)
                .unwrap();
        let trained = feature_filter_mse(
            &model,
            &FeatureEncoder::Mlp(out.encoder),
            &cubed,
            &cubed.test_idx,
        )
        .unwrap();
        assert!(
            trained < untrained,
            "trained {} vs untrained {}",
            trained,
            untrained
        );
    }
}
