//! Deep unfolding: a fixed number of solver iterations treated as network
//! layers with trainable per-layer parameters.
//!
//! Three architectures share one parameter container:
//!
//! - LISTA: `s_{k+1} = T_{lambda_k}(W1_k x + mu_k W2_k s_k)`, initialized so
//!   its forward pass reproduces ISTA exactly.
//! - Fully learned unfolded ADMM: the quadratic update becomes
//!   `s_{k+1} = W1_k x + W2_k (v_k - u_k)` with `W1`, `W2`, `lambda_k`,
//!   `mu_k` all trainable; initialized at the ADMM formulas.
//! - Hyperparameter-only unfolded ADMM: trains `{lambda_k, mu_k}` and
//!   recomputes `W1`, `W2` from `lambda_k` each layer, so every layer stays
//!   an exact ADMM iteration.
//!
//! The same machinery, tied across layers and unrolled to a fixed budget,
//! tunes the hyperparameters of a convergent ADMM (a learned optimizer
//! rather than an unfolded network).

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::sparse::{AdmmHyper, Prior, SparseProblem};
use crate::tensor::{read_tensor, write_tensor, SpdFactor, Tensor};
use crate::train::{sgd_step, Dataset, SgdState, Split, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Per-layer trainable parameters. With `tied` the vectors hold one entry
/// shared by all `depth` layers.
#[derive(Debug, Clone)]
pub struct UnfoldedParams {
    pub depth: usize,
    pub tied: bool,
    pub w1: Vec<Tensor>,
    pub w2: Vec<Tensor>,
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
}

impl UnfoldedParams {
    fn idx(&self, k: usize) -> usize {
        if self.tied {
            0
        } else {
            k
        }
    }

    pub fn layer(&self, k: usize) -> (&Tensor, &Tensor, f64, f64) {
        let i = self.idx(k);
        (&self.w1[i], &self.w2[i], self.lambda[i], self.mu[i])
    }

    pub fn stored_layers(&self) -> usize {
        if self.tied {
            1
        } else {
            self.depth
        }
    }

    fn validate(&self) -> Result<()> {
        let want = self.stored_layers();
        if self.depth > 0
            && (self.w1.len() != want
                || self.w2.len() != want
                || self.lambda.len() != want
                || self.mu.len() != want)
        {
            return Err(Error::InvalidArgument(format!(
                "unfolded parameters expect {} stored layers, got w1={} w2={} lambda={} mu={}",
                want,
                self.w1.len(),
                self.w2.len(),
                self.lambda.len(),
                self.mu.len()
            )));
        }
        if self.lambda.iter().any(|&l| l < 0.0) {
            return Err(Error::InvalidArgument("lambda_k must be >= 0".into()));
        }
        Ok(())
    }

    pub fn tie(mut self) -> Self {
        self.tied = true;
        self.w1.truncate(1);
        self.w2.truncate(1);
        self.lambda.truncate(1);
        self.mu.truncate(1);
        self
    }
}

/// LISTA parameters whose forward pass is bit-equivalent to `depth` ISTA
/// iterations with step `mu`: `W1 = mu H^T`, `W2 = I - mu H^T H`,
/// `mu_k = 1`, `lambda_k = mu rho`.
pub fn lista_init(p: &SparseProblem, mu: f64, depth: usize) -> Result<UnfoldedParams> {
    if mu <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "step size must be positive, got {}",
            mu
        )));
    }
    let op = p.effective_operator()?;
    let n = op.cols();
    let w1 = op.transpose().scale(mu);
    let w2 = Tensor::eye(n).sub(&op.t_matmul(&op)?.scale(mu))?;
    let layers = depth.max(1);
    Ok(UnfoldedParams {
        depth,
        tied: false,
        w1: vec![w1; layers],
        w2: vec![w2; layers],
        lambda: vec![mu * p.rho; layers],
        mu: vec![1.0; layers],
    })
}

/// `s_K` of the LISTA recursion from `s_0 = 0`.
pub fn lista_forward(params: &UnfoldedParams, x: &Tensor) -> Result<Tensor> {
    params.validate()?;
    if params.depth == 0 {
        let n = params.w1.first().map(|w| w.rows()).unwrap_or(0);
        return Ok(Tensor::zeros(&[n]));
    }
    let n = params.w1[0].rows();
    let mut s = Tensor::zeros(&[n]);
    for k in 0..params.depth {
        let (w1, w2, lambda, mu) = params.layer(k);
        let pre = w1.matmul(x)?.add(&w2.matmul(&s)?.scale(mu))?;
        s = crate::tensor::soft_threshold(&pre, lambda)?;
    }
    Ok(s)
}

/// Unfolded-ADMM parameters reproducing exact ADMM iterations:
/// `W1 = (H^T H + 2 lambda I)^{-1} H^T`, `W2 = 2 lambda (H^T H + 2 lambda I)^{-1}`.
pub fn admm_unfolded_init(
    p: &SparseProblem,
    hyper: &AdmmHyper,
    depth: usize,
) -> Result<UnfoldedParams> {
    hyper.validate()?;
    let op = p.effective_operator()?;
    let n = op.cols();
    let a = op
        .t_matmul(&op)?
        .add(&Tensor::eye(n).scale(2.0 * hyper.lambda))?;
    let factor = SpdFactor::new(&a)?;
    let w1 = factor.solve(&op.transpose())?;
    let w2 = factor.solve(&Tensor::eye(n).scale(2.0 * hyper.lambda))?;
    let layers = depth.max(1);
    Ok(UnfoldedParams {
        depth,
        tied: false,
        w1: vec![w1; layers],
        w2: vec![w2; layers],
        lambda: vec![hyper.lambda; layers],
        mu: vec![hyper.mu; layers],
    })
}

/// `s_K` of the unfolded ADMM recursion from `u_0 = v_0 = 0`. The proximal
/// step uses weight `rho / (2 lambda_k)`, recomputed from each layer's
/// `lambda_k`.
pub fn unfolded_admm_forward(
    params: &UnfoldedParams,
    rho: f64,
    x: &Tensor,
    prior: &dyn Prior,
) -> Result<Tensor> {
    params.validate()?;
    if params.depth == 0 {
        let n = params.w1.first().map(|w| w.rows()).unwrap_or(0);
        return Ok(Tensor::zeros(&[n]));
    }
    let n = params.w1[0].rows();
    let mut u = Tensor::zeros(&[n]);
    let mut v = Tensor::zeros(&[n]);
    let mut s = Tensor::zeros(&[n]);
    for k in 0..params.depth {
        let (w1, w2, lambda, mu) = params.layer(k);
        s = w1.matmul(x)?.add(&w2.matmul(&v.sub(&u)?)?)?;
        v = prior.prox(&s.add(&u)?, rho / (2.0 * lambda))?;
        u = u.add(&s.sub(&v)?.scale(mu))?;
    }
    Ok(s)
}

/// Which unfolded architecture a training run differentiates through.
#[derive(Debug, Clone)]
pub enum UnfoldedArch {
    Lista,
    /// Fully learned unfolded ADMM (weights free, threshold from lambda_k).
    AdmmFull { rho: f64 },
    /// Hyperparameter-only unfolded ADMM; weights recomputed from lambda_k.
    AdmmHyper { problem: SparseProblem },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: UnfoldedParams,
    /// Mean training loss per epoch, entry 0 being the pre-training loss.
    pub loss_trace: Vec<f64>,
    pub diverged: bool,
}

/// Softplus-reparameterized positive scalar; SGD runs on `raw`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PositiveScalar {
    raw: f64,
}

impl PositiveScalar {
    pub fn from_value(v: f64) -> Self {
        assert!(v > 0.0, "positive reparameterization needs v > 0");
        // inverse softplus
        let raw = if v > 30.0 { v } else { v.exp_m1().ln() };
        PositiveScalar { raw }
    }

    pub fn value(&self) -> f64 {
        if self.raw > 30.0 {
            self.raw
        } else {
            self.raw.exp().ln_1p()
        }
    }

    /// d(value)/d(raw), the sigmoid of `raw`.
    pub fn slope(&self) -> f64 {
        1.0 / (1.0 + (-self.raw).exp())
    }

    pub fn raw(&self) -> f64 {
        self.raw
    }

    pub fn set_raw(&mut self, raw: f64) {
        self.raw = raw;
    }
}

/// Per-layer tape leaves for one forward pass.
struct LayerVars {
    w1: Vec<Var>,
    w2: Vec<Var>,
    /// Lista: lambda_k; ADMM: threshold rho/(2 lambda_k).
    thresh: Vec<Var>,
    /// ADMM only: 2 lambda_k (enters the quadratic update).
    two_lambda: Vec<Var>,
    mu: Vec<Var>,
}

/// Mutable training state: weight tensors plus reparameterized scalars.
struct TrainState {
    w1: Vec<Tensor>,
    w2: Vec<Tensor>,
    lambda: Vec<PositiveScalar>,
    mu: Vec<PositiveScalar>,
    tied: bool,
    depth: usize,
}

impl TrainState {
    fn from_params(p: &UnfoldedParams) -> Self {
        TrainState {
            w1: p.w1.clone(),
            w2: p.w2.clone(),
            lambda: p
                .lambda
                .iter()
                .map(|&l| PositiveScalar::from_value(l.max(1e-12)))
                .collect(),
            mu: p
                .mu
                .iter()
                .map(|&m| PositiveScalar::from_value(m.max(1e-12)))
                .collect(),
            tied: p.tied,
            depth: p.depth,
        }
    }

    fn to_params(&self) -> UnfoldedParams {
        UnfoldedParams {
            depth: self.depth,
            tied: self.tied,
            w1: self.w1.clone(),
            w2: self.w2.clone(),
            lambda: self.lambda.iter().map(|l| l.value()).collect(),
            mu: self.mu.iter().map(|m| m.value()).collect(),
        }
    }

    fn stored(&self) -> usize {
        self.w1.len()
    }
}

fn emit_layer_vars(tape: &Tape, st: &TrainState, arch: &UnfoldedArch) -> LayerVars {
    let stored = st.stored();
    let mut vars = LayerVars {
        w1: Vec::with_capacity(stored),
        w2: Vec::with_capacity(stored),
        thresh: Vec::with_capacity(stored),
        two_lambda: Vec::with_capacity(stored),
        mu: Vec::with_capacity(stored),
    };
    for i in 0..stored {
        vars.w1.push(tape.leaf(st.w1[i].clone()));
        vars.w2.push(tape.leaf(st.w2[i].clone()));
        let lam = st.lambda[i].value();
        match arch {
            UnfoldedArch::Lista => {
                vars.thresh.push(tape.leaf_scalar(lam));
            }
            UnfoldedArch::AdmmFull { .. } | UnfoldedArch::AdmmHyper { .. } => {
                let rho = match arch {
                    UnfoldedArch::AdmmFull { rho } => *rho,
                    UnfoldedArch::AdmmHyper { problem } => problem.rho,
                    UnfoldedArch::Lista => unreachable!(),
                };
                vars.thresh.push(tape.leaf_scalar(rho / (2.0 * lam)));
                vars.two_lambda.push(tape.leaf_scalar(2.0 * lam));
            }
        }
        vars.mu.push(tape.leaf_scalar(st.mu[i].value()));
    }
    vars
}

fn lista_tape_forward(
    tape: &Tape,
    vars: &LayerVars,
    depth: usize,
    tied: bool,
    x: Var,
    n: usize,
) -> Result<Var> {
    let mut s = tape.leaf(Tensor::zeros(&[n]));
    for k in 0..depth {
        let i = if tied { 0 } else { k };
        let w1x = tape.matmul(vars.w1[i], x)?;
        let w2s = tape.matmul(vars.w2[i], s)?;
        let pre = tape.add(w1x, tape.scale(vars.mu[i], w2s)?)?;
        s = tape.soft_threshold(pre, vars.thresh[i])?;
    }
    Ok(s)
}

/// Unrolled ADMM on tape. For the hyperparameter-only architecture the
/// quadratic update is an SPD solve against `H^T H + 2 lambda_k I` built from
/// the layer's `two_lambda` leaf; for the fully learned architecture it is
/// the free `W1 x + W2 (v - u)` map.
struct AdmmTapeContext {
    gram: Option<Var>,
    eye: Option<Var>,
    ht: Option<Tensor>,
}

#[allow(clippy::too_many_arguments)]
fn admm_tape_forward(
    tape: &Tape,
    vars: &LayerVars,
    ctx: &AdmmTapeContext,
    hyper_only: bool,
    depth: usize,
    tied: bool,
    x: &Tensor,
    n: usize,
) -> Result<Var> {
    let mut u = tape.leaf(Tensor::zeros(&[n]));
    let mut v = tape.leaf(Tensor::zeros(&[n]));
    let mut s = tape.leaf(Tensor::zeros(&[n]));
    let x_leaf = tape.leaf(x.clone());
    let ht_x = ctx
        .ht
        .as_ref()
        .map(|ht| tape.leaf(ht.matmul(x).expect("H^T x")));
    // Tied layers share one coefficient matrix; build it once so the SPD
    // factorization is reused across the whole unroll.
    let tied_a = if hyper_only && tied {
        let a = tape.add(
            ctx.gram.expect("gram leaf"),
            tape.scale(vars.two_lambda[0], ctx.eye.expect("identity leaf"))?,
        )?;
        Some(a)
    } else {
        None
    };
    for k in 0..depth {
        let i = if tied { 0 } else { k };
        s = if hyper_only {
            let a = match tied_a {
                Some(a) => a,
                None => tape.add(
                    ctx.gram.expect("gram leaf"),
                    tape.scale(vars.two_lambda[i], ctx.eye.expect("identity leaf"))?,
                )?,
            };
            let coupled = tape.scale(vars.two_lambda[i], tape.sub(v, u)?)?;
            let rhs = tape.add(ht_x.expect("H^T x leaf"), coupled)?;
            tape.spd_solve(a, rhs)?
        } else {
            let w1x = tape.matmul(vars.w1[i], x_leaf)?;
            let w2vu = tape.matmul(vars.w2[i], tape.sub(v, u)?)?;
            tape.add(w1x, w2vu)?
        };
        v = tape.soft_threshold(tape.add(s, u)?, vars.thresh[i])?;
        u = tape.add(u, tape.scale(vars.mu[i], tape.sub(s, v)?)?)?;
    }
    Ok(s)
}

/// Gradient bookkeeping: maps tape gradients on the derived leaves back to
/// the raw reparameterized scalars.
fn chain_scalar_grads(
    grads: &crate::autodiff::Gradients,
    vars: &LayerVars,
    st: &TrainState,
    arch: &UnfoldedArch,
) -> (Vec<f64>, Vec<f64>) {
    let stored = st.stored();
    let mut d_lambda_raw = vec![0.0; stored];
    let mut d_mu_raw = vec![0.0; stored];
    for i in 0..stored {
        let lam = st.lambda[i].value();
        let d_lambda = match arch {
            UnfoldedArch::Lista => grads.wrt_scalar(vars.thresh[i]),
            UnfoldedArch::AdmmFull { rho } => {
                -(rho / (2.0 * lam * lam)) * grads.wrt_scalar(vars.thresh[i])
            }
            UnfoldedArch::AdmmHyper { problem } => {
                2.0 * grads.wrt_scalar(vars.two_lambda[i])
                    - (problem.rho / (2.0 * lam * lam)) * grads.wrt_scalar(vars.thresh[i])
            }
        };
        d_lambda_raw[i] = st.lambda[i].slope() * d_lambda;
        d_mu_raw[i] = st.mu[i].slope() * grads.wrt_scalar(vars.mu[i]);
    }
    (d_lambda_raw, d_mu_raw)
}

/// Recomputes `W1_k`, `W2_k` from each layer's `lambda_k` so every layer is
/// an exact ADMM iteration (the hyperparameter-only architecture).
pub fn materialize_admm_weights(
    p: &SparseProblem,
    params: &UnfoldedParams,
) -> Result<UnfoldedParams> {
    let op = p.effective_operator()?;
    let n = op.cols();
    let gram = op.t_matmul(&op)?;
    let ht = op.transpose();
    let mut out = params.clone();
    for i in 0..params.stored_layers() {
        let a = gram.add(&Tensor::eye(n).scale(2.0 * params.lambda[i]))?;
        let factor = SpdFactor::new(&a)?;
        out.w1[i] = factor.solve(&ht)?;
        out.w2[i] = factor.solve(&Tensor::eye(n).scale(2.0 * params.lambda[i]))?;
    }
    Ok(out)
}

fn forward_loss_plain(
    arch: &UnfoldedArch,
    params: &UnfoldedParams,
    ds: &Dataset,
    indices: &[usize],
) -> Result<f64> {
    let eval_params = match arch {
        UnfoldedArch::AdmmHyper { problem } => materialize_admm_weights(problem, params)?,
        _ => params.clone(),
    };
    let mut total = 0.0;
    for &i in indices {
        let x = ds.input(i);
        let target = ds.target(i);
        let pred = match arch {
            UnfoldedArch::Lista => lista_forward(&eval_params, &x)?,
            UnfoldedArch::AdmmFull { rho } => {
                unfolded_admm_forward(&eval_params, *rho, &x, &crate::sparse::L1Prior)?
            }
            UnfoldedArch::AdmmHyper { problem } => {
                unfolded_admm_forward(&eval_params, problem.rho, &x, &crate::sparse::L1Prior)?
            }
        };
        let d = pred.sub(&target)?;
        total += d.dot(&d)?;
    }
    Ok(total / indices.len().max(1) as f64)
}

/// End-to-end training of an unfolded network by mini-batch SGD on the
/// empirical squared error. Returns the parameters with the best seen
/// training loss; a NaN loss aborts with the last finite iterate.
pub fn train_unfolded(
    arch: &UnfoldedArch,
    init: &UnfoldedParams,
    ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    init.validate()?;
    cfg.validate(ds.train_idx.len())?;
    let hyper_only = matches!(arch, UnfoldedArch::AdmmHyper { .. });
    let mut st = TrainState::from_params(init);
    let n = init.w1[0].rows();

    let ctx = match arch {
        UnfoldedArch::AdmmHyper { problem } => {
            let op = problem.effective_operator()?;
            AdmmTapeContext {
                gram: None, // leaves are created per tape below; keep tensors here
                eye: None,
                ht: Some(op.transpose()),
            }
        }
        _ => AdmmTapeContext {
            gram: None,
            eye: None,
            ht: None,
        },
    };
    let gram_tensor = match arch {
        UnfoldedArch::AdmmHyper { problem } => {
            let op = problem.effective_operator()?;
            Some(op.t_matmul(&op)?)
        }
        _ => None,
    };

    let initial_loss = forward_loss_plain(arch, init, ds, &ds.train_idx)?;
    let mut loss_trace = vec![initial_loss];
    let mut best = (initial_loss, st.to_params());
    let mut sgd = SgdState::default();
    let mut diverged = false;
    let mut step = 0usize;

    'epochs: for epoch in 0..cfg.epochs {
        for batch in cfg.batches(&ds.train_idx, epoch) {
            let tape = Tape::new();
            let vars = emit_layer_vars(&tape, &st, arch);
            let tape_ctx = AdmmTapeContext {
                gram: gram_tensor.as_ref().map(|g| tape.leaf(g.clone())),
                eye: gram_tensor.as_ref().map(|_| tape.leaf(Tensor::eye(n))),
                ht: ctx.ht.clone(),
            };
            let mut loss: Option<Var> = None;
            for &i in &batch {
                let x = ds.input(i);
                let target = tape.leaf(ds.target(i));
                let out = match arch {
                    UnfoldedArch::Lista => {
                        let x_leaf = tape.leaf(x);
                        lista_tape_forward(&tape, &vars, st.depth, st.tied, x_leaf, n)?
                    }
                    _ => admm_tape_forward(
                        &tape, &vars, &tape_ctx, hyper_only, st.depth, st.tied, &x, n,
                    )?,
                };
                let err = tape.sub(out, target)?;
                let sq = tape.squared_l2(err)?;
                loss = Some(match loss {
                    None => sq,
                    Some(acc) => tape.add(acc, sq)?,
                });
            }
            let loss = tape.scale_const(1.0 / batch.len() as f64, loss.expect("non-empty batch"))?;
            let loss_value = tape.value(loss).item()?;
            if !loss_value.is_finite() {
                diverged = true;
                break 'epochs;
            }
            let grads = tape.backward(loss)?;
            let (d_lraw, d_mraw) = chain_scalar_grads(&grads, &vars, &st, arch);

            let mut param_tensors: Vec<Tensor> = Vec::new();
            let mut grad_tensors: Vec<Tensor> = Vec::new();
            if !hyper_only {
                for i in 0..st.stored() {
                    param_tensors.push(st.w1[i].clone());
                    grad_tensors.push(grads.wrt(vars.w1[i]));
                    param_tensors.push(st.w2[i].clone());
                    grad_tensors.push(grads.wrt(vars.w2[i]));
                }
            }
            let raws: Vec<f64> = st
                .lambda
                .iter()
                .map(|l| l.raw())
                .chain(st.mu.iter().map(|m| m.raw()))
                .collect();
            let raw_grads: Vec<f64> = d_lraw.iter().chain(d_mraw.iter()).copied().collect();
            param_tensors.push(Tensor::vector(raws));
            grad_tensors.push(Tensor::vector(raw_grads));

            sgd_step(&mut param_tensors, &grad_tensors, &mut sgd, cfg, step)?;
            step += 1;

            let stored = st.stored();
            if !hyper_only {
                for i in 0..stored {
                    st.w1[i] = param_tensors[2 * i].clone();
                    st.w2[i] = param_tensors[2 * i + 1].clone();
                }
            }
            let raw_t = param_tensors.last().expect("raw scalars present");
            for i in 0..stored {
                st.lambda[i].set_raw(raw_t.data()[i]);
                st.mu[i].set_raw(raw_t.data()[stored + i]);
            }
        }
        let params_now = st.to_params();
        let epoch_loss = forward_loss_plain(arch, &params_now, ds, &ds.train_idx)?;
        if !epoch_loss.is_finite() {
            diverged = true;
            break;
        }
        loss_trace.push(epoch_loss);
        if epoch_loss < best.0 {
            best = (epoch_loss, params_now);
        }
    }

    Ok(TrainOutcome {
        params: best.1,
        loss_trace,
        diverged,
    })
}

#[derive(Debug, Clone)]
pub struct TunedAdmm {
    pub hyper: AdmmHyper,
    /// Mean validation loss per epoch, entry 0 at `hyper0`.
    pub loss_trace: Vec<f64>,
    pub diverged: bool,
}

/// Loss and `[d/d lambda, d/d mu]` of one unrolled-ADMM sample, for
/// stationarity and finite-difference checks as well as training.
pub fn admm_unroll_gradient(
    p: &SparseProblem,
    hyper: &AdmmHyper,
    x: &Tensor,
    target: &Tensor,
    budget: usize,
) -> Result<(f64, f64, f64)> {
    hyper.validate()?;
    let op = p.effective_operator()?;
    let n = op.cols();
    let tape = Tape::new();
    let gram = tape.leaf(op.t_matmul(&op)?);
    let eye = tape.leaf(Tensor::eye(n));
    let two_lambda = tape.leaf_scalar(2.0 * hyper.lambda);
    let thresh = tape.leaf_scalar(p.rho / (2.0 * hyper.lambda));
    let mu = tape.leaf_scalar(hyper.mu);
    let vars = LayerVars {
        w1: vec![],
        w2: vec![],
        thresh: vec![thresh],
        two_lambda: vec![two_lambda],
        mu: vec![mu],
    };
    let ctx = AdmmTapeContext {
        gram: Some(gram),
        eye: Some(eye),
        ht: Some(op.transpose()),
    };
    let out = admm_tape_forward(&tape, &vars, &ctx, true, budget, true, x, n)?;
    let err = tape.sub(out, tape.leaf(target.clone()))?;
    let loss = tape.squared_l2(err)?;
    let loss_value = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;
    let lam = hyper.lambda;
    let d_lambda = 2.0 * grads.wrt_scalar(two_lambda)
        - (p.rho / (2.0 * lam * lam)) * grads.wrt_scalar(thresh);
    let d_mu = grads.wrt_scalar(mu);
    Ok((d_lambda, d_mu, loss_value))
}

/// Learned-optimizer tuning of ADMM's `[lambda, mu]` by SGD through a fixed
/// unroll budget. Returns the hyperparameters with the best validation loss
/// seen (never worse than `hyper0`).
pub fn learned_admm_tune(
    p: &SparseProblem,
    hyper0: &AdmmHyper,
    ds: &Dataset,
    cfg: &TrainConfig,
    budget: usize,
) -> Result<TunedAdmm> {
    hyper0.validate()?;
    cfg.validate(ds.train_idx.len())?;
    let arch = UnfoldedArch::AdmmHyper {
        problem: p.clone(),
    };
    let init = UnfoldedParams {
        depth: budget,
        tied: true,
        w1: vec![Tensor::zeros(&[p.code_dim(), ds.input(0).len()])],
        w2: vec![Tensor::zeros(&[p.code_dim(), p.code_dim()])],
        lambda: vec![hyper0.lambda],
        mu: vec![hyper0.mu],
    };
    let val_loss = |params: &UnfoldedParams| -> Result<f64> {
        let idx = if ds.val_idx.is_empty() {
            &ds.train_idx
        } else {
            &ds.val_idx
        };
        forward_loss_plain(&arch, params, ds, idx)
    };

    let v0 = val_loss(&init)?;
    let mut best = (v0, hyper0.clone());
    let mut trace = vec![v0];
    let mut st = TrainState::from_params(&init);
    let mut sgd = SgdState::default();
    let mut diverged = false;
    let mut step = 0usize;

    'epochs: for epoch in 0..cfg.epochs {
        for batch in cfg.batches(&ds.train_idx, epoch) {
            let mut d_lam_raw = 0.0;
            let mut d_mu_raw = 0.0;
            let mut batch_loss = 0.0;
            let hyper_now = AdmmHyper {
                lambda: st.lambda[0].value(),
                mu: st.mu[0].value(),
                ..hyper0.clone()
            };
            for &i in &batch {
                let (dl, dm, l) =
                    admm_unroll_gradient(p, &hyper_now, &ds.input(i), &ds.target(i), budget)?;
                d_lam_raw += st.lambda[0].slope() * dl;
                d_mu_raw += st.mu[0].slope() * dm;
                batch_loss += l;
            }
            let inv = 1.0 / batch.len() as f64;
            batch_loss *= inv;
            if !batch_loss.is_finite() {
                diverged = true;
                break 'epochs;
            }
            let mut params = vec![Tensor::vector(vec![
                st.lambda[0].raw(),
                st.mu[0].raw(),
            ])];
            let grads = vec![Tensor::vector(vec![d_lam_raw * inv, d_mu_raw * inv])];
            sgd_step(&mut params, &grads, &mut sgd, cfg, step)?;
            step += 1;
            st.lambda[0].set_raw(params[0].data()[0]);
            st.mu[0].set_raw(params[0].data()[1]);
        }
        let candidate = st.to_params();
        let v = val_loss(&candidate)?;
        if !v.is_finite() {
            diverged = true;
            break;
        }
        trace.push(v);
        if v < best.0 {
            best = (
                v,
                AdmmHyper {
                    lambda: candidate.lambda[0],
                    mu: candidate.mu[0],
                    ..hyper0.clone()
                },
            );
        }
    }

    Ok(TunedAdmm {
        hyper: best.1,
        loss_trace: trace,
        diverged,
    })
}

/// JSON manifest stored next to the layer tensor files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamsManifest {
    pub schema: u32,
    pub kind: String,
    #[serde(rename = "K")]
    pub depth: usize,
    pub tied: bool,
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    /// Tensor file names, role-ordered.
    pub tensors: Vec<String>,
}

impl ParamsManifest {
    pub fn parse(json: &str) -> Result<Self> {
        let m: ParamsManifest = serde_json::from_str(json)?;
        if m.schema != 1 {
            return Err(Error::Format(format!(
                "unsupported manifest schema {}",
                m.schema
            )));
        }
        Ok(m)
    }
}

/// Writes `manifest.json` plus one tensor file per stored weight.
pub fn save_params(dir: impl AsRef<Path>, params: &UnfoldedParams, kind: &str) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    for (i, w) in params.w1.iter().enumerate() {
        let name = format!("w1_{:03}.tnsr", i);
        write_tensor(dir.join(&name), w)?;
        tensors.push(name);
    }
    for (i, w) in params.w2.iter().enumerate() {
        let name = format!("w2_{:03}.tnsr", i);
        write_tensor(dir.join(&name), w)?;
        tensors.push(name);
    }
    let manifest = ParamsManifest {
        schema: 1,
        kind: kind.to_string(),
        depth: params.depth,
        tied: params.tied,
        lambda: params.lambda.clone(),
        mu: params.mu.clone(),
        tensors,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn load_params(dir: impl AsRef<Path>) -> Result<(UnfoldedParams, String)> {
    let dir = dir.as_ref();
    let manifest = ParamsManifest::parse(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let stored = if manifest.tied { 1 } else { manifest.depth.max(1) };
    if manifest.tensors.len() != 2 * stored
        || manifest.lambda.len() != stored
        || manifest.mu.len() != stored
    {
        return Err(Error::Format(format!(
            "manifest inconsistent: {} stored layers but {} tensors, {} lambda, {} mu",
            stored,
            manifest.tensors.len(),
            manifest.lambda.len(),
            manifest.mu.len()
        )));
    }
    let mut w1 = Vec::new();
    let mut w2 = Vec::new();
    for name in &manifest.tensors[..stored] {
        w1.push(read_tensor(dir.join(name))?);
    }
    for name in &manifest.tensors[stored..] {
        w2.push(read_tensor(dir.join(name))?);
    }
    Ok((
        UnfoldedParams {
            depth: manifest.depth,
            tied: manifest.tied,
            w1,
            w2,
            lambda: manifest.lambda,
            mu: manifest.mu,
        },
        manifest.kind,
    ))
}

/// Held-out mean squared error of an unfolded forward pass.
pub fn unfolded_mse(
    arch: &UnfoldedArch,
    params: &UnfoldedParams,
    ds: &Dataset,
    split: Split,
) -> Result<f64> {
    forward_loss_plain(arch, params, ds, ds.indices(split))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::finite_diff;
    use crate::sparse::{admm, ista, random_instance, L1Prior};
    use crate::train::gen_sparse_dataset;

    #[test]
    fn lista_init_is_bit_equivalent_to_ista() {
        let (p, _, _) = random_instance(8, 16, 3, 0.05, 0.2, 91);
        let mu = p.default_step().unwrap();
        let params = lista_init(&p, mu, 10).unwrap();
        for trial in 0..10 {
            let (_, x, _) = random_instance(8, 16, 3, 0.05, 0.2, 300 + trial);
            let net = lista_forward(&params, &x).unwrap();
            let solver = ista(&p, &x, mu, 10).unwrap();
            let diff = net.sub(&solver.s).unwrap().max_abs();
            assert!(diff <= 1e-12, "trial {} diff {}", trial, diff);
        }
    }

    #[test]
    fn lista_depth_zero_returns_zero() {
        let (p, x, _) = random_instance(8, 16, 3, 0.05, 0.2, 12);
        let params = lista_init(&p, 0.1, 0).unwrap();
        assert_eq!(lista_forward(&params, &x).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn lista_single_exact_step() {
        let p = SparseProblem::identity_dict(Tensor::eye(4), 0.0, 0.0).unwrap();
        let params = lista_init(&p, 1.0, 1).unwrap();
        let x = Tensor::vector(vec![1.0, -2.0, 0.5, 3.0]);
        assert_eq!(lista_forward(&params, &x).unwrap().data(), x.data());
    }

    #[test]
    fn lista_zero_weights_zero_output() {
        let params = UnfoldedParams {
            depth: 3,
            tied: false,
            w1: vec![Tensor::zeros(&[4, 2]); 3],
            w2: vec![Tensor::zeros(&[4, 4]); 3],
            lambda: vec![0.1; 3],
            mu: vec![1.0; 3],
        };
        let out = lista_forward(&params, &Tensor::vector(vec![1.0, 1.0])).unwrap();
        assert_eq!(out.max_abs(), 0.0);
    }

    #[test]
    fn unfolded_admm_init_matches_admm_iterations() {
        let (p, _, _) = random_instance(8, 16, 3, 0.05, 0.2, 17);
        let hyper = AdmmHyper {
            lambda: 0.8,
            mu: 0.9,
            max_iter: 12,
            tol: 1e-300, // force exactly 12 iterations
        };
        let params = admm_unfolded_init(&p, &hyper, 12).unwrap();
        for trial in 0..10 {
            let (_, x, _) = random_instance(8, 16, 3, 0.05, 0.2, 400 + trial);
            let net = unfolded_admm_forward(&params, p.rho, &x, &L1Prior).unwrap();
            let solver = admm(&p, &x, &hyper, &L1Prior).unwrap();
            let diff = net.sub(&solver.s).unwrap().max_abs();
            assert!(diff <= 1e-12, "trial {} diff {}", trial, diff);
        }
    }

    #[test]
    fn unfolded_admm_zero_input_zero_output() {
        let (p, _, _) = random_instance(8, 16, 3, 0.05, 0.2, 17);
        let params = admm_unfolded_init(&p, &AdmmHyper::default(), 5).unwrap();
        let out = unfolded_admm_forward(&params, p.rho, &Tensor::zeros(&[8]), &L1Prior).unwrap();
        assert_eq!(out.max_abs(), 0.0);
    }

    #[test]
    fn taped_forwards_match_plain_forwards() {
        let (p, x, _) = random_instance(6, 12, 3, 0.05, 0.3, 55);
        let mu = p.default_step().unwrap();
        let params = lista_init(&p, mu, 6).unwrap();
        let plain = lista_forward(&params, &x).unwrap();
        let tape = Tape::new();
        let st = TrainState::from_params(&params);
        let vars = emit_layer_vars(&tape, &st, &UnfoldedArch::Lista);
        let x_leaf = tape.leaf(x.clone());
        let out = lista_tape_forward(&tape, &vars, 6, false, x_leaf, 12).unwrap();
        // positivity reparameterization rounds lambda/mu through softplus
        let diff = tape.value(out).sub(&plain).unwrap().max_abs();
        assert!(diff <= 1e-9, "diff {}", diff);

        let hyper = AdmmHyper::new(0.7, 0.8).unwrap();
        let aparams = admm_unfolded_init(&p, &hyper, 6).unwrap();
        let plain = unfolded_admm_forward(&aparams, p.rho, &x, &L1Prior).unwrap();
        let tape = Tape::new();
        let arch = UnfoldedArch::AdmmHyper { problem: p.clone() };
        let st = TrainState::from_params(&aparams);
        let vars = emit_layer_vars(&tape, &st, &arch);
        let op = p.effective_operator().unwrap();
        let ctx = AdmmTapeContext {
            gram: Some(tape.leaf(op.t_matmul(&op).unwrap())),
            eye: Some(tape.leaf(Tensor::eye(12))),
            ht: Some(op.transpose()),
        };
        let out = admm_tape_forward(&tape, &vars, &ctx, true, 6, false, &x, 12).unwrap();
        let diff = tape.value(out).sub(&plain).unwrap().max_abs();
        assert!(diff <= 1e-9, "admm diff {}", diff);
    }

    #[test]
    fn bptt_gradients_match_finite_differences() {
        // LISTA, every trainable leaf of a K=5 network
        let (p, x, s_true) = random_instance(4, 6, 2, 0.05, 0.3, 71);
        let mu = p.default_step().unwrap();
        let params = lista_init(&p, mu, 5).unwrap();

        let loss_at = |w1_0: &Tensor, lam0: f64, mu0: f64| -> f64 {
            let mut q = params.clone();
            q.w1[0] = w1_0.clone();
            q.lambda[0] = lam0;
            q.mu[0] = mu0;
            let out = lista_forward(&q, &x).unwrap();
            let d = out.sub(&s_true).unwrap();
            d.dot(&d).unwrap()
        };

        let tape = Tape::new();
        let st = TrainState::from_params(&params);
        let vars = emit_layer_vars(&tape, &st, &UnfoldedArch::Lista);
        let x_leaf = tape.leaf(x.clone());
        let out = lista_tape_forward(&tape, &vars, 5, false, x_leaf, 6).unwrap();
        let err = tape.sub(out, tape.leaf(s_true.clone())).unwrap();
        let loss = tape.squared_l2(err).unwrap();
        let grads = tape.backward(loss).unwrap();

        // lambda/mu pass through softplus; compare at the reparameterized
        // values actually used on the tape
        let lam0 = st.lambda[0].value();
        let mu0 = st.mu[0].value();

        let g_w1 = grads.wrt(vars.w1[0]);
        let fd_w1 = finite_diff(
            |v| {
                loss_at(
                    &Tensor::new(vec![6, 4], v.to_vec()).unwrap(),
                    lam0,
                    mu0,
                )
            },
            params.w1[0].data(),
            1e-6,
        );
        for (a, f) in g_w1.data().iter().zip(&fd_w1) {
            assert!((a - f).abs() / f.abs().max(1e-2) <= 1e-4, "{} vs {}", a, f);
        }

        let g_lam = grads.wrt_scalar(vars.thresh[0]);
        let fd_lam = finite_diff(|v| loss_at(&params.w1[0], v[0], mu0), &[lam0], 1e-6)[0];
        assert!(
            (g_lam - fd_lam).abs() / fd_lam.abs().max(1e-2) <= 1e-4,
            "{} vs {}",
            g_lam,
            fd_lam
        );

        let g_mu = grads.wrt_scalar(vars.mu[0]);
        let fd_mu = finite_diff(|v| loss_at(&params.w1[0], lam0, v[0]), &[mu0], 1e-6)[0];
        assert!(
            (g_mu - fd_mu).abs() / fd_mu.abs().max(1e-2) <= 1e-4,
            "{} vs {}",
            g_mu,
            fd_mu
        );
    }

    #[test]
    fn admm_unroll_gradient_matches_finite_differences_1d() {
        // single-sample 1-D problem per the contract
        let h = Tensor::from_rows(&[vec![1.0]]).unwrap();
        let p = SparseProblem::identity_dict(h, 0.4, 0.0).unwrap();
        let x = Tensor::vector(vec![1.7]);
        let target = Tensor::vector(vec![0.9]);
        let hyper = AdmmHyper::new(0.9, 0.7).unwrap();
        let (dl, dm, _) = admm_unroll_gradient(&p, &hyper, &x, &target, 12).unwrap();

        let loss = |lam: f64, mu: f64| {
            let q = UnfoldedParams {
                depth: 12,
                tied: true,
                w1: vec![Tensor::zeros(&[1, 1])],
                w2: vec![Tensor::zeros(&[1, 1])],
                lambda: vec![lam],
                mu: vec![mu],
            };
            let arch = UnfoldedArch::AdmmHyper { problem: p.clone() };
            // reuse the plain forward through the public entry point
            let out = match &arch {
                UnfoldedArch::AdmmHyper { problem } => {
                    let pp = admm_unfolded_init(
                        problem,
                        &AdmmHyper {
                            lambda: lam,
                            mu,
                            ..AdmmHyper::default()
                        },
                        12,
                    )
                    .unwrap();
                    let _ = q;
                    unfolded_admm_forward(&pp, problem.rho, &x, &L1Prior).unwrap()
                }
                _ => unreachable!(),
            };
            let d = out.sub(&target).unwrap();
            d.dot(&d).unwrap()
        };
        let fd_l = finite_diff(|v| loss(v[0], hyper.mu), &[hyper.lambda], 1e-6)[0];
        let fd_m = finite_diff(|v| loss(hyper.lambda, v[0]), &[hyper.mu], 1e-6)[0];
        assert!((dl - fd_l).abs() / fd_l.abs().max(1e-3) <= 1e-4, "{} vs {}", dl, fd_l);
        assert!((dm - fd_m).abs() / fd_m.abs().max(1e-3) <= 1e-4, "{} vs {}", dm, fd_m);
    }

    #[test]
    fn zero_learning_rate_is_noop_training() {
        let ds = gen_sparse_dataset(6, 12, 2, 0.05, 40, 5).unwrap();
        let mu = ds.problem.default_step().unwrap();
        let mut p = ds.problem.clone();
        p.rho = 0.1;
        let init = lista_init(&p, mu, 4).unwrap();
        let cfg = TrainConfig::constant(0.0, 8, 3, 0);
        let out = train_unfolded(&UnfoldedArch::Lista, &init, &ds.data, &cfg).unwrap();
        for (a, b) in out.params.w1[0].data().iter().zip(init.w1[0].data()) {
            assert_eq!(a, b);
        }
        assert!((out.params.lambda[0] - init.lambda[0]).abs() <= 1e-12);
    }

    #[test]
    fn tiny_learning_rate_changes_loss_negligibly() {
        let ds = gen_sparse_dataset(6, 12, 2, 0.05, 30, 6).unwrap();
        let mut p = ds.problem.clone();
        p.rho = 0.1;
        let mu = p.default_step().unwrap();
        let init = lista_init(&p, mu, 4).unwrap();
        let cfg = TrainConfig::constant(1e-8, ds.data.train_idx.len(), 1, 0);
        let out = train_unfolded(&UnfoldedArch::Lista, &init, &ds.data, &cfg).unwrap();
        let before = out.loss_trace[0];
        let after = *out.loss_trace.last().unwrap();
        // one vanishing step must never increase the loss
        assert!(
            after <= before + 1e-10,
            "loss increased {} -> {}",
            before,
            after
        );
    }

    #[test]
    fn lista_training_reduces_loss() {
        let ds = gen_sparse_dataset(8, 16, 3, 0.05, 200, 1).unwrap();
        let mut p = ds.problem.clone();
        p.rho = 0.1;
        let mu = p.default_step().unwrap();
        let init = lista_init(&p, mu, 5).unwrap();
        let cfg = TrainConfig::constant(5e-3, 32, 20, 0).with_momentum(0.9);
        let out = train_unfolded(&UnfoldedArch::Lista, &init, &ds.data, &cfg).unwrap();
        assert!(!out.diverged);
        let first = out.loss_trace[0];
        let last = out
            .loss_trace
            .iter()
            .fold(f64::INFINITY, |m, &v| m.min(v));
        assert!(last < first, "no improvement: {} -> {}", first, last);
    }

    #[test]
    fn tied_single_layer_trains_like_untied() {
        let ds = gen_sparse_dataset(4, 8, 2, 0.05, 20, 8).unwrap();
        let mut p = ds.problem.clone();
        p.rho = 0.1;
        let mu = p.default_step().unwrap();
        let untied = lista_init(&p, mu, 1).unwrap();
        let tied = untied.clone().tie();
        let cfg = TrainConfig::constant(1e-3, 4, 3, 0);
        let a = train_unfolded(&UnfoldedArch::Lista, &untied, &ds.data, &cfg).unwrap();
        let b = train_unfolded(&UnfoldedArch::Lista, &tied, &ds.data, &cfg).unwrap();
        let diff = a.params.w1[0].sub(&b.params.w1[0]).unwrap().max_abs();
        assert!(diff <= 1e-12, "tied K=1 differs from untied K=1 by {}", diff);
    }

    #[test]
    fn stationary_gradient_at_self_consistent_dataset() {
        // targets generated by the same unrolled map: gradient ~ 0
        let (p, x, _) = random_instance(6, 12, 3, 0.05, 0.3, 77);
        let hyper = AdmmHyper::new(1.0, 1.0).unwrap();
        let params = admm_unfolded_init(&p, &hyper, 400).unwrap();
        let target = unfolded_admm_forward(&params, p.rho, &x, &L1Prior).unwrap();
        let (dl, dm, loss) = admm_unroll_gradient(&p, &hyper, &x, &target, 400).unwrap();
        assert!(loss <= 1e-20);
        assert!(dl.abs() <= 1e-3, "d_lambda {}", dl);
        assert!(dm.abs() <= 1e-3, "d_mu {}", dm);
    }

    #[test]
    fn bad_hyperparameters_get_improved() {
        let ds = gen_sparse_dataset(8, 16, 3, 0.05, 60, 2).unwrap();
        let mut p = ds.problem.clone();
        p.rho = 0.1;
        let bad = AdmmHyper {
            lambda: 10.0,
            mu: 0.01,
            ..AdmmHyper::default()
        };
        let cfg = TrainConfig::constant(0.05, 16, 8, 0).with_momentum(0.9);
        let tuned = learned_admm_tune(&p, &bad, &ds.data, &cfg, 25).unwrap();
        assert!(!tuned.diverged);
        let first = tuned.loss_trace[0];
        let best = tuned.loss_trace.iter().fold(f64::INFINITY, |m, &v| m.min(v));
        assert!(
            best < first,
            "tuning did not improve: {} -> {}",
            first,
            best
        );
    }

    #[test]
    fn manifest_round_trip() {
        let (p, _, _) = random_instance(4, 8, 2, 0.05, 0.3, 3);
        let params = lista_init(&p, 0.2, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_params(dir.path(), &params, "lista").unwrap();
        let (back, kind) = load_params(dir.path()).unwrap();
        assert_eq!(kind, "lista");
        assert_eq!(back.depth, 3);
        assert_eq!(back.w1[2].data(), params.w1[2].data());
        assert_eq!(back.lambda, params.lambda);
    }

    #[test]
    fn manifest_rejects_inconsistent_shapes() {
        let json = r#"{"schema":1,"kind":"lista","K":2,"tied":false,"lambda":[0.1],"mu":[1.0,1.0],"tensors":[]}"#;
        let m = ParamsManifest::parse(json).unwrap();
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("manifest.json"),
            serde_json::to_string(&m).unwrap(),
        )
        .unwrap();
        assert!(load_params(dir.path()).is_err());
    }
}
