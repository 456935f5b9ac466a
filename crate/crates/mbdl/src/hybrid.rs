//! DNN-aided recovery: plug-and-play ADMM with a pluggable denoiser, and
//! inversion through a generator's latent space (deep priors).
//!
//! Denoisers and generators are pre-trained and then plugged in unchanged;
//! nothing here updates their weights during recovery.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{gaussian_tensor, Prng};
use crate::sparse::{AdmmHyper, IterStat, Solution, SparseProblem};
use crate::tensor::{soft_threshold, SpdFactor, Tensor};
use crate::train::{sgd_step, Dataset, SgdState, Split, TrainConfig};
use rand::Rng as _;
use std::time::Instant;

/// A denoiser for signals in the recovery domain at noise level `alpha`.
pub trait Denoise {
    fn denoise(&self, v: &Tensor, alpha: f64) -> Result<Tensor>;
    fn kind(&self) -> &'static str;
}

/// Soft-threshold shrinkage; with `alpha = rho / (2 lambda)` this is exactly
/// the l1 proximal step, so PnP-ADMM reduces to ADMM.
#[derive(Debug, Clone, Default)]
pub struct ShrinkageDenoiser;

impl Denoise for ShrinkageDenoiser {
    fn denoise(&self, v: &Tensor, alpha: f64) -> Result<Tensor> {
        soft_threshold(v, alpha)
    }

    fn kind(&self) -> &'static str {
        "shrinkage"
    }
}

/// Two-hidden-layer ReLU denoiser (width 128). The noise level is appended
/// to the input so one network covers the whole schedule.
#[derive(Debug, Clone)]
pub struct MlpDenoiser {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
    pub dim: usize,
}

pub const DENOISER_WIDTH: usize = 128;

impl MlpDenoiser {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = Prng::seed(seed).stream(0xD40).into_rng();
        let w = DENOISER_WIDTH;
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        MlpDenoiser {
            w1: gaussian_tensor(&mut rng, &[w, dim + 1]).scale(he(dim + 1)),
            b1: Tensor::zeros(&[w]),
            w2: gaussian_tensor(&mut rng, &[w, w]).scale(he(w)),
            b2: Tensor::zeros(&[w]),
            w3: gaussian_tensor(&mut rng, &[dim, w]).scale(he(w)),
            b3: Tensor::zeros(&[dim]),
            dim,
        }
    }

    fn with_alpha(v: &Tensor, alpha: f64) -> Tensor {
        let mut data = v.data().to_vec();
        data.push(alpha);
        Tensor::vector(data)
    }

    fn params(&self) -> Vec<Tensor> {
        vec![
            self.w1.clone(),
            self.b1.clone(),
            self.w2.clone(),
            self.b2.clone(),
            self.w3.clone(),
            self.b3.clone(),
        ]
    }

    fn set_params(&mut self, p: &[Tensor]) {
        self.w1 = p[0].clone();
        self.b1 = p[1].clone();
        self.w2 = p[2].clone();
        self.b2 = p[3].clone();
        self.w3 = p[4].clone();
        self.b3 = p[5].clone();
    }
}

impl Denoise for MlpDenoiser {
    fn denoise(&self, v: &Tensor, alpha: f64) -> Result<Tensor> {
        let input = Self::with_alpha(v, alpha);
        let h1 = self.w1.matmul(&input)?.add(&self.b1)?.map(|t| t.max(0.0));
        let h2 = self.w2.matmul(&h1)?.add(&self.b2)?.map(|t| t.max(0.0));
        self.w3.matmul(&h2)?.add(&self.b3)
    }

    fn kind(&self) -> &'static str {
        "learned-mlp"
    }
}

/// Noise-level schedule for the PnP iterations.
#[derive(Debug, Clone, Copy)]
pub enum AlphaSchedule {
    /// `alpha_k = alpha0`; `None` defaults to `rho / (2 lambda)`.
    Constant(Option<f64>),
    /// `alpha_k = alpha0 * decay^k`.
    Geometric { alpha0: f64, decay: f64 },
}

impl Default for AlphaSchedule {
    fn default() -> Self {
        AlphaSchedule::Constant(None)
    }
}

impl AlphaSchedule {
    fn at(&self, k: usize, default_alpha: f64) -> f64 {
        match self {
            AlphaSchedule::Constant(a) => a.unwrap_or(default_alpha),
            AlphaSchedule::Geometric { alpha0, decay } => alpha0 * decay.powi(k as i32),
        }
    }
}

/// ADMM with the proximal step replaced by a denoiser:
/// `v_{k+1} = denoise(s_{k+1} + u_k, alpha_k)`.
///
/// Same iteration structure and stopping rule as the l1 solver; there is no
/// general convergence guarantee, so a run that exhausts `max_iter` reports
/// `converged = false` with its final residual in the trace.
pub fn pnp_admm(
    p: &SparseProblem,
    x: &Tensor,
    hyper: &AdmmHyper,
    denoiser: &dyn Denoise,
    schedule: AlphaSchedule,
) -> Result<Solution> {
    hyper.validate()?;
    let op = p.effective_operator()?;
    let n = op.cols();
    let start = Instant::now();
    let gram = op.t_matmul(&op)?;
    let a = gram.add(&Tensor::eye(n).scale(2.0 * hyper.lambda))?;
    let factor = SpdFactor::new(&a).expect("H^T H + 2 lambda I is SPD for lambda > 0");
    let htx = op.t_matmul(x)?;
    let default_alpha = p.rho / (2.0 * hyper.lambda);

    let mut u = Tensor::zeros(&[n]);
    let mut v = Tensor::zeros(&[n]);
    let mut s = Tensor::zeros(&[n]);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for k in 0..hyper.max_iter {
        let rhs = htx.add(&v.sub(&u)?.scale(2.0 * hyper.lambda))?;
        s = factor.solve(&rhs)?;
        let v_next = denoiser.denoise(&s.add(&u)?, schedule.at(k, default_alpha))?;
        if v_next.shape() != s.shape() {
            return Err(Error::shape(format!(
                "denoiser changed shape: {:?} -> {:?}",
                s.shape(),
                v_next.shape()
            )));
        }
        u = u.add(&s.sub(&v_next)?.scale(hyper.mu))?;
        let primal = s.sub(&v_next)?.norm_l2();
        let change = v_next.sub(&v)?.norm_l2();
        v = v_next;
        iterations = k + 1;
        let residual = primal.max(change);
        trace.push(IterStat {
            iter: iterations,
            objective: crate::sparse::lasso_objective(p, x, &s)?,
            residual,
            wall_ns: start.elapsed().as_nanos(),
        });
        if residual <= hyper.tol {
            converged = true;
            break;
        }
    }
    Ok(Solution {
        s: p.to_signal(&s)?,
        iterations,
        converged,
        trace,
    })
}

#[derive(Debug, Clone)]
pub struct DenoiserTrainOutcome {
    pub denoiser: MlpDenoiser,
    /// Mean training loss per epoch, entry 0 before training.
    pub loss_trace: Vec<f64>,
    pub diverged: bool,
}

/// Unsupervised denoiser training: clean signals are corrupted with Gaussian
/// noise at levels drawn from `alpha_range` and the network regresses the
/// clean signal.
pub fn train_denoiser(
    clean: &Dataset,
    alpha_range: (f64, f64),
    cfg: &TrainConfig,
    seed: u64,
) -> Result<DenoiserTrainOutcome> {
    cfg.validate(clean.train_idx.len())?;
    let dim = clean.input(0).len();
    let mut net = MlpDenoiser::new(dim, seed);
    let mut noise_rng = Prng::seed(seed).stream(0xA15E).into_rng();

    let eval_loss = |net: &MlpDenoiser, seed: u64| -> Result<f64> {
        let mut rng = Prng::seed(seed).stream(0xEA).into_rng();
        let mut total = 0.0;
        for &i in &clean.train_idx {
            let s = clean.input(i);
            let alpha = rng.gen_range(alpha_range.0..=alpha_range.1);
            let v = s.add(&gaussian_tensor(&mut rng, &[dim]).scale(alpha))?;
            let d = net.denoise(&v, alpha)?.sub(&s)?;
            total += d.dot(&d)?;
        }
        Ok(total / clean.train_idx.len() as f64)
    };

    let mut trace = vec![eval_loss(&net, 1)?];
    let mut best = (trace[0], net.clone());
    let mut sgd = SgdState::default();
    let mut diverged = false;
    let mut step = 0usize;

    'epochs: for epoch in 0..cfg.epochs {
        for batch in cfg.batches(&clean.train_idx, epoch) {
            let tape = Tape::new();
            let w1 = tape.leaf(net.w1.clone());
            let b1 = tape.leaf(net.b1.clone());
            let w2 = tape.leaf(net.w2.clone());
            let b2 = tape.leaf(net.b2.clone());
            let w3 = tape.leaf(net.w3.clone());
            let b3 = tape.leaf(net.b3.clone());
            let mut loss: Option<Var> = None;
            for &i in &batch {
                let s = clean.input(i);
                let alpha = noise_rng.gen_range(alpha_range.0..=alpha_range.1);
                let noisy = s.add(&gaussian_tensor(&mut noise_rng, &[dim]).scale(alpha))?;
                let input = tape.leaf(MlpDenoiser::with_alpha(&noisy, alpha));
                let h1 = tape.relu(tape.add(tape.matmul(w1, input)?, b1)?)?;
                let h2 = tape.relu(tape.add(tape.matmul(w2, h1)?, b2)?)?;
                let out = tape.add(tape.matmul(w3, h2)?, b3)?;
                let err = tape.sub(out, tape.leaf(s))?;
                let sq = tape.squared_l2(err)?;
                loss = Some(match loss {
                    None => sq,
                    Some(acc) => tape.add(acc, sq)?,
                });
            }
            let loss =
                tape.scale_const(1.0 / batch.len() as f64, loss.expect("non-empty batch"))?;
            if !tape.value(loss).item()?.is_finite() {
                diverged = true;
                break 'epochs;
            }
            let grads = tape.backward(loss)?;
            let mut params = net.params();
            let g = vec![
                grads.wrt(w1),
                grads.wrt(b1),
                grads.wrt(w2),
                grads.wrt(b2),
                grads.wrt(w3),
                grads.wrt(b3),
            ];
            sgd_step(&mut params, &g, &mut sgd, cfg, step)?;
            step += 1;
            net.set_params(&params);
        }
        let l = eval_loss(&net, 1)?;
        if !l.is_finite() {
            diverged = true;
            break;
        }
        trace.push(l);
        if l < best.0 {
            best = (l, net.clone());
        }
    }

    Ok(DenoiserTrainOutcome {
        denoiser: best.1,
        loss_trace: trace,
        diverged,
    })
}

/// Differentiable map from latent space to signal space, fixed during
/// inversion.
pub trait Generator {
    fn latent_dim(&self) -> usize;
    fn generate(&self, z: &Tensor) -> Result<Tensor>;
    fn tape_generate(&self, tape: &Tape, z: Var) -> Result<Var>;
    fn kind(&self) -> &'static str;
}

/// `s = G z` for a fixed matrix; inversion has the ridge closed form.
#[derive(Debug, Clone)]
pub struct LinearGenerator {
    pub g: Tensor,
}

impl Generator for LinearGenerator {
    fn latent_dim(&self) -> usize {
        self.g.cols()
    }

    fn generate(&self, z: &Tensor) -> Result<Tensor> {
        self.g.matmul(z)
    }

    fn tape_generate(&self, tape: &Tape, z: Var) -> Result<Var> {
        let g = tape.leaf(self.g.clone());
        tape.matmul(g, z)
    }

    fn kind(&self) -> &'static str {
        "linear"
    }
}

/// Two-layer tanh decoder.
#[derive(Debug, Clone)]
pub struct MlpGenerator {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl MlpGenerator {
    pub fn new(latent: usize, hidden: usize, out: usize, seed: u64) -> Self {
        let mut rng = Prng::seed(seed).stream(0x6E4).into_rng();
        MlpGenerator {
            w1: gaussian_tensor(&mut rng, &[hidden, latent]).scale(1.0 / (latent as f64).sqrt()),
            b1: Tensor::zeros(&[hidden]),
            w2: gaussian_tensor(&mut rng, &[out, hidden]).scale(1.0 / (hidden as f64).sqrt()),
            b2: Tensor::zeros(&[out]),
        }
    }
}

impl Generator for MlpGenerator {
    fn latent_dim(&self) -> usize {
        self.w1.cols()
    }

    fn generate(&self, z: &Tensor) -> Result<Tensor> {
        let h = self.w1.matmul(z)?.add(&self.b1)?.map(f64::tanh);
        self.w2.matmul(&h)?.add(&self.b2)
    }

    fn tape_generate(&self, tape: &Tape, z: Var) -> Result<Var> {
        let w1 = tape.leaf(self.w1.clone());
        let b1 = tape.leaf(self.b1.clone());
        let w2 = tape.leaf(self.w2.clone());
        let b2 = tape.leaf(self.b2.clone());
        let h = tape.tanh(tape.add(tape.matmul(w1, z)?, b1)?)?;
        tape.add(tape.matmul(w2, h)?, b2)
    }

    fn kind(&self) -> &'static str {
        "generator-mlp"
    }
}

#[derive(Debug, Clone)]
pub struct InversionResult {
    pub z_hat: Tensor,
    pub s_hat: Tensor,
    /// Objective after each accepted step, entry 0 at the start.
    pub objective_trace: Vec<f64>,
}

/// Minimizes `0.5 * ||x - H g(z)||^2 + lambda * ||z||^2` over the latent by
/// gradient descent with Armijo backtracking (c = 1e-4, halving), starting
/// from `z = 0`. The objective trace is non-increasing by construction.
pub fn deep_prior_invert(
    generator: &dyn Generator,
    h: &Tensor,
    x: &Tensor,
    lambda: f64,
    steps: usize,
) -> Result<InversionResult> {
    deep_prior_invert_from(generator, h, x, lambda, steps, Tensor::zeros(&[generator.latent_dim()]))
}

fn objective_and_grad(
    generator: &dyn Generator,
    h: &Tensor,
    x: &Tensor,
    lambda: f64,
    z: &Tensor,
) -> Result<(f64, Tensor)> {
    let tape = Tape::new();
    let zv = tape.leaf(z.clone());
    let s = generator.tape_generate(&tape, zv)?;
    let hmat = tape.leaf(h.clone());
    let resid = tape.sub(tape.leaf(x.clone()), tape.matmul(hmat, s)?)?;
    let data_term = tape.scale_const(0.5, tape.squared_l2(resid)?)?;
    let reg = tape.scale_const(lambda, tape.squared_l2(zv)?)?;
    let obj = tape.add(data_term, reg)?;
    let value = tape.value(obj).item()?;
    if !value.is_finite() {
        return Err(Error::Numerical("inversion objective is not finite".into()));
    }
    let grads = tape.backward(obj)?;
    Ok((value, grads.wrt(zv)))
}

pub fn deep_prior_invert_from(
    generator: &dyn Generator,
    h: &Tensor,
    x: &Tensor,
    lambda: f64,
    steps: usize,
    z0: Tensor,
) -> Result<InversionResult> {
    const ARMIJO_C: f64 = 1e-4;
    let mut z = z0;
    let (mut obj, mut grad) = objective_and_grad(generator, h, x, lambda, &z)?;
    let mut trace = vec![obj];
    let mut step_size = 1.0f64;
    for _ in 0..steps {
        let g_norm_sq = grad.dot(&grad)?;
        if g_norm_sq <= 1e-30 {
            break;
        }
        let mut t = step_size;
        let mut accepted = false;
        while t >= 1e-16 {
            let candidate = z.sub(&grad.scale(t))?;
            let (cand_obj, cand_grad) = objective_and_grad(generator, h, x, lambda, &candidate)?;
            if cand_obj <= obj - ARMIJO_C * t * g_norm_sq {
                z = candidate;
                obj = cand_obj;
                grad = cand_grad;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        trace.push(obj);
        step_size = (t * 1.5).min(1.0);
    }
    let s_hat = generator.generate(&z)?;
    Ok(InversionResult {
        z_hat: z,
        s_hat,
        objective_trace: trace,
    })
}

/// Nonconvex objectives benefit from restarts: `z = 0` plus `restarts`
/// Gaussian starts, best objective kept.
pub fn deep_prior_invert_multistart(
    generator: &dyn Generator,
    h: &Tensor,
    x: &Tensor,
    lambda: f64,
    steps: usize,
    restarts: usize,
    seed: u64,
) -> Result<InversionResult> {
    let d = generator.latent_dim();
    let mut best = deep_prior_invert(generator, h, x, lambda, steps)?;
    for r in 0..restarts {
        let mut rng = Prng::seed(seed).stream(r as u64).into_rng();
        let z0 = gaussian_tensor(&mut rng, &[d]);
        let cand = deep_prior_invert_from(generator, h, x, lambda, steps, z0)?;
        if cand.objective_trace.last() < best.objective_trace.last() {
            best = cand;
        }
    }
    Ok(best)
}

/// Ridge closed form for the linear generator:
/// `z = (G^T H^T H G + 2 lambda I)^{-1} G^T H^T x`.
pub fn linear_inversion_closed_form(
    g: &Tensor,
    h: &Tensor,
    x: &Tensor,
    lambda: f64,
) -> Result<Tensor> {
    let hg = h.matmul(g)?;
    let normal = hg
        .t_matmul(&hg)?
        .add(&Tensor::eye(g.cols()).scale(2.0 * lambda))?;
    let rhs = hg.t_matmul(x)?;
    SpdFactor::new(&normal)?.solve(&rhs)
}

/// Least-norm baseline `H^T (H H^T)^{-1} x` for underdetermined recovery.
pub fn pseudo_inverse_recovery(h: &Tensor, x: &Tensor) -> Result<Tensor> {
    let hht = h.matmul(&h.transpose())?;
    let y = SpdFactor::new(&hht)?.solve(x)?;
    h.t_matmul(&y)
}

#[derive(Debug, Clone)]
pub struct GeneratorTrainOutcome {
    pub generator: MlpGenerator,
    pub loss_trace: Vec<f64>,
    pub diverged: bool,
}

/// Trains an autoencoder (two-layer encoder and decoder) by reconstruction on
/// clean signals and returns the decoder as a generator.
pub fn train_generator(
    clean: &Dataset,
    latent: usize,
    hidden: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<GeneratorTrainOutcome> {
    cfg.validate(clean.train_idx.len())?;
    let dim = clean.input(0).len();
    let mut rng = Prng::seed(seed).stream(0xAE).into_rng();
    // encoder
    let mut ew1 = gaussian_tensor(&mut rng, &[hidden, dim]).scale(1.0 / (dim as f64).sqrt());
    let mut eb1 = Tensor::zeros(&[hidden]);
    let mut ew2 = gaussian_tensor(&mut rng, &[latent, hidden]).scale(1.0 / (hidden as f64).sqrt());
    let mut eb2 = Tensor::zeros(&[latent]);
    let mut dec = MlpGenerator::new(latent, hidden, dim, seed ^ 0x5eed);

    let recon_loss = |ew1: &Tensor,
                      eb1: &Tensor,
                      ew2: &Tensor,
                      eb2: &Tensor,
                      dec: &MlpGenerator|
     -> Result<f64> {
        let mut total = 0.0;
        for &i in &clean.train_idx {
            let s = clean.input(i);
            let hcode = ew1.matmul(&s)?.add(eb1)?.map(f64::tanh);
            let z = ew2.matmul(&hcode)?.add(eb2)?;
            let d = dec.generate(&z)?.sub(&s)?;
            total += d.dot(&d)?;
        }
        Ok(total / clean.train_idx.len() as f64)
    };

    let mut trace = vec![recon_loss(&ew1, &eb1, &ew2, &eb2, &dec)?];
    let mut best = (trace[0], dec.clone());
    let mut sgd = SgdState::default();
    let mut diverged = false;
    let mut step = 0usize;

    'epochs: for epoch in 0..cfg.epochs {
        for batch in cfg.batches(&clean.train_idx, epoch) {
            let tape = Tape::new();
            let lew1 = tape.leaf(ew1.clone());
            let leb1 = tape.leaf(eb1.clone());
            let lew2 = tape.leaf(ew2.clone());
            let leb2 = tape.leaf(eb2.clone());
            let ldw1 = tape.leaf(dec.w1.clone());
            let ldb1 = tape.leaf(dec.b1.clone());
            let ldw2 = tape.leaf(dec.w2.clone());
            let ldb2 = tape.leaf(dec.b2.clone());
            let mut loss: Option<Var> = None;
            for &i in &batch {
                let s = tape.leaf(clean.input(i));
                let hcode = tape.tanh(tape.add(tape.matmul(lew1, s)?, leb1)?)?;
                let z = tape.add(tape.matmul(lew2, hcode)?, leb2)?;
                let hdec = tape.tanh(tape.add(tape.matmul(ldw1, z)?, ldb1)?)?;
                let out = tape.add(tape.matmul(ldw2, hdec)?, ldb2)?;
                let err = tape.sub(out, s)?;
                let sq = tape.squared_l2(err)?;
                loss = Some(match loss {
                    None => sq,
                    Some(acc) => tape.add(acc, sq)?,
                });
            }
            let loss =
                tape.scale_const(1.0 / batch.len() as f64, loss.expect("non-empty batch"))?;
            if !tape.value(loss).item()?.is_finite() {
                diverged = true;
                break 'epochs;
            }
            let grads = tape.backward(loss)?;
            let mut params = vec![
                ew1.clone(),
                eb1.clone(),
                ew2.clone(),
                eb2.clone(),
                dec.w1.clone(),
                dec.b1.clone(),
                dec.w2.clone(),
                dec.b2.clone(),
            ];
            let g = vec![
                grads.wrt(lew1),
                grads.wrt(leb1),
                grads.wrt(lew2),
                grads.wrt(leb2),
                grads.wrt(ldw1),
                grads.wrt(ldb1),
                grads.wrt(ldw2),
                grads.wrt(ldb2),
            ];
            sgd_step(&mut params, &g, &mut sgd, cfg, step)?;
            step += 1;
            ew1 = params[0].clone();
            eb1 = params[1].clone();
            ew2 = params[2].clone();
            eb2 = params[3].clone();
            dec.w1 = params[4].clone();
            dec.b1 = params[5].clone();
            dec.w2 = params[6].clone();
            dec.b2 = params[7].clone();
        }
        let l = recon_loss(&ew1, &eb1, &ew2, &eb2, &dec)?;
        if !l.is_finite() {
            diverged = true;
            break;
        }
        trace.push(l);
        if l < best.0 {
            best = (l, dec.clone());
        }
    }

    Ok(GeneratorTrainOutcome {
        generator: best.1,
        loss_trace: trace,
        diverged,
    })
}

/// Mean recovery error of PnP against the targets of a dataset split.
pub fn pnp_recovery_mse(
    p: &SparseProblem,
    ds: &Dataset,
    split: Split,
    hyper: &AdmmHyper,
    denoiser: &dyn Denoise,
    schedule: AlphaSchedule,
) -> Result<f64> {
    let idx = ds.indices(split);
    let mut total = 0.0;
    for &i in idx {
        let sol = pnp_admm(p, &ds.input(i), hyper, denoiser, schedule)?;
        let d = sol.s.sub(&ds.target(i))?;
        total += d.dot(&d)?;
    }
    Ok(total / idx.len().max(1) as f64)
}
