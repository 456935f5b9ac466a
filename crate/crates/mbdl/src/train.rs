//! Shared training machinery: datasets with fixed splits, empirical risk,
//! mini-batch SGD with momentum, and synthetic data generators.

use crate::error::{Error, Result};
use crate::rng::{gaussian_tensor, Prng};
use crate::sparse::SparseProblem;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Loss {
    L2,
    ZeroOne,
}

/// Input/target pairs with disjoint train/validation/test index lists whose
/// union covers all samples. Split is a deterministic 70/15/15 shuffle of the
/// seed.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub seed: u64,
}

impl Dataset {
    pub fn from_pairs(inputs: Tensor, targets: Tensor, seed: u64) -> Result<Self> {
        let n = *inputs.shape().first().unwrap_or(&0);
        if n == 0 || targets.shape().first() != Some(&n) {
            return Err(Error::shape(format!(
                "dataset needs matching leading extents, got {:?} and {:?}",
                inputs.shape(),
                targets.shape()
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut Prng::seed(seed).stream(0xD5).into_rng());
        let n_train = ((n as f64) * 0.70).round() as usize;
        let n_val = ((n as f64) * 0.15).round() as usize;
        let n_train = n_train.min(n);
        let n_val = n_val.min(n - n_train);
        Ok(Dataset {
            inputs,
            targets,
            train_idx: order[..n_train].to_vec(),
            val_idx: order[n_train..n_train + n_val].to_vec(),
            test_idx: order[n_train + n_val..].to_vec(),
            seed,
        })
    }

    pub fn len(&self) -> usize {
        *self.inputs.shape().first().unwrap_or(&0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train_idx,
            Split::Validation => &self.val_idx,
            Split::Test => &self.test_idx,
        }
    }

    fn row(&self, t: &Tensor, i: usize) -> Tensor {
        let n = self.len();
        let per = t.len() / n;
        let shape = t.shape()[1..].to_vec();
        Tensor::new(shape, t.data()[i * per..(i + 1) * per].to_vec()).expect("row slice")
    }

    pub fn input(&self, i: usize) -> Tensor {
        self.row(&self.inputs, i)
    }

    pub fn target(&self, i: usize) -> Tensor {
        self.row(&self.targets, i)
    }
}

/// Mean loss of a decision rule over one split.
pub fn empirical_risk(
    rule: &dyn Fn(&Tensor) -> Tensor,
    ds: &Dataset,
    split: Split,
    loss: Loss,
) -> Result<f64> {
    empirical_risk_over(rule, ds, ds.indices(split), loss)
}

pub fn empirical_risk_over(
    rule: &dyn Fn(&Tensor) -> Tensor,
    ds: &Dataset,
    indices: &[usize],
    loss: Loss,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument("empty split".into()));
    }
    let mut total = 0.0;
    for &i in indices {
        let pred = rule(&ds.input(i));
        let target = ds.target(i);
        total += match loss {
            Loss::L2 => {
                let d = pred.sub(&target)?;
                d.dot(&d)?
            }
            Loss::ZeroOne => {
                if pred.data() == target.data() {
                    0.0
                } else {
                    1.0
                }
            }
        };
    }
    Ok(total / indices.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// `lr * gamma^(floor(step / every))`
    StepDecay { lr: f64, gamma: f64, every: usize },
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        match self {
            LrSchedule::Constant { lr } => *lr,
            LrSchedule::StepDecay { lr, gamma, every } => {
                lr * gamma.powi((step / (*every).max(1)) as i32)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub epochs: usize,
    pub momentum: f64,
    pub seed: u64,
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl TrainConfig {
    pub fn constant(lr: f64, batch_size: usize, epochs: usize, seed: u64) -> Self {
        TrainConfig {
            schedule: LrSchedule::Constant { lr },
            batch_size,
            epochs,
            momentum: 0.0,
            seed,
            clip_norm: None,
        }
    }

    pub fn with_momentum(mut self, m: f64) -> Self {
        self.momentum = m;
        self
    }

    pub fn with_clip(mut self, c: f64) -> Self {
        self.clip_norm = Some(c);
        self
    }

    pub fn validate(&self, train_size: usize) -> Result<()> {
        if self.batch_size == 0 || self.batch_size > train_size {
            return Err(Error::Config(format!(
                "batch size {} out of range for train split of {}",
                self.batch_size, train_size
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }

    /// Deterministic shuffled mini-batches for one epoch.
    pub fn batches(&self, indices: &[usize], epoch: usize) -> Vec<Vec<usize>> {
        let mut order = indices.to_vec();
        order.shuffle(
            &mut Prng::seed(self.seed)
                .stream(0xBA7C)
                .stream(epoch as u64)
                .into_rng(),
        );
        order
            .chunks(self.batch_size)
            .map(|c| c.to_vec())
            .collect()
    }
}

/// Momentum buffers for one parameter list.
#[derive(Debug, Clone, Default)]
pub struct SgdState {
    velocity: Vec<Tensor>,
}

/// One SGD step `theta <- theta - eta_j * v`, `v <- m*v + g`, with optional
/// global-norm gradient clipping. Rejects non-finite gradients.
pub fn sgd_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut SgdState,
    cfg: &TrainConfig,
    step: usize,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::InvalidArgument(format!(
            "{} params but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for g in grads {
        if !g.all_finite() {
            return Err(Error::Numerical("non-finite gradient".into()));
        }
    }
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    }
    let mut scale = 1.0;
    if let Some(clip) = cfg.clip_norm {
        let total: f64 = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum();
        let norm = total.sqrt();
        if norm > clip {
            scale = clip / norm;
        }
    }
    let eta = cfg.schedule.at(step);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        *v = v.scale(cfg.momentum).add(&g.scale(scale))?;
        *p = p.sub(&v.scale(eta))?;
    }
    Ok(())
}

/// Dataset drawn from the linear Gaussian measurement model plus the problem
/// instance that generated it.
#[derive(Debug, Clone)]
pub struct SparseDataset {
    pub problem: SparseProblem,
    pub sigma: f64,
    pub data: Dataset,
}

/// `x = H s + w` with column-normalized Gaussian `H`, `k` uniformly placed
/// unit-Gaussian nonzeros per target, and `w ~ N(0, sigma^2 I)`.
pub fn gen_sparse_dataset(
    m: usize,
    n: usize,
    sparsity: usize,
    sigma: f64,
    n_samples: usize,
    seed: u64,
) -> Result<SparseDataset> {
    if sparsity > n {
        return Err(Error::InvalidArgument(format!(
            "sparsity {} exceeds dimension {}",
            sparsity, n
        )));
    }
    let mut rng = Prng::seed(seed).stream(0x5DA7A).into_rng();
    let mut h = gaussian_tensor(&mut rng, &[m, n]);
    for j in 0..n {
        let norm: f64 = (0..m)
            .map(|i| h.at2(i, j) * h.at2(i, j))
            .sum::<f64>()
            .sqrt();
        if norm > 0.0 {
            for i in 0..m {
                let v = h.at2(i, j) / norm;
                h.set2(i, j, v);
            }
        }
    }
    let mut xs = Vec::with_capacity(n_samples * m);
    let mut ss = Vec::with_capacity(n_samples * n);
    for _ in 0..n_samples {
        let mut s = vec![0.0; n];
        let mut support: Vec<usize> = (0..n).collect();
        support.shuffle(&mut rng);
        for &j in support.iter().take(sparsity) {
            s[j] = rng.sample(rand_distr::StandardNormal);
        }
        let s = Tensor::vector(s);
        let noise = gaussian_tensor(&mut rng, &[m]).scale(sigma);
        let x = h.matmul(&s)?.add(&noise)?;
        xs.extend_from_slice(x.data());
        ss.extend_from_slice(s.data());
    }
    let data = Dataset::from_pairs(
        Tensor::new(vec![n_samples, m], xs)?,
        Tensor::new(vec![n_samples, n], ss)?,
        seed,
    )?;
    let problem = SparseProblem::identity_dict(h, 0.0, sigma * sigma)?;
    Ok(SparseDataset {
        problem,
        sigma,
        data,
    })
}
