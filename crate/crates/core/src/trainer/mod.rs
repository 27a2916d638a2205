//! Pretraining: AdamW with warmup + cosine decay, a cosine momentum
//! schedule for the key encoder, periodic validation with best-checkpoint
//! retention, and bit-exact checkpoints.

mod checkpoint;
mod train;

pub use checkpoint::{checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, save_checkpoint};
pub use train::{argmax, evaluate_heads, loss_of_params, train, train_step, EpochMetrics, StepLosses, TrainOutcome};

use crate::encoder::DEFAULT_MAX_PATCHES;
use crate::error::{bail, Result};
use crate::io::digest_json;
use crate::model::{EncoderConfig, ModelParams};
use crate::params::ParamTree;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub tau: f64,
    pub lambda: f64,
    pub momentum_start: f64,
    pub momentum_end: f64,
    /// Use the fixed coefficient 0.99 instead of the cosine schedule.
    #[serde(default)]
    pub momentum_constant: bool,
    pub max_patches: usize,
    #[serde(default)]
    pub seed: u64,
    pub validate_every: usize,
    /// Fraction of a bag's patches in each view.
    #[serde(default = "default_view_fraction")]
    pub view_fraction: f64,
    /// Fraction of a view shared with the other view.
    #[serde(default = "default_view_overlap")]
    pub view_overlap: f64,
    /// Share of the contrastive loss given to cross-model pairs.
    #[serde(default = "default_pair_ratio")]
    pub pair_ratio: f64,
}

fn default_view_fraction() -> f64 {
    0.75
}
fn default_view_overlap() -> f64 {
    0.5
}
fn default_pair_ratio() -> f64 {
    0.5
}

pub const CONSTANT_MOMENTUM: f64 = 0.99;

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            epochs: 300,
            batch_size: 768,
            peak_lr: 1e-4,
            warmup_epochs: 10,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            tau: 0.2,
            lambda: 1.0,
            momentum_start: 0.996,
            momentum_end: 0.999,
            momentum_constant: false,
            max_patches: DEFAULT_MAX_PATCHES,
            seed: 0,
            validate_every: 2,
            view_fraction: default_view_fraction(),
            view_overlap: default_view_overlap(),
            pair_ratio: default_pair_ratio(),
        }
    }

    /// Paper settings scaled to synthetic corpora: batch 32, 100 epochs with 10
    /// of warmup, and a larger step size for the much smaller networks.
    pub fn desk() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            peak_lr: 2e-3,
            warmup_epochs: 10,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_patches == 0 || self.validate_every == 0 {
            bail!(Config, "batch_size, max_patches and validate_every must be positive");
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            bail!(Config, "warmup_epochs ({}) must be below epochs ({})", self.warmup_epochs, self.epochs);
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) || self.weight_decay < 0.0 || self.lambda < 0.0 {
            bail!(Config, "peak_lr, weight_decay and lambda must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            bail!(Config, "Adam betas must lie in [0, 1) and eps must be positive");
        }
        if self.tau <= 0.0 {
            bail!(Config, "tau must be positive");
        }
        if !(0.0 <= self.momentum_start && self.momentum_start <= self.momentum_end && self.momentum_end < 1.0) {
            bail!(Config, "momentum schedule needs 0 <= start <= end < 1");
        }
        if !(self.view_fraction > 0.0 && self.view_fraction <= 1.0) || !(0.0..=1.0).contains(&self.view_overlap) {
            bail!(Config, "view_fraction must lie in (0, 1] and view_overlap in [0, 1]");
        }
        Ok(())
    }
}

/// Step counts derived from the training set size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Schedule {
    pub steps_per_epoch: u64,
    pub total_steps: u64,
    pub warmup_steps: u64,
}

impl Schedule {
    pub fn new(config: &TrainConfig, n_train: usize) -> Self {
        let steps_per_epoch = n_train.div_ceil(config.batch_size.max(1)) as u64;
        Self {
            steps_per_epoch,
            total_steps: steps_per_epoch * config.epochs as u64,
            warmup_steps: steps_per_epoch * config.warmup_epochs as u64,
        }
    }
}

/// Linear warmup from 0 to the peak, then half-cosine decay to 0.
pub fn lr_schedule(step: u64, schedule: &Schedule, peak_lr: f64) -> f64 {
    let Schedule {
        total_steps,
        warmup_steps,
        ..
    } = *schedule;
    let step = step.min(total_steps);
    if step < warmup_steps {
        return peak_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return peak_lr;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    peak_lr * 0.5 * (1.0 + (PI * progress).cos())
}

/// Cosine ramp of the key-encoder momentum from `momentum_start` to
/// `momentum_end`, or the constant 0.99 when configured.
pub fn momentum_schedule(step: u64, schedule: &Schedule, config: &TrainConfig) -> f64 {
    if config.momentum_constant {
        return CONSTANT_MOMENTUM;
    }
    let (a, b) = (config.momentum_start, config.momentum_end);
    if schedule.total_steps == 0 {
        return a;
    }
    let progress = step.min(schedule.total_steps) as f64 / schedule.total_steps as f64;
    b - (b - a) * 0.5 * (1.0 + (PI * progress).cos())
}

/// First and second Adam moments, one tensor per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn zeros_like<P: ParamTree>(params: &P) -> Self {
        let z: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Self { m: z.clone(), v: z }
    }
}

/// One AdamW update at 1-based step `t`. Weight decay is decoupled and
/// applied as `p ← p·(1 − lr·wd)` before the bias-corrected Adam delta.
pub fn adamw_step<P: ParamTree>(
    params: &P,
    grads: &[Tensor],
    state: &mut AdamState,
    t: u64,
    lr: f64,
    config: &TrainConfig,
) -> Result<P> {
    let tensors = params.tensors();
    if grads.len() != tensors.len() || state.m.len() != tensors.len() || state.v.len() != tensors.len() {
        bail!(Contract, "AdamW needs one gradient and moment pair per parameter");
    }
    if t == 0 {
        bail!(Contract, "Adam steps are 1-based");
    }
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t.min(i32::MAX as u64) as i32);
    let c2 = 1.0 - b2.powi(t.min(i32::MAX as u64) as i32);
    let decay = 1.0 - lr * config.weight_decay;
    let mut updated = Vec::with_capacity(tensors.len());
    for (i, p) in tensors.iter().enumerate() {
        let g = grads[i].data();
        if g.len() != p.numel() || state.m[i].numel() != p.numel() || state.v[i].numel() != p.numel() {
            bail!(Contract, "gradient {} has {} values for a parameter of {}", i, g.len(), p.numel());
        }
        let m = state.m[i].data_mut();
        let mut out = Vec::with_capacity(p.numel());
        for (j, &pj) in p.data().iter().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            out.push(pj * decay);
        }
        let m_hat: Vec<f64> = m.iter().map(|&mj| mj / c1).collect();
        let v = state.v[i].data_mut();
        for (j, o) in out.iter_mut().enumerate() {
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let v_hat = v[j] / c2;
            *o -= lr * m_hat[j] / (v_hat.sqrt() + config.eps);
        }
        updated.push(Tensor::new(p.shape().to_vec(), out)?);
    }
    params.with_tensors(updated)
}

/// Base and momentum parameters, optimizer moments and progress counters.
#[derive(Clone, Debug, PartialEq)]
pub struct MoCoState {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub base: ModelParams<Tensor>,
    pub momentum: ModelParams<Tensor>,
    pub adam: AdamState,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    /// Best validation score seen so far, if validation ran.
    pub best_score: Option<f64>,
}

impl MoCoState {
    /// Fresh parameters from `train.seed`; the momentum encoder starts as a copy.
    pub fn init(encoder: EncoderConfig, train: TrainConfig) -> Result<Self> {
        encoder.validate()?;
        train.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
        let base = ModelParams::init(&encoder, &mut rng)?;
        Ok(Self {
            adam: AdamState::zeros_like(&base),
            momentum: base.clone(),
            base,
            encoder,
            train,
            step: 0,
            epoch: 0,
            best_score: None,
        })
    }

    /// Digest of the encoder and training configuration.
    pub fn config_digest(&self) -> Result<[u8; 32]> {
        config_digest(&self.encoder, &self.train)
    }
}

pub fn config_digest(encoder: &EncoderConfig, train: &TrainConfig) -> Result<[u8; 32]> {
    digest_json(&(encoder, train))
}
