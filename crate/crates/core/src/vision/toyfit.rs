//! Desk-scale fine-tuning harness: recover a low-rank weight change with a
//! LoRA adapter and compare against training a full dense update.
//!
//! Both learners see the same regression problem. A frozen random `W0` is
//! perturbed by a rank-`r_true` matrix `ΔW*`; targets are
//! `y = (W0 + ΔW*)·x + ε` for Gaussian inputs `x` and small label noise `ε`.
//! Training is full-batch gradient descent on the per-element mean squared
//! error.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::vision::lora::{LoraAdapter, LoraError};

/// Largest `d·k` accepted.
pub const MAX_PARAMS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyFitConfig {
    pub d: usize,
    pub k: usize,
    pub r_true: usize,
    pub r_adapter: usize,
    pub epochs: usize,
    pub seed: u64,
    pub samples: usize,
    pub noise_std: f64,
    /// Step sizes as fractions of `1/L`, where `L` is the gradient
    /// Lipschitz constant of the dense problem. Expressing them this way
    /// keeps one setting stable across `d`, `k` and sample counts.
    pub step_lora: f64,
    pub step_full: f64,
}

impl ToyFitConfig {
    pub fn new(d: usize, k: usize, r_true: usize, r_adapter: usize, epochs: usize, seed: u64) -> Self {
        Self {
            d,
            k,
            r_true,
            r_adapter,
            epochs,
            seed,
            samples: 256,
            noise_std: 0.01,
            step_lora: 1.0,
            step_full: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyFitReport {
    pub final_loss_lora: f64,
    pub final_loss_full: f64,
    pub trained_params_lora: usize,
    pub trained_params_full: usize,
    pub epochs: usize,
    pub d: usize,
    pub k: usize,
    pub r_true: usize,
    pub r_adapter: usize,
    pub seed: u64,
}

/// Training batch: inputs are columns of `x` (k×n), targets columns of `y` (d×n).
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
}

/// Per-element MSE of `W0·X + scale·B·A·X` against `Y`, with gradients
/// with respect to `B` and `A`.
pub fn lora_loss_and_grads(
    w0: &DMatrix<f64>,
    b: &DMatrix<f64>,
    a: &DMatrix<f64>,
    scale: f64,
    batch: &Batch,
) -> (f64, DMatrix<f64>, DMatrix<f64>) {
    let ax = a * &batch.x;
    let residual = w0 * &batch.x + (b * &ax) * scale - &batch.y;
    let norm = 1.0 / residual.len() as f64;
    let loss = residual.norm_squared() * norm;
    let g = residual * (2.0 * norm);
    let grad_b = &g * ax.transpose() * scale;
    let grad_a = b.transpose() * &g * batch.x.transpose() * scale;
    (loss, grad_b, grad_a)
}

/// Per-element MSE of `(W0 + D)·X` against `Y`, with the gradient for `D`.
pub fn full_loss_and_grad(w0: &DMatrix<f64>, delta: &DMatrix<f64>, batch: &Batch) -> (f64, DMatrix<f64>) {
    let residual = (w0 + delta) * &batch.x - &batch.y;
    let norm = 1.0 / residual.len() as f64;
    let loss = residual.norm_squared() * norm;
    let grad = residual * (2.0 * norm) * batch.x.transpose();
    (loss, grad)
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let n = Normal::new(0.0, std).expect("positive std");
    DMatrix::from_fn(rows, cols, |_, _| n.sample(rng))
}

/// The synthetic problem: frozen base, planted low-rank change, data.
pub struct ToyProblem {
    pub w0: DMatrix<f64>,
    pub delta_true: DMatrix<f64>,
    pub batch: Batch,
}

impl ToyProblem {
    pub fn generate(cfg: &ToyFitConfig, rng: &mut ChaCha8Rng) -> Self {
        let (d, k, r) = (cfg.d, cfg.k, cfg.r_true);
        let w0 = gaussian(d, k, 1.0 / (k as f64).sqrt(), rng);
        // entries of U·Vᵀ have standard deviation ~0.3
        let factor_std = (0.3 / (r as f64).sqrt()).sqrt();
        let delta_true = gaussian(d, r, factor_std, rng) * gaussian(r, k, factor_std, rng);
        let x = gaussian(k, cfg.samples, 1.0, rng);
        let noise = gaussian(d, cfg.samples, cfg.noise_std, rng);
        let y = (&w0 + &delta_true) * &x + noise;
        Self {
            w0,
            delta_true,
            batch: Batch { x, y },
        }
    }
}

/// `2·λmax(X·Xᵀ)/(d·n)`: the curvature bound of the per-element MSE in `D`.
pub fn dense_lipschitz(batch: &Batch, d: usize) -> f64 {
    let gram = &batch.x * batch.x.transpose();
    let lambda_max = gram.symmetric_eigenvalues().max();
    2.0 * lambda_max / (d * batch.x.ncols()) as f64
}

fn validate(cfg: &ToyFitConfig) -> Result<(), LoraError> {
    let bad = |msg: &str| Err(LoraError::InvalidConfig(msg.into()));
    if cfg.d == 0 || cfg.k == 0 {
        return bad("d and k must be positive");
    }
    if cfg.d * cfg.k > MAX_PARAMS {
        return bad("d*k exceeds the desk-scale limit of 10^4");
    }
    if cfg.r_true == 0 || cfg.r_true > cfg.d.min(cfg.k) {
        return bad("r_true must be in 1..=min(d, k)");
    }
    if cfg.r_adapter == 0 || cfg.r_adapter >= cfg.d.min(cfg.k) {
        return Err(LoraError::InvalidRank {
            rank: cfg.r_adapter,
            limit: cfg.d.min(cfg.k),
        });
    }
    if cfg.epochs == 0 || cfg.samples == 0 {
        return bad("epochs and samples must be positive");
    }
    if !(cfg.step_lora > 0.0 && cfg.step_full > 0.0 && cfg.noise_std >= 0.0) {
        return bad("step sizes must be positive and noise non-negative");
    }
    Ok(())
}

pub fn toy_lora_fit(
    d: usize,
    k: usize,
    r_true: usize,
    r_adapter: usize,
    epochs: usize,
    seed: u64,
) -> Result<ToyFitReport, LoraError> {
    toy_lora_fit_with(&ToyFitConfig::new(d, k, r_true, r_adapter, epochs, seed))
}

pub fn toy_lora_fit_with(cfg: &ToyFitConfig) -> Result<ToyFitReport, LoraError> {
    validate(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let problem = ToyProblem::generate(cfg, &mut rng);
    let w0 = &problem.w0;
    let lipschitz = dense_lipschitz(&problem.batch, cfg.d);
    let lr_full = cfg.step_full / lipschitz;

    let mut adapter = LoraAdapter::init(w0, cfg.r_adapter, 1.0, &mut rng)?;
    for _ in 0..cfg.epochs {
        let (_, gb, ga) = lora_loss_and_grads(w0, adapter.b(), adapter.a(), adapter.scale, &problem.batch);
        // the factored loss is steeper than the dense one by roughly
        // scale²·(‖A‖² + ‖B‖²); shrink the step to match
        let factor_curvature =
            adapter.scale.powi(2) * (adapter.a().norm_squared() + adapter.b().norm_squared());
        let lr_lora = cfg.step_lora / (lipschitz * factor_curvature.max(1.0));
        let b = adapter.b() - gb * lr_lora;
        let a = adapter.a() - ga * lr_lora;
        adapter.set_factors(b, a);
    }
    let loss_lora = lora_loss_and_grads(w0, adapter.b(), adapter.a(), adapter.scale, &problem.batch).0;

    let mut delta = DMatrix::zeros(cfg.d, cfg.k);
    for _ in 0..cfg.epochs {
        let (_, g) = full_loss_and_grad(w0, &delta, &problem.batch);
        delta -= g * lr_full;
    }
    let loss_full = full_loss_and_grad(w0, &delta, &problem.batch).0;

    Ok(ToyFitReport {
        final_loss_lora: loss_lora,
        final_loss_full: loss_full,
        trained_params_lora: adapter.param_count(),
        trained_params_full: cfg.d * cfg.k,
        epochs: cfg.epochs,
        d: cfg.d,
        k: cfg.k,
        r_true: cfg.r_true,
        r_adapter: cfg.r_adapter,
        seed: cfg.seed,
    })
}
