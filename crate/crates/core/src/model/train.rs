//! Adam optimization over pool-sampled prompts.
//!
//! Training draws each batch from a fixed pool of seeded channel traces
//! (fresh symbols and noise per draw) and is fully deterministic given the
//! run seed: prompt streams are forked per (step, batch index), so the
//! trajectory does not depend on execution order.

use std::path::Path;

use crate::channel::{evolve_trace, make_prompt_from_trace, ChannelParams, ChannelTrace, Prompt, QuantBits};
use crate::error::{Error, Result};
use crate::numerics::Rng;

use super::{save_checkpoint, Model, ModelConfig, ParamLayout};

/// Abort threshold on the batch loss.
pub const DIVERGENCE_LIMIT: f64 = 1e3;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Number of pretraining channel traces in the fixed pool.
    pub pool_size: usize,
    /// Antenna counts, context length and sigma_w for every pool entry;
    /// rho, SNR and bits are resampled per entry from the ranges below.
    pub base: ChannelParams,
    pub rho_range: (f64, f64),
    pub snr_range: (f64, f64),
    pub bits_range: (u8, u8),
    /// Emit a checkpoint every this many steps (0 = final only).
    pub checkpoint_every: usize,
}

impl TrainConfig {
    /// Desk-scale recipe: 5000 steps, batch 64, lr 1e-3, 2000-trace pool,
    /// rho ~ U[0.9, 1), SNR ~ U[0, 30] dB, b ~ U{1..6}.
    pub fn desk_scale(seed: u64) -> Self {
        TrainConfig {
            steps: 5000,
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed,
            pool_size: 2000,
            base: ChannelParams {
                m1: 2,
                m2: 2,
                rho: 0.99,
                sigma_w: 0.1,
                snr_db: 30.0,
                bits: QuantBits::Bits(6),
                k: 20,
            },
            rho_range: (0.9, 1.0),
            snr_range: (0.0, 30.0),
            bits_range: (1, 6),
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 || self.batch_size < 1 {
            return Err(Error::contract("steps and batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::contract("learning_rate must be positive"));
        }
        if self.pool_size < 1 {
            return Err(Error::contract("pool_size must be >= 1"));
        }
        if self.bits_range.0 < 1 || self.bits_range.0 > self.bits_range.1 {
            return Err(Error::contract("invalid bits range"));
        }
        self.base.validate()
    }
}

/// Adam first/second moments plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: usize,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Rejects NaN gradients, naming the tensor.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &TrainConfig,
    layout: &ParamLayout,
) -> Result<()> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    if let Some(idx) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NanGradient {
            tensor: layout.tensor_at(idx).to_string(),
            step: state.step,
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, &g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let mhat = *m / bc1;
        let vhat = *v / bc2;
        *p -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Fixed pool of pretraining channels, each with its own (rho, SNR, bits).
pub struct ChannelPool {
    pub traces: Vec<ChannelTrace>,
}

impl ChannelPool {
    pub fn generate(cfg: &TrainConfig) -> ChannelPool {
        let root = Rng::new(cfg.seed).fork(0);
        let span = (cfg.bits_range.1 - cfg.bits_range.0) as usize + 1;
        let traces = (0..cfg.pool_size)
            .map(|i| {
                let mut rng = root.fork(i as u64);
                let params = ChannelParams {
                    rho: rng.uniform_in(cfg.rho_range.0, cfg.rho_range.1),
                    snr_db: rng.uniform_in(cfg.snr_range.0, cfg.snr_range.1),
                    bits: QuantBits::Bits(cfg.bits_range.0 + rng.pick(span) as u8),
                    ..cfg.base.clone()
                };
                evolve_trace(&mut rng, &params)
            })
            .collect();
        ChannelPool { traces }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainStatus {
    Completed,
    /// Loss exceeded [`DIVERGENCE_LIMIT`] or went non-finite; the returned
    /// parameters are the last good ones.
    Diverged { step: usize, loss: f64 },
}

pub struct TrainResult {
    pub model: Model,
    /// Per-step batch loss.
    pub curve: Vec<f64>,
    pub status: TrainStatus,
}

/// Trains on pool-sampled prompts. If `out_dir` is given, checkpoints land
/// there as `checkpoint.ckpt` (final or last-good) plus periodic
/// `checkpoint_step<N>.ckpt` when configured.
pub fn train(
    model_cfg: ModelConfig,
    train_cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainResult> {
    train_cfg.validate()?;
    let pool = ChannelPool::generate(train_cfg);
    let root = Rng::new(train_cfg.seed);
    let mut sampler = move |step: usize, bi: usize| -> Prompt {
        let prng = root.fork(1).fork(step as u64).fork(bi as u64);
        let idx = prng.fork(0).pick(pool.traces.len());
        make_prompt_from_trace(&prng.fork(1), &pool.traces[idx])
    };
    train_with_sampler(model_cfg, train_cfg, &mut sampler, out_dir)
}

/// Same loop with a caller-supplied prompt source (step, batch index) ->
/// prompt; used for fixed-batch sanity runs and tests.
pub fn train_with_sampler(
    model_cfg: ModelConfig,
    train_cfg: &TrainConfig,
    sampler: &mut dyn FnMut(usize, usize) -> Prompt,
    out_dir: Option<&Path>,
) -> Result<TrainResult> {
    train_cfg.validate()?;
    let root = Rng::new(train_cfg.seed);
    let mut model = Model::init(model_cfg, &mut root.fork(2))?;
    let mut adam = AdamState::new(model.layout.total);
    let mut grads = model.grad_buffer();
    let mut last_good = model.params.clone();
    let mut curve = Vec::with_capacity(train_cfg.steps);
    let mut status = TrainStatus::Completed;
    let scale = 1.0 / train_cfg.batch_size as f64;

    for step in 0..train_cfg.steps {
        grads.fill(0.0);
        let mut loss_acc = 0.0;
        for bi in 0..train_cfg.batch_size {
            let prompt = sampler(step, bi);
            let fwd = model.forward(&prompt)?;
            loss_acc += fwd.loss;
            model.backward_into(&fwd, &mut grads, scale);
        }
        let loss = loss_acc * scale;
        curve.push(loss);
        if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
            model.params.copy_from_slice(&last_good);
            status = TrainStatus::Diverged { step, loss };
            break;
        }
        last_good.copy_from_slice(&model.params);
        adam_step(&mut model.params, &grads, &mut adam, train_cfg, &model.layout)?;

        if train_cfg.checkpoint_every > 0 && (step + 1) % train_cfg.checkpoint_every == 0 {
            if let Some(dir) = out_dir {
                let path = dir.join(format!("checkpoint_step{}.ckpt", step + 1));
                save_checkpoint(&model, step + 1, train_cfg.seed, &path)?;
            }
        }
    }

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let step = match status {
            TrainStatus::Completed => train_cfg.steps,
            TrainStatus::Diverged { step, .. } => step.saturating_sub(1),
        };
        save_checkpoint(&model, step, train_cfg.seed, &dir.join("checkpoint.ckpt"))?;
    }

    Ok(TrainResult {
        model,
        curve,
        status,
    })
}

/// Writes a `step,loss` CSV of the training curve.
pub fn write_loss_curve(path: &Path, curve: &[f64]) -> Result<()> {
    let mut out = String::from("step,loss\n");
    for (i, l) in curve.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}
