//! Optimization loop: Adam, gradient clipping, early stopping on
//! validation log-perplexity.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Params;
use crate::error::{Error, Result};

/// A model trained on examples of one type.
pub trait Trainable {
    type Example;

    fn params(&self) -> &Params;

    fn params_mut(&mut self) -> &mut Params;

    /// Adds the gradient of the summed token NLL of `ex` into the parameter
    /// gradients. Returns `(nll, predicted tokens)`.
    fn accumulate_gradients(&mut self, ex: &Self::Example) -> Result<(f64, usize)>;

    /// `(nll, predicted tokens)` without touching gradients.
    fn example_nll(&self, ex: &Self::Example) -> Result<(f64, usize)>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// Rescale all gradients when their joint L2 norm exceeds the threshold.
    GlobalNorm,
    /// Clamp each gradient entry into `[-threshold, threshold]`.
    Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub clip_norm: f64,
    pub clip_mode: ClipMode,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            clip_norm: 5.0,
            clip_mode: ClipMode::GlobalNorm,
            learning_rate: 1e-3,
            max_epochs: 20,
            batch_size: 32,
            seed: 1,
            patience: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0) {
            return Err(Error::Contract("clip_norm must be positive".into()));
        }
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Contract(
                "patience, batch_size and max_epochs must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Contract("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Global-norm clipping. Returns the applied scale (1.0 when unclipped).
pub fn clip_gradients(params: &mut Params, clip_norm: f64) -> f64 {
    let norm = params.grad_sq_norm().sqrt();
    if norm <= clip_norm || norm == 0.0 {
        return 1.0;
    }
    let scale = clip_norm / norm;
    for t in params.tensors_mut() {
        if let Some(g) = t.grad_mut() {
            g.iter_mut().for_each(|x| *x *= scale);
        }
    }
    scale
}

/// Elementwise clamping alternative to [`clip_gradients`].
pub fn clip_values(params: &mut Params, limit: f64) {
    for t in params.tensors_mut() {
        if let Some(g) = t.grad_mut() {
            g.iter_mut().for_each(|x| *x = x.clamp(-limit, limit));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &Params, learning_rate: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Bias-corrected Adam update; gradients are cleared afterwards.
pub fn adam_step(state: &mut AdamState, params: &mut Params) {
    state.t += 1;
    let c1 = 1.0 - state.beta1.powi(state.t as i32);
    let c2 = 1.0 - state.beta2.powi(state.t as i32);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.learning_rate, state.eps);
    for ((t, m), v) in params.tensors_mut().zip(&mut state.m).zip(&mut state.v) {
        let grad = t.grad().map(<[f64]>::to_vec);
        let data = t.data_mut();
        for i in 0..data.len() {
            let g = grad.as_ref().map_or(0.0, |g| g[i]);
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        t.zero_grad();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training NLL per target token.
    pub train_loss: f64,
    pub valid_log_ppl: f64,
    pub checkpointed: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Params,
    pub best_epoch: usize,
    pub best_valid_log_ppl: f64,
    pub history: Vec<EpochRecord>,
}

/// Per-token validation log-perplexity: total NLL over total tokens.
pub fn log_perplexity<M: Trainable>(model: &M, data: &[M::Example]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract("log perplexity of an empty dataset".into()));
    }
    let (mut nll, mut tokens) = (0.0, 0usize);
    for ex in data {
        let (l, n) = model.example_nll(ex)?;
        nll += l;
        tokens += n;
    }
    Ok(nll / tokens as f64)
}

/// One optimizer update from the examples in `batch`.
pub fn train_batch<M: Trainable>(
    model: &mut M,
    adam: &mut AdamState,
    batch: &[&M::Example],
    config: &TrainConfig,
) -> Result<(f64, usize)> {
    let (mut loss, mut tokens) = (0.0, 0);
    for ex in batch {
        let (l, n) = model.accumulate_gradients(ex)?;
        loss += l;
        tokens += n;
    }
    match config.clip_mode {
        ClipMode::GlobalNorm => {
            clip_gradients(model.params_mut(), config.clip_norm);
        }
        ClipMode::Value => clip_values(model.params_mut(), config.clip_norm),
    }
    adam_step(adam, model.params_mut());
    Ok((loss, tokens))
}

/// Trains with early stopping. `on_checkpoint` runs whenever validation
/// log-perplexity strictly improves. On return the model holds the best
/// parameters, not the last.
pub fn train<M, F>(
    model: &mut M,
    train_set: &[M::Example],
    valid_set: &[M::Example],
    config: &TrainConfig,
    mut on_checkpoint: F,
) -> Result<TrainOutcome>
where
    M: Trainable,
    F: FnMut(&M, &EpochRecord) -> Result<()>,
{
    config.validate()?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(Error::Contract(
            "training and validation sets must be non-empty".into(),
        ));
    }
    let mut adam = AdamState::new(model.params(), config.learning_rate);
    let mut best: Option<(Params, usize, f64)> = None;
    let mut history = Vec::new();
    let mut stale = 0;
    let mut batch_index = 0;
    model.params_mut().zero_grads();

    for epoch in 1..=config.max_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let epoch_seed = config
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(epoch as u64);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let (mut total, mut tokens) = (0.0, 0);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&M::Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (l, n) = train_batch(model, &mut adam, &batch, config)?;
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss {
                    batch: batch_index,
                    seed: config.seed,
                });
            }
            total += l;
            tokens += n;
            batch_index += 1;
        }
        let valid = log_perplexity(model, valid_set)?;
        let improved = best.as_ref().is_none_or(|(_, _, b)| valid < *b);
        let record = EpochRecord {
            epoch,
            train_loss: total / tokens.max(1) as f64,
            valid_log_ppl: valid,
            checkpointed: improved,
        };
        if improved {
            best = Some((model.params().clone(), epoch, valid));
            stale = 0;
            on_checkpoint(model, &record)?;
        } else {
            stale += 1;
        }
        history.push(record);
        if stale >= config.patience {
            break;
        }
    }
    let (params, best_epoch, best_valid) = best.expect("at least one epoch ran");
    *model.params_mut() = params.clone();
    Ok(TrainOutcome {
        best: params,
        best_epoch,
        best_valid_log_ppl: best_valid,
        history,
    })
}

/// Plain-text history table.
pub fn history_table(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch  train_loss  valid_log_ppl  checkpoint\n");
    for r in history {
        let _ = writeln!(
            out,
            "{:>5}  {:>10.4}  {:>13.4}  {}",
            r.epoch,
            r.train_loss,
            r.valid_log_ppl,
            if r.checkpointed { "*" } else { "" }
        );
    }
    out
}
