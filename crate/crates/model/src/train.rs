//! Minibatch training with Adam, gradient clipping and best-checkpoint tracking.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sheetcoder_autodiff::{adam_step, clip_global_norm, AdamConfig, GradStore, Tape};

use crate::net::Dropout;
use crate::{Model, ModelError, Prepared};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Total optimizer steps, counting steps already taken by a resumed model.
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub eval_every: u64,
    /// Validation examples decoded for top-1 at each evaluation.
    pub valid_limit: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch_size: 16, lr: 1e-3, clip_norm: 1.0, eval_every: 100, valid_limit: 200, seed: 0 }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
    pub valid_top1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub log: Vec<LogRecord>,
    pub best_step: u64,
    pub best_loss: f64,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn mix(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED, |acc, p| splitmix(acc ^ splitmix(*p)))
}

/// Example order: global sample `p` is entry `p % n` of the permutation for epoch `p / n`.
struct Order {
    seed: u64,
    n: usize,
    epoch: u64,
    perm: Vec<usize>,
}

impl Order {
    fn new(seed: u64, n: usize) -> Self {
        Self { seed, n, epoch: u64::MAX, perm: Vec::new() }
    }

    fn get(&mut self, p: u64) -> usize {
        let epoch = p / self.n as u64;
        if epoch != self.epoch {
            self.perm = (0..self.n).collect();
            self.perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(&[self.seed, epoch])));
            self.epoch = epoch;
        }
        self.perm[(p % self.n as u64) as usize]
    }
}

/// Mean loss and greedy top-1 over (a prefix of) `examples`.
pub fn evaluate_loss(model: &Model, examples: &[Prepared], limit: usize) -> Result<(f64, f64), ModelError> {
    let mut loss = 0.0;
    for ex in examples {
        loss += model.loss(ex)?;
    }
    let loss = loss / examples.len().max(1) as f64;
    let take = &examples[..examples.len().min(limit)];
    let mut hits = 0;
    for ex in take {
        let cache = model.cache(&ex.input)?;
        if let Some(h) = model.decoder().greedy(&cache)? {
            let gold: Vec<String> = ex.gold.steps.iter().map(|(hd, id)| model.output_space().text(*hd, *id)).collect();
            hits += usize::from(h.tokens == gold);
        }
    }
    Ok((loss, hits as f64 / take.len().max(1) as f64))
}

/// Trains `model` in place up to `cfg.steps` total optimizer steps. The best model by
/// validation loss (training loss when there is no validation set) is written to
/// `best_path` at every improvement. Each log record is passed to `on_log` as it is made.
pub fn train(
    model: &mut Model,
    train: &[Prepared],
    valid: &[Prepared],
    cfg: &TrainConfig,
    best_path: Option<&Path>,
    mut on_log: impl FnMut(&LogRecord),
) -> Result<TrainOutcome, ModelError> {
    if train.is_empty() {
        return Err(ModelError::Data("no training examples".into()));
    }
    if cfg.batch_size == 0 || cfg.eval_every == 0 {
        return Err(ModelError::Config("batch_size and eval_every must be positive".into()));
    }
    let adam = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let mut order = Order::new(cfg.seed, train.len());
    let mut log = Vec::new();
    let mut best: Option<(u64, f64)> = None;
    let mut best_params = None;
    let mut window_loss = 0.0;
    let mut window_steps = 0u64;
    while model.params.step < cfg.steps {
        let step = model.params.step;
        let mut grads = GradStore::new(model.params.len());
        let mut batch_loss = 0.0;
        for j in 0..cfg.batch_size {
            let ex = &train[order.get(step * cfg.batch_size as u64 + j as u64)];
            let mut drop = Dropout::seeded(model.config.dropout, mix(&[cfg.seed, step, j as u64]));
            let mut t = Tape::new();
            let loss = model.network().loss(&mut t, &model.params, &ex.input, &ex.gold, model.output_space(), &mut drop)?;
            batch_loss += t.value(loss).item();
            t.backward(loss)?.accumulate_params(&t, &mut grads);
        }
        batch_loss /= cfg.batch_size as f64;
        grads.scale(1.0 / cfg.batch_size as f64);
        if !batch_loss.is_finite() || !grads.all_finite() {
            if let Some(p) = best_params.take() {
                model.params = p;
            }
            return Err(ModelError::Diverged { step, loss: batch_loss });
        }
        clip_global_norm(&mut grads, cfg.clip_norm);
        adam_step(&mut model.params, &grads, &adam);
        window_loss += batch_loss;
        window_steps += 1;
        let done = model.params.step;
        if done % cfg.eval_every == 0 || done == cfg.steps {
            let train_loss = window_loss / window_steps as f64;
            window_loss = 0.0;
            window_steps = 0;
            let (valid_loss, valid_top1) = if valid.is_empty() {
                (None, None)
            } else {
                let (l, a) = evaluate_loss(model, valid, cfg.valid_limit)?;
                (Some(l), Some(a))
            };
            let rec = LogRecord { step: done, train_loss, valid_loss, valid_top1 };
            on_log(&rec);
            log.push(rec);
            let score = valid_loss.unwrap_or(train_loss);
            let finite = model.params.iter().all(|(_, p)| p.value.all_finite());
            if finite && best.is_none_or(|(_, b)| score < b) {
                best = Some((done, score));
                best_params = Some(model.params.clone());
                if let Some(path) = best_path {
                    model.save(path)?;
                }
            }
        }
    }
    let (best_step, best_loss) = best.unwrap_or((model.params.step, f64::NAN));
    Ok(TrainOutcome { log, best_step, best_loss })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_a_permutation_per_epoch() {
        let mut o = Order::new(3, 7);
        let mut first: Vec<usize> = (0..7).map(|p| o.get(p)).collect();
        let second: Vec<usize> = (7..14).map(|p| o.get(p)).collect();
        assert_ne!(first, second);
        first.sort();
        assert_eq!(first, (0..7).collect::<Vec<_>>());
        let mut again = Order::new(3, 7);
        assert_eq!(again.get(9), second[2]);
    }
}
