//! Batch composition strategies and the SGD + EMA loop shared by every
//! trained component.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{reduce_grads, Ema, Matrix, ParamSet};
use crate::seed;

/// How training batches are drawn from several domains (datasets).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Half of every batch from the target domain, half from the others.
    FiftyFifty,
    /// Uniform over the union of all domains.
    Mixed,
    /// `Mixed`, then target-domain batches only for the final
    /// `fine_tune_fraction` of the iterations.
    FineTune,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::FiftyFifty, Strategy::Mixed, Strategy::FineTune];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::FiftyFifty => "fifty_fifty",
            Strategy::Mixed => "mixed",
            Strategy::FineTune => "fine_tune",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub strategy: Strategy,
    pub fine_tune_fraction: f64,
    pub ema_decay: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub max_grad_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            learning_rate: 0.05,
            batch_size: 4,
            strategy: Strategy::FineTune,
            fine_tune_fraction: 1.0 / 3.0,
            ema_decay: 0.999,
            max_grad_norm: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if self.iterations == 0 {
            return bad("iterations must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1]");
        }
        if self.strategy == Strategy::FineTune && !(self.fine_tune_fraction > 0.0 && self.fine_tune_fraction < 1.0) {
            return bad("fine_tune_fraction must lie in (0, 1)");
        }
        if self.max_grad_norm < 0.0 {
            return bad("max_grad_norm must be non-negative");
        }
        Ok(())
    }

    /// First iteration of the target-only phase.
    pub fn fine_tune_start(&self) -> usize {
        match self.strategy {
            Strategy::FineTune => {
                let n = self.iterations as f64 * (1.0 - self.fine_tune_fraction);
                n.round() as usize
            }
            _ => self.iterations,
        }
    }
}

/// One training example chosen for a batch position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub step: usize,
    pub slot: usize,
    pub domain: usize,
    pub index: usize,
}

impl Slot {
    /// Seed for per-example randomness (augmentation, anchor sampling).
    pub fn seed(&self, run_seed: u64) -> u64 {
        seed::derive(run_seed, "slot", (self.step as u64) << 16 | self.slot as u64)
    }
}

/// Draw the examples of step `step`. `pool_sizes[d]` is the number of
/// examples of domain `d`; empty domains are never drawn.
pub fn sample_batch(cfg: &TrainConfig, step: usize, pool_sizes: &[usize], target: Option<usize>) -> Vec<Slot> {
    let mut rng = seed::rng(cfg.seed, "batch", step as u64);
    let total: usize = pool_sizes.iter().sum();
    let target = target.filter(|&t| pool_sizes.get(t).is_some_and(|&n| n > 0));
    let others: Vec<usize> = (0..pool_sizes.len())
        .filter(|&d| Some(d) != target && pool_sizes[d] > 0)
        .collect();
    let uniform = |rng: &mut rand_chacha::ChaCha8Rng| {
        let mut k = rng.random_range(0..total);
        let mut d = 0;
        while k >= pool_sizes[d] {
            k -= pool_sizes[d];
            d += 1;
        }
        (d, k)
    };
    (0..cfg.batch_size)
        .map(|slot| {
            let (domain, index) = match (cfg.strategy, target) {
                (Strategy::FineTune, Some(t)) if step >= cfg.fine_tune_start() => (t, rng.random_range(0..pool_sizes[t])),
                (Strategy::FiftyFifty, Some(t)) if !others.is_empty() => {
                    let d = if slot % 2 == 0 {
                        t
                    } else {
                        others[rng.random_range(0..others.len())]
                    };
                    (d, rng.random_range(0..pool_sizes[d]))
                }
                _ => uniform(&mut rng),
            };
            Slot {
                step,
                slot,
                domain,
                index,
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub ema: Ema,
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
}

fn clip(grads: &mut [Matrix], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

fn tail(losses: &[f64]) -> Vec<f64> {
    losses[losses.len().saturating_sub(10)..].to_vec()
}

/// Plain SGD with an EMA shadow. `grad` returns the loss and gradients of
/// one example under the given parameters. Examples of a batch may be
/// evaluated on `workers` threads; their gradients are summed in batch
/// order, so results do not depend on the worker count.
pub fn run_sgd<F>(
    init: ParamSet,
    cfg: &TrainConfig,
    pool_sizes: &[usize],
    target: Option<usize>,
    workers: usize,
    what: &str,
    grad: F,
) -> Result<TrainOutcome>
where
    F: Fn(&ParamSet, &Slot) -> Result<(f64, Vec<Matrix>)> + Sync,
{
    cfg.validate()?;
    if pool_sizes.iter().sum::<usize>() == 0 {
        return Err(Error::Config(format!("{what}: no training examples")));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut params = init;
    let mut ema = Ema::new(&params, cfg.ema_decay);
    let mut losses = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let slots = sample_batch(cfg, step, pool_sizes, target);
        let results: Vec<Result<(f64, Vec<Matrix>)>> = if workers > 1 {
            pool.install(|| slots.par_iter().map(|s| grad(&params, s)).collect())
        } else {
            slots.iter().map(|s| grad(&params, s)).collect()
        };
        let mut parts = Vec::with_capacity(results.len());
        let mut loss = 0.0;
        for r in results {
            let (l, g) = r?;
            loss += l;
            parts.push(g);
        }
        loss /= parts.len() as f64;
        losses.push(loss);
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "{what}: non-finite loss at step {step}; last losses {:?}",
                tail(&losses)
            )));
        }
        let mut g = reduce_grads(&parts, 1.0 / parts.len() as f64);
        clip(&mut g, cfg.max_grad_norm);
        params.sgd_step(&g, cfg.learning_rate)?;
        if !params.is_finite() {
            return Err(Error::Numerical(format!(
                "{what}: parameters became non-finite at step {step}; last losses {:?}",
                tail(&losses)
            )));
        }
        ema.update(&params);
        if step % 250 == 0 || step + 1 == cfg.iterations {
            log::debug!("{what}: step {step} loss {loss:.5}");
        }
    }
    Ok(TrainOutcome { params, ema, losses })
}
