//! Training loops with exact forward/backward pass accounting.
//!
//! Every full network traversal costs one symbolic unit N. A training step
//! of the composite defense spends two forwards (substitute + target) and
//! one backward (target only, the substitute being frozen); adversarial
//! training spends a forward and a backward per attack iteration on top of
//! its own training step. The counters here measure those totals exactly so
//! the closed-form per-step costs can be verified as integer identities.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{pgd_attack_core, AttackError, PgdConfig};
use crate::data::DatasetContainer;
use crate::net::{AbnnModel, ConvNet, SubGrad};
use crate::norm::BnMode;
use crate::tensor::{Graph, ParamStore, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NetKind {
    Target,
    Substitute,
}

/// Monotone per-network tally of full forward and backward traversals.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassCounter {
    forward: BTreeMap<NetKind, u64>,
    backward: BTreeMap<NetKind, u64>,
}

impl PassCounter {
    pub fn record_forward(&mut self, net: NetKind) {
        *self.forward.entry(net).or_insert(0) += 1;
    }

    pub fn record_backward(&mut self, net: NetKind) {
        *self.backward.entry(net).or_insert(0) += 1;
    }

    pub fn forward_of(&self, net: NetKind) -> u64 {
        self.forward.get(&net).copied().unwrap_or(0)
    }

    pub fn backward_of(&self, net: NetKind) -> u64 {
        self.backward.get(&net).copied().unwrap_or(0)
    }

    pub fn total_forward(&self) -> u64 {
        self.forward.values().sum()
    }

    pub fn total_backward(&self) -> u64 {
        self.backward.values().sum()
    }

    /// Total network passes in units of N.
    pub fn total_passes(&self) -> u64 {
        self.total_forward() + self.total_backward()
    }
}

// ── Closed-form per-step training costs (coefficients of N) ────────────

/// Defense training step: substitute forward + target forward + target
/// backward.
pub fn cost_abnn() -> u64 {
    3
}

/// Undefended training step: one forward, one backward.
pub fn cost_no_defense() -> u64 {
    2
}

/// Adversarial training step: `t_max` attack iterations at a forward and a
/// backward each, plus the training forward and backward.
pub fn cost_pgd_at(t_max: usize) -> u64 {
    2 * (t_max as u64 + 1)
}

/// Adversarial training through a feature-denoising stack of the same size
/// as the backbone: every pass costs double.
pub fn cost_oudefend(t_max: usize) -> u64 {
    4 * (t_max as u64 + 1)
}

/// How many times more a PGD-AT step costs than a defense step:
/// `2(t_max + 1) / 3`.
pub fn cost_ratio(t_max: usize) -> f64 {
    cost_pgd_at(t_max) as f64 / cost_abnn() as f64
}

/// Cost model pinned to one attack-iteration budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub t_max: usize,
}

impl CostModel {
    pub fn abnn_per_step(&self) -> u64 {
        cost_abnn()
    }

    pub fn no_defense_per_step(&self) -> u64 {
        cost_no_defense()
    }

    pub fn pgd_at_per_step(&self) -> u64 {
        cost_pgd_at(self.t_max)
    }

    pub fn oudefend_per_step(&self) -> u64 {
        cost_oudefend(self.t_max)
    }

    pub fn ratio(&self) -> f64 {
        cost_ratio(self.t_max)
    }
}

/// True iff the measured passes equal the predicted per-step coefficient
/// exactly (integer identity, no tolerance).
pub fn verify_cost_model(counter: &PassCounter, steps: u64, predicted_per_step: u64) -> bool {
    steps > 0 && counter.total_passes() == steps * predicted_per_step
}

// ── SGD ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

fn default_momentum() -> f64 {
    0.9
}

impl SgdConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.learning_rate <= 0.0 {
            return Err(TrainError::BadConfig("learning_rate must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(TrainError::BadConfig(
                "batch_size must be at least 2 (batch statistics must exist)".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(TrainError::BadConfig("epochs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::BadConfig("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Plain SGD with momentum, bound to a single parameter store. Frozen
/// parameters are never updated.
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd { lr, momentum, velocity: Vec::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        if self.velocity.len() != store.len() {
            self.velocity = store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        }
        for (i, p) in store.iter_mut().enumerate() {
            if p.frozen {
                continue;
            }
            let Some(grad) = p.value.grad.take() else { continue };
            let vel = &mut self.velocity[i];
            for ((w, v), g) in p.value.data_mut().iter_mut().zip(vel.iter_mut()).zip(&grad) {
                *v = self.momentum * *v + g;
                *w -= self.lr * *v;
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged: non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("refusing to train: substitute model is not frozen")]
    SubstituteNotFrozen,
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Attack(#[from] AttackError),
}

/// What a training run measured.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub counter: PassCounter,
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

fn epoch_batches(len: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut indices: Vec<usize> = (0..len).collect();
    indices.shuffle(rng);
    // Incomplete trailing batches are dropped so every step sees full batch
    // statistics.
    indices.chunks_exact(batch_size).map(|c| c.to_vec()).collect()
}

/// Clean SGD training of a plain network. The undefended baseline.
pub fn train_plain(
    data: &DatasetContainer,
    net: &mut ConvNet,
    cfg: &SgdConfig,
    seed: u64,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum);
    let mut counter = PassCounter::default();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut steps = 0u64;
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        let batches = epoch_batches(data.len(), cfg.batch_size, &mut rng);
        let count = batches.len();
        for batch in batches {
            let (x, y) = data.batch(&batch);
            let mut g = Graph::new();
            let xv = g.constant(&x);
            let out = net.forward(&mut g, xv, BnMode::Train, &mut counter)?;
            let loss = g.softmax_cross_entropy(out.logits, &y)?;
            let loss_val = g.data(loss)[0];
            if !loss_val.is_finite() {
                return Err(TrainError::NonFiniteLoss { step: steps });
            }
            g.backward(loss)?;
            counter.record_backward(net.kind);
            net.params.zero_grads();
            net.params.absorb_grads(&g);
            opt.step(&mut net.params);
            net.update_running_stats(&out.batch_stats);
            total += loss_val;
            steps += 1;
        }
        epoch_losses.push(total / count.max(1) as f64);
    }
    Ok(TrainOutcome { counter, epoch_losses, steps })
}

/// Pre-train the substitute on its own (disjoint) dataset, then freeze it.
pub fn pretrain_substitute(
    data: &DatasetContainer,
    net: &mut ConvNet,
    cfg: &SgdConfig,
    seed: u64,
) -> Result<TrainOutcome, TrainError> {
    let outcome = train_plain(data, net, cfg, seed)?;
    net.freeze();
    Ok(outcome)
}

/// Train the composite's target (and encoders) on clean data only. Per
/// step: one substitute forward, one target forward, one target backward.
pub fn train_target(
    data: &DatasetContainer,
    model: &mut AbnnModel,
    cfg: &SgdConfig,
    seed: u64,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if !model.substitute.is_frozen() {
        return Err(TrainError::SubstituteNotFrozen);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum);
    let mut counter = PassCounter::default();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut steps = 0u64;
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        let batches = epoch_batches(data.len(), cfg.batch_size, &mut rng);
        let count = batches.len();
        for batch in batches {
            let (x, y) = data.batch(&batch);
            let mut g = Graph::new();
            let xv = g.constant(&x);
            let logits = model.forward(&mut g, xv, SubGrad::Detached, None, &mut counter)?;
            let loss = g.softmax_cross_entropy(logits, &y)?;
            let loss_val = g.data(loss)[0];
            if !loss_val.is_finite() {
                return Err(TrainError::NonFiniteLoss { step: steps });
            }
            g.backward(loss)?;
            counter.record_backward(NetKind::Target);
            model.target.params.zero_grads();
            model.target.params.absorb_grads(&g);
            opt.step(&mut model.target.params);
            total += loss_val;
            steps += 1;
        }
        epoch_losses.push(total / count.max(1) as f64);
    }
    Ok(TrainOutcome { counter, epoch_losses, steps })
}

/// Standard adversarial training: attack every batch with PGD, then take a
/// clean training step on the attacked inputs.
pub fn train_pgd_at(
    data: &DatasetContainer,
    net: &mut ConvNet,
    cfg: &SgdConfig,
    pgd: &PgdConfig,
    seed: u64,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    pgd.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut attack_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x41d5_a77c);
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum);
    let mut counter = PassCounter::default();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut steps = 0u64;
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        let batches = epoch_batches(data.len(), cfg.batch_size, &mut rng);
        let count = batches.len();
        for batch in batches {
            let (x, y) = data.batch(&batch);
            let adv = pgd_attack_core(&*net, &x, &y, pgd, &mut attack_rng, &mut counter)?;
            let mut g = Graph::new();
            let xv = g.constant(&adv);
            let out = net.forward(&mut g, xv, BnMode::Train, &mut counter)?;
            let loss = g.softmax_cross_entropy(out.logits, &y)?;
            let loss_val = g.data(loss)[0];
            if !loss_val.is_finite() {
                return Err(TrainError::NonFiniteLoss { step: steps });
            }
            g.backward(loss)?;
            counter.record_backward(net.kind);
            net.params.zero_grads();
            net.params.absorb_grads(&g);
            opt.step(&mut net.params);
            net.update_running_stats(&out.batch_stats);
            total += loss_val;
            steps += 1;
        }
        epoch_losses.push(total / count.max(1) as f64);
    }
    Ok(TrainOutcome { counter, epoch_losses, steps })
}

#[cfg(test)]
mod tests;
