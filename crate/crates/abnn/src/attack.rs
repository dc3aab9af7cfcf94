//! White-box attacks: L-inf projected gradient descent and the rectangular
//! occlusion ("sticker") attack, plus the accuracy-under-attack harness.

use std::cell::Cell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DatasetContainer;
use crate::net::{AbnnModel, ConvNet, SubGrad};
use crate::norm::BnMode;
use crate::tensor::{Graph, Tensor, TensorError};
use crate::train::PassCounter;

thread_local! {
    static ATTACK_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of attack invocations observed on this thread. Training loops
/// that must stay clean-only are audited against this probe.
pub fn attack_invocations() -> u64 {
    ATTACK_CALLS.with(|c| c.get())
}

fn note_attack_invocation() {
    ATTACK_CALLS.with(|c| c.set(c.get() + 1));
}

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("non-finite input gradient at iteration {iteration}; aborting attack")]
    NonFiniteGradient { iteration: usize },
    #[error("invalid attack config: {0}")]
    BadConfig(String),
    #[error("occlusion rectangle {h}x{w} does not fit a {image_h}x{image_w} image")]
    RectangleTooLarge { h: usize, w: usize, image_h: usize, image_w: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// L-inf PGD settings. `step_size = None` resolves to the `2.5 * eps / t_max`
/// heuristic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PgdConfig {
    pub epsilon: f64,
    #[serde(default)]
    pub step_size: Option<f64>,
    pub t_max: usize,
    #[serde(default = "default_true")]
    pub random_start: bool,
}

fn default_true() -> bool {
    true
}

impl PgdConfig {
    /// The experimental setting: budget 8/255 over 5 iterations.
    pub fn standard() -> Self {
        PgdConfig { epsilon: 8.0 / 255.0, step_size: None, t_max: 5, random_start: true }
    }

    pub fn resolved_step(&self) -> f64 {
        self.step_size.unwrap_or(2.5 * self.epsilon / self.t_max.max(1) as f64)
    }

    /// Strict validation for experiment configs. The attack itself also
    /// accepts the degenerate `epsilon = 0` / `t_max = 0` corners, which
    /// return the clean input unchanged.
    pub fn validate(&self) -> Result<(), AttackError> {
        if !(0.0 < self.epsilon && self.epsilon < 1.0) {
            return Err(AttackError::BadConfig(format!(
                "epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        if self.t_max == 0 {
            return Err(AttackError::BadConfig("t_max must be at least 1".into()));
        }
        if self.resolved_step() <= 0.0 {
            return Err(AttackError::BadConfig("step size must be positive".into()));
        }
        Ok(())
    }
}

/// Rectangular occlusion settings. The rectangle is derived from
/// `area_fraction` as the closest-to-square integer factorization; the
/// inner PGD runs on the rectangle's pixels only, bounded by `[0,1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoaConfig {
    pub area_fraction: f64,
    pub search_stride: usize,
    pub inner_steps: usize,
    pub inner_step_size: f64,
}

impl RoaConfig {
    pub fn standard() -> Self {
        RoaConfig { area_fraction: 0.10, search_stride: 2, inner_steps: 10, inner_step_size: 0.1 }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if !(0.0 < self.area_fraction && self.area_fraction <= 1.0) {
            return Err(AttackError::BadConfig(format!(
                "area_fraction must lie in (0, 1], got {}",
                self.area_fraction
            )));
        }
        if self.search_stride == 0 || self.inner_steps == 0 || self.inner_step_size <= 0.0 {
            return Err(AttackError::BadConfig(
                "search_stride, inner_steps, inner_step_size must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Closest-to-square `(height, width)` whose area is nearest the target
    /// fraction of `image_h * image_w`.
    pub fn rectangle(&self, image_h: usize, image_w: usize) -> Result<(usize, usize), AttackError> {
        let target = self.area_fraction * (image_h * image_w) as f64;
        let h = (target.sqrt().round() as usize).max(1);
        let w = ((target / h as f64).round() as usize).max(1);
        if h > image_h || w > image_w {
            return Err(AttackError::RectangleTooLarge { h, w, image_h, image_w });
        }
        Ok((h, w))
    }
}

/// An attacked batch with its provenance.
pub struct AdversarialExample {
    pub x_adv: Tensor,
    pub x_clean: Tensor,
    /// Per-sample: does the model now predict a wrong class?
    pub success: Vec<bool>,
    pub loss_before: f64,
    pub loss_after: f64,
    /// ROA only: chosen `(row, col, h, w)` rectangle per sample.
    pub rects: Option<Vec<(usize, usize, usize, usize)>>,
}

/// A differentiable classifier under the white-box threat model: the
/// adversary can query logits and exact input gradients of the full
/// pipeline.
pub trait WhiteBox {
    fn num_classes(&self) -> usize;
    fn logits(&self, x: &Tensor, counter: &mut PassCounter) -> Result<Tensor, TensorError>;
    /// Mean cross-entropy and its gradient w.r.t. the input. Costs one
    /// forward and one backward network pass.
    fn loss_grad(
        &self,
        x: &Tensor,
        y: &[usize],
        counter: &mut PassCounter,
    ) -> Result<(f64, Tensor), TensorError>;
}

impl WhiteBox for ConvNet {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn logits(&self, x: &Tensor, counter: &mut PassCounter) -> Result<Tensor, TensorError> {
        self.eval_logits(x, counter)
    }

    fn loss_grad(
        &self,
        x: &Tensor,
        y: &[usize],
        counter: &mut PassCounter,
    ) -> Result<(f64, Tensor), TensorError> {
        let mut g = Graph::new();
        let mut input = x.clone();
        input.requires_grad = true;
        let xv = g.leaf(&input);
        let out = self.forward(&mut g, xv, BnMode::Eval, counter)?;
        let loss = g.softmax_cross_entropy(out.logits, y)?;
        g.backward(loss)?;
        counter.record_backward(self.kind);
        let grad = Tensor::new(
            g.grad(xv).expect("input requires grad").to_vec(),
            x.shape().to_vec(),
        )?;
        Ok((g.data(loss)[0], grad))
    }
}

/// Attack surface over the composite model; `surface` selects whether the
/// substitute path is differentiated through or held constant.
pub struct AbnnWhiteBox<'a> {
    pub model: &'a AbnnModel,
    pub surface: SubGrad,
}

impl WhiteBox for AbnnWhiteBox<'_> {
    fn num_classes(&self) -> usize {
        self.model.target.num_classes
    }

    fn logits(&self, x: &Tensor, counter: &mut PassCounter) -> Result<Tensor, TensorError> {
        self.model.eval_logits(x, self.surface, counter)
    }

    fn loss_grad(
        &self,
        x: &Tensor,
        y: &[usize],
        counter: &mut PassCounter,
    ) -> Result<(f64, Tensor), TensorError> {
        let mut g = Graph::new();
        let mut input = x.clone();
        input.requires_grad = true;
        let xv = g.leaf(&input);
        let logits = self.model.forward(&mut g, xv, self.surface, None, counter)?;
        let loss = g.softmax_cross_entropy(logits, y)?;
        g.backward(loss)?;
        counter.record_backward(crate::train::NetKind::Target);
        if self.surface == SubGrad::Full {
            counter.record_backward(crate::train::NetKind::Substitute);
        }
        let grad = Tensor::new(
            g.grad(xv).expect("input requires grad").to_vec(),
            x.shape().to_vec(),
        )?;
        Ok((g.data(loss)[0], grad))
    }
}

/// Core PGD loop: exactly `t_max` gradient steps (one forward + one
/// backward pass each), ascent by `step * sign(grad)`, projection onto the
/// eps-ball and `[0,1]`. No diagnostic passes.
pub fn pgd_attack_core(
    model: &dyn WhiteBox,
    x: &Tensor,
    y: &[usize],
    cfg: &PgdConfig,
    rng: &mut ChaCha8Rng,
    counter: &mut PassCounter,
) -> Result<Tensor, AttackError> {
    note_attack_invocation();
    let step = cfg.resolved_step();
    let mut adv = x.clone();
    if cfg.random_start && cfg.epsilon > 0.0 {
        for (a, &c) in adv.data_mut().iter_mut().zip(x.data()) {
            let delta = rng.random_range(-cfg.epsilon..=cfg.epsilon);
            *a = (c + delta).clamp(c - cfg.epsilon, c + cfg.epsilon).clamp(0.0, 1.0);
        }
    }
    for iteration in 0..cfg.t_max {
        let (_, grad) = model.loss_grad(&adv, y, counter)?;
        if !grad.all_finite() {
            return Err(AttackError::NonFiniteGradient { iteration });
        }
        for ((a, &g), &c) in adv.data_mut().iter_mut().zip(grad.data()).zip(x.data()) {
            let stepped = *a + step * sign(g);
            *a = stepped.clamp(c - cfg.epsilon, c + cfg.epsilon).clamp(0.0, 1.0);
        }
    }
    Ok(adv)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn batch_losses(logits: &Tensor, y: &[usize]) -> Vec<f64> {
    let k = logits.shape()[1];
    y.iter()
        .enumerate()
        .map(|(i, &label)| {
            let row = &logits.data()[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[label]
        })
        .collect()
}

fn predictions(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    (0..logits.shape()[0])
        .map(|i| {
            let row = &logits.data()[i * k..(i + 1) * k];
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(j, _)| j)
                .unwrap_or(0)
        })
        .collect()
}

/// Full PGD attack with before/after diagnostics.
pub fn pgd_attack(
    model: &dyn WhiteBox,
    x: &Tensor,
    y: &[usize],
    cfg: &PgdConfig,
    rng: &mut ChaCha8Rng,
    counter: &mut PassCounter,
) -> Result<AdversarialExample, AttackError> {
    let before = batch_losses(&model.logits(x, counter)?, y);
    let adv = pgd_attack_core(model, x, y, cfg, rng, counter)?;
    let logits_after = model.logits(&adv, counter)?;
    let after = batch_losses(&logits_after, y);
    let success: Vec<bool> =
        predictions(&logits_after).iter().zip(y).map(|(p, l)| p != l).collect();
    Ok(AdversarialExample {
        x_adv: adv,
        x_clean: x.clone(),
        success,
        loss_before: mean(&before),
        loss_after: mean(&after),
        rects: None,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Rectangular occlusion attack. Phase 1 scores every grid placement with
/// the rectangle filled mid-gray and keeps, per sample, the placement that
/// maximizes the loss; phase 2 runs sign-gradient ascent on the rectangle's
/// pixels only, clipped to `[0,1]`.
pub fn roa_attack(
    model: &dyn WhiteBox,
    x: &Tensor,
    y: &[usize],
    cfg: &RoaConfig,
    counter: &mut PassCounter,
) -> Result<AdversarialExample, AttackError> {
    note_attack_invocation();
    let s = x.shape();
    let (n, c, img_h, img_w) = (s[0], s[1], s[2], s[3]);
    let (rh, rw) = cfg.rectangle(img_h, img_w)?;

    let before = batch_losses(&model.logits(x, counter)?, y);

    // Phase 1: exhaustive grid search, gray fill.
    let mut best_loss = vec![f64::NEG_INFINITY; n];
    let mut best_rect = vec![(0usize, 0usize); n];
    let mut row = 0;
    while row + rh <= img_h {
        let mut col = 0;
        while col + rw <= img_w {
            let mut filled = x.clone();
            fill_rect(&mut filled, row, col, rh, rw, 0.5);
            let losses = batch_losses(&model.logits(&filled, counter)?, y);
            for (i, &l) in losses.iter().enumerate() {
                if l > best_loss[i] {
                    best_loss[i] = l;
                    best_rect[i] = (row, col);
                }
            }
            col += cfg.search_stride;
        }
        row += cfg.search_stride;
    }

    // Phase 2: PGD restricted to each sample's rectangle, starting from the
    // gray fill, bounded only by the pixel range.
    let mut adv = x.clone();
    for (i, &(r0, c0)) in best_rect.iter().enumerate() {
        fill_sample_rect(&mut adv, i, r0, c0, rh, rw, 0.5);
    }
    for iteration in 0..cfg.inner_steps {
        let (_, grad) = model.loss_grad(&adv, y, counter)?;
        if !grad.all_finite() {
            return Err(AttackError::NonFiniteGradient { iteration });
        }
        for (i, &(r0, c0)) in best_rect.iter().enumerate() {
            for ch in 0..c {
                for r in r0..r0 + rh {
                    for col in c0..c0 + rw {
                        let idx = ((i * c + ch) * img_h + r) * img_w + col;
                        let v = adv.data()[idx] + cfg.inner_step_size * sign(grad.data()[idx]);
                        adv.data_mut()[idx] = v.clamp(0.0, 1.0);
                    }
                }
            }
        }
    }

    let logits_after = model.logits(&adv, counter)?;
    let after = batch_losses(&logits_after, y);
    let success: Vec<bool> =
        predictions(&logits_after).iter().zip(y).map(|(p, l)| p != l).collect();
    Ok(AdversarialExample {
        x_adv: adv,
        x_clean: x.clone(),
        success,
        loss_before: mean(&before),
        loss_after: mean(&after),
        rects: Some(best_rect.iter().map(|&(r, c)| (r, c, rh, rw)).collect()),
    })
}

fn fill_rect(x: &mut Tensor, row: usize, col: usize, rh: usize, rw: usize, value: f64) {
    for i in 0..x.shape()[0] {
        fill_sample_rect(x, i, row, col, rh, rw, value);
    }
}

fn fill_sample_rect(
    x: &mut Tensor,
    sample: usize,
    row: usize,
    col: usize,
    rh: usize,
    rw: usize,
    value: f64,
) {
    let s = x.shape().to_vec();
    let (c, h, w) = (s[1], s[2], s[3]);
    for ch in 0..c {
        for r in row..row + rh {
            for cc in col..col + rw {
                x.data_mut()[((sample * c + ch) * h + r) * w + cc] = value;
            }
        }
    }
}

/// What to run in [`evaluate_under_attack`].
#[derive(Debug, Clone, PartialEq)]
pub enum AttackSpec {
    None,
    Pgd(PgdConfig),
    Roa(RoaConfig),
}

/// Fraction of correct predictions on (possibly attacked) inputs. Attacks
/// are generated per batch against the full supplied model, each batch with
/// its own derived seed.
pub fn evaluate_under_attack(
    model: &dyn WhiteBox,
    data: &DatasetContainer,
    attack: &AttackSpec,
    batch_size: usize,
    seed: u64,
    counter: &mut PassCounter,
) -> Result<f64, AttackError> {
    assert!(!data.is_empty(), "evaluation dataset must be nonempty");
    let mut correct = 0usize;
    let mut seen = 0usize;
    let mut start = 0usize;
    let mut batch_index = 0u64;
    while start < data.len() {
        let end = (start + batch_size).min(data.len());
        let indices: Vec<usize> = (start..end).collect();
        let (x, y) = data.batch(&indices);
        let x_eval = match attack {
            AttackSpec::None => x,
            AttackSpec::Pgd(cfg) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ batch_index.wrapping_mul(0x9e37));
                pgd_attack_core(model, &x, &y, cfg, &mut rng, counter)?
            }
            AttackSpec::Roa(cfg) => roa_attack(model, &x, &y, cfg, counter)?.x_adv,
        };
        let logits = model.logits(&x_eval, counter)?;
        for (p, l) in predictions(&logits).iter().zip(&y) {
            if p == l {
                correct += 1;
            }
        }
        seen += y.len();
        start = end;
        batch_index += 1;
    }
    Ok(correct as f64 / seen as f64)
}
