//! Combined clean/robust training objective and the dynamic loss-weighting
//! scheduler: per-epoch learning speeds (loss ratios) drive a softmax split
//! of the clean-CE and robust-KL weights, with the first two epochs pinned
//! to the initial weights.

use crate::error::{Error, Result};
use crate::model::PromptedClassifier;
use crate::numcore::{RealVector, PROB_FLOOR};
use serde::Serialize;

/// Initial weights and softmax temperature for the scheduler.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightConfig {
    pub alpha_init: f64,
    pub beta_init: f64,
    pub temperature: f64,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self {
            alpha_init: 1.0,
            beta_init: 1.5,
            temperature: 1.0,
        }
    }
}

impl WeightConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_init > 0.0 && self.alpha_init.is_finite()) {
            return Err(Error::config("weights.alpha_init", "must be positive"));
        }
        if !(self.beta_init > 0.0 && self.beta_init.is_finite()) {
            return Err(Error::config("weights.beta_init", "must be positive"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("weights.temperature", "must be positive"));
        }
        Ok(())
    }
}

/// Per-epoch record emitted by [`LossWeightState::epoch_weighting`]:
/// epoch, w_acc, w_rob, alpha, beta (the weight/speed CSV columns).
#[derive(Clone, Copy, Debug, Serialize)]
pub struct EpochWeightLog {
    pub epoch: usize,
    pub w_acc: f64,
    pub w_rob: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// Scheduler state: current weights, epoch accumulators, and the previous
/// epoch's mean losses.
#[derive(Clone, Debug)]
pub struct LossWeightState {
    alpha: f64,
    beta: f64,
    alpha_init: f64,
    beta_init: f64,
    temperature: f64,
    epoch_ce_sum: f64,
    epoch_kl_sum: f64,
    epoch_count: usize,
    prev_ce: Option<f64>,
    prev_kl: Option<f64>,
    /// 1-based index of the last finalized epoch (0 before any).
    epoch_index: usize,
}

const RATIO_FLOOR: f64 = 1e-12;

impl LossWeightState {
    pub fn new(cfg: &WeightConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            alpha: cfg.alpha_init,
            beta: cfg.beta_init,
            alpha_init: cfg.alpha_init,
            beta_init: cfg.beta_init,
            temperature: cfg.temperature,
            epoch_ce_sum: 0.0,
            epoch_kl_sum: 0.0,
            epoch_count: 0,
            prev_ce: None,
            prev_kl: None,
            epoch_index: 0,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn epoch_index(&self) -> usize {
        self.epoch_index
    }

    /// Fold a batch's summed loss components into the current epoch.
    /// Called by the single trainer thread in deterministic batch order.
    pub fn accumulate(&mut self, ce_sum: f64, kl_sum: f64, count: usize) {
        self.epoch_ce_sum += ce_sum;
        self.epoch_kl_sum += kl_sum;
        self.epoch_count += count;
    }

    fn current_means(&self) -> Result<(f64, f64)> {
        if self.epoch_count == 0 {
            return Err(Error::EmptyInput("epoch accumulators"));
        }
        let n = self.epoch_count as f64;
        Ok((self.epoch_ce_sum / n, self.epoch_kl_sum / n))
    }

    /// Mean losses accumulated so far this epoch.
    pub fn pending_means(&self) -> Result<(f64, f64)> {
        self.current_means()
    }

    /// Learning speeds: ratio of the current epoch's mean loss to the
    /// previous epoch's, denominators floored. Errors if no previous epoch
    /// exists (callers must respect the warmup).
    pub fn learning_speeds(&self) -> Result<(f64, f64)> {
        let (ce, kl) = self.current_means()?;
        let prev_ce = self
            .prev_ce
            .ok_or(Error::EmptyInput("previous-epoch CE mean"))?;
        let prev_kl = self
            .prev_kl
            .ok_or(Error::EmptyInput("previous-epoch KL mean"))?;
        Ok((
            ce / prev_ce.max(RATIO_FLOOR),
            kl / prev_kl.max(RATIO_FLOOR),
        ))
    }

    /// Softmax reweighting over the two learning speeds, scaled so that
    /// alpha/alpha_init + beta/beta_init = 2 exactly.
    pub fn update_weights(&mut self, w_acc: f64, w_rob: f64) -> Result<()> {
        if !w_acc.is_finite() || !w_rob.is_finite() {
            return Err(Error::NonFinite("learning speeds"));
        }
        let a = w_acc / self.temperature;
        let b = w_rob / self.temperature;
        let m = a.max(b);
        let ea = (a - m).exp();
        let eb = (b - m).exp();
        let denom = ea + eb;
        self.alpha = self.alpha_init * 2.0 * ea / denom;
        self.beta = self.beta_init * 2.0 * eb / denom;
        Ok(())
    }

    /// Epoch-end update. Epochs 1 and 2 (1-based) keep the initial weights;
    /// afterwards the speeds/softmax rule applies. Rolls the current means
    /// into the previous-epoch slots and resets the accumulators.
    pub fn epoch_weighting(&mut self) -> Result<EpochWeightLog> {
        let (ce, kl) = self.current_means()?;
        self.epoch_index += 1;
        let (w_acc, w_rob) = if self.epoch_index <= 2 {
            self.alpha = self.alpha_init;
            self.beta = self.beta_init;
            (1.0, 1.0)
        } else {
            let speeds = self.learning_speeds()?;
            self.update_weights(speeds.0, speeds.1)?;
            speeds
        };
        self.prev_ce = Some(ce);
        self.prev_kl = Some(kl);
        self.epoch_ce_sum = 0.0;
        self.epoch_kl_sum = 0.0;
        self.epoch_count = 0;
        Ok(EpochWeightLog {
            epoch: self.epoch_index,
            w_acc,
            w_rob,
            alpha: self.alpha,
            beta: self.beta,
        })
    }
}

/// Combined loss value and its decomposition for one example.
#[derive(Clone, Debug)]
pub struct CombinedLoss {
    pub total: f64,
    pub ce: f64,
    pub kl_mean: f64,
    pub prompt_grad: RealVector,
}

/// total = alpha * CE(f(x), y) + beta * mean_i KL over the adversarial set.
/// KL order is clean-first unless `kl_reversed`.
pub fn combined_loss(
    model: &PromptedClassifier,
    x: &RealVector,
    y: usize,
    adv_deltas: &[RealVector],
    alpha: f64,
    beta: f64,
    kl_reversed: bool,
) -> Result<(f64, f64, f64)> {
    if adv_deltas.is_empty() {
        return Err(Error::EmptyInput("adversarial delta set"));
    }
    let ce = model.loss_ce(x, y)?;
    let kl_mean = if all_equal(adv_deltas) {
        kl_of(model, x, &x.add(&adv_deltas[0]), kl_reversed)?
    } else {
        let mut sum = 0.0;
        for d in adv_deltas {
            sum += kl_of(model, x, &x.add(d), kl_reversed)?;
        }
        sum / adv_deltas.len() as f64
    };
    Ok((alpha * ce + beta * kl_mean, ce, kl_mean))
}

/// [`combined_loss`] plus the analytic prompt gradient of the total.
pub fn combined_loss_with_grad(
    model: &PromptedClassifier,
    x: &RealVector,
    y: usize,
    adv_deltas: &[RealVector],
    alpha: f64,
    beta: f64,
    kl_reversed: bool,
) -> Result<CombinedLoss> {
    if adv_deltas.is_empty() {
        return Err(Error::EmptyInput("adversarial delta set"));
    }
    let ce = model.loss_ce(x, y)?;
    let g_ce = model.grad_prompt_ce(x, y)?;

    // Identical members collapse to one evaluation; the mean over k equal
    // terms must equal the single term exactly.
    let (kl_mean, g_kl_mean) = if all_equal(adv_deltas) {
        let adv = x.add(&adv_deltas[0]);
        (
            kl_of(model, x, &adv, kl_reversed)?,
            kl_prompt_grad(model, x, &adv, kl_reversed)?,
        )
    } else {
        let mut sum = 0.0;
        let mut gsum = RealVector::zeros(model.prompt_dim());
        for d in adv_deltas {
            let adv = x.add(d);
            sum += kl_of(model, x, &adv, kl_reversed)?;
            gsum.add_scaled(1.0, &kl_prompt_grad(model, x, &adv, kl_reversed)?);
        }
        let k = adv_deltas.len() as f64;
        (sum / k, gsum.scale(1.0 / k))
    };

    let mut prompt_grad = g_ce.scale(alpha);
    prompt_grad.add_scaled(beta, &g_kl_mean);
    let total = alpha * ce + beta * kl_mean;
    if !total.is_finite() {
        return Err(Error::NonFinite("combined loss"));
    }
    Ok(CombinedLoss {
        total,
        ce,
        kl_mean,
        prompt_grad,
    })
}

fn kl_of(
    model: &PromptedClassifier,
    x_clean: &RealVector,
    x_adv: &RealVector,
    reversed: bool,
) -> Result<f64> {
    if reversed {
        model.loss_kl_reversed(x_clean, x_adv)
    } else {
        model.loss_kl(x_clean, x_adv)
    }
}

fn kl_prompt_grad(
    model: &PromptedClassifier,
    x_clean: &RealVector,
    x_adv: &RealVector,
    reversed: bool,
) -> Result<RealVector> {
    if reversed {
        model.grad_prompt_kl_reversed(x_clean, x_adv)
    } else {
        model.grad_prompt_kl(x_clean, x_adv)
    }
}

fn all_equal(deltas: &[RealVector]) -> bool {
    deltas.windows(2).all(|w| w[0] == w[1])
}

/// Floor shared with the loss ratio denominators; re-exported for tests.
pub fn ratio_floor() -> f64 {
    RATIO_FLOOR
}

/// Kept alongside the scheduler because both floor probabilities the same
/// way; documents the coupling.
pub fn prob_floor() -> f64 {
    PROB_FLOOR
}
