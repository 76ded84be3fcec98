//! Natural/robust accuracy measurement and the numerical verifier for the
//! population-coverage loss bound (gamma + L * eta).

use crate::attack::{pgd_attack, AttackConfig, PerturbationBall};
use crate::dataio::LabeledDataset;
use crate::error::{Error, Result};
use crate::evolution::Population;
use crate::model::PromptedClassifier;
use crate::numcore::{RandomStream, RealVector};
use crate::par;
use serde::Serialize;

/// Natural vs attacked accuracy under a fixed PGD budget.
#[derive(Clone, Debug, Serialize)]
pub struct RobustnessReport {
    pub natural_acc: f64,
    pub robust_acc: f64,
    pub attack_steps: usize,
    pub epsilon: f64,
    pub per_class_acc: Vec<f64>,
}

/// Argmax with ties resolved to the smallest class index.
pub fn predict(model: &PromptedClassifier, x: &RealVector) -> Result<usize> {
    let fwd = model.forward(x)?;
    let mut best = 0;
    for j in 1..fwd.probs.len() {
        if fwd.probs[j] > fwd.probs[best] {
            best = j;
        }
    }
    Ok(best)
}

/// Fraction of examples classified correctly.
pub fn accuracy(model: &PromptedClassifier, dataset: &LabeledDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("dataset"));
    }
    let hits = par::try_map_indexed(dataset.inputs(), |i, x| {
        Ok(predict(model, x)? == dataset.label(i))
    })?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / dataset.len() as f64)
}

/// Per-class natural accuracy.
pub fn per_class_accuracy(
    model: &PromptedClassifier,
    dataset: &LabeledDataset,
) -> Result<Vec<f64>> {
    let hits = par::try_map_indexed(dataset.inputs(), |i, x| {
        Ok((dataset.label(i), predict(model, x)? == dataset.label(i)))
    })?;
    let mut correct = vec![0usize; dataset.num_classes()];
    let mut total = vec![0usize; dataset.num_classes()];
    for (y, hit) in hits {
        total[y] += 1;
        if hit {
            correct[y] += 1;
        }
    }
    Ok(correct
        .iter()
        .zip(total.iter())
        .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
        .collect())
}

/// Accuracy under per-example PGD. An example counts as robust only if both
/// the clean input and the attacked input are classified correctly (the
/// zero perturbation is always in the attacker's candidate set), so robust
/// accuracy can never exceed natural accuracy.
pub fn robust_accuracy(
    model: &PromptedClassifier,
    dataset: &LabeledDataset,
    ball: &PerturbationBall,
    cfg: &AttackConfig,
    stream: &RandomStream,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("dataset"));
    }
    cfg.validate()?;
    let hits = par::try_map_indexed(dataset.inputs(), |i, x| {
        let y = dataset.label(i);
        if predict(model, x)? != y {
            return Ok(false);
        }
        let mut s = stream.split(i as u64);
        let delta = pgd_attack(model, x, y, ball, cfg, &mut s)?;
        Ok(predict(model, &x.add(&delta))? == y)
    })?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / dataset.len() as f64)
}

/// Natural + robust accuracy in one report.
pub fn robustness_report(
    model: &PromptedClassifier,
    dataset: &LabeledDataset,
    ball: &PerturbationBall,
    cfg: &AttackConfig,
    stream: &RandomStream,
) -> Result<RobustnessReport> {
    Ok(RobustnessReport {
        natural_acc: accuracy(model, dataset)?,
        robust_acc: robust_accuracy(model, dataset, ball, cfg, stream)?,
        attack_steps: cfg.steps,
        epsilon: ball.epsilon,
        per_class_acc: per_class_accuracy(model, dataset)?,
    })
}

/// Result of the held-out bound check on one example's population.
#[derive(Clone, Debug, Serialize)]
pub struct TheoremCheckReport {
    /// Mean adversarial CE loss over the population members.
    pub gamma: f64,
    /// Empirical Lipschitz estimate from the calibration half.
    pub l_hat: f64,
    /// Covering radius of the held-out samples by the population (L-inf).
    pub eta_cover: f64,
    /// Total number of uniform ball samples drawn.
    pub samples: usize,
    /// Fraction of held-out samples whose loss exceeds
    /// gamma + l_hat * eta_cover + 1e-9.
    pub violation_rate: f64,
    /// Largest held-out excess over the bound (negative when slack).
    pub max_excess: f64,
    /// All population members coincide; the covering radius then reflects a
    /// single point and the bound check degenerates.
    pub degenerate: bool,
}

const DIST_FLOOR: f64 = 1e-9;
const BOUND_SLACK: f64 = 1e-9;

/// Check the bound loss(delta) <= gamma + L * eta over the ball.
///
/// gamma is the population's mean adversarial loss. The Lipschitz constant
/// is estimated from loss-difference ratios on a calibration half of the
/// samples (including calibration-to-member pairs); the bound is then
/// checked on the held-out half, whose covering radius by the population
/// gives eta. Fitting and checking on the same points would make the check
/// vacuous.
pub fn verify_theorem(
    model: &PromptedClassifier,
    x: &RealVector,
    y: usize,
    population: &Population,
    ball: &PerturbationBall,
    n_samples: usize,
    stream: &mut RandomStream,
) -> Result<TheoremCheckReport> {
    if n_samples < 100 {
        return Err(Error::config("samples", "at least 100 samples required"));
    }
    let members = population.deltas();
    if members.is_empty() {
        return Err(Error::EmptyInput("population"));
    }
    let member_losses: Vec<f64> = {
        let losses = par::try_map_indexed(members, |_, d| model.loss_ce(&x.add(d), y))?;
        losses
    };
    let gamma = member_losses.iter().sum::<f64>() / member_losses.len() as f64;
    let degenerate = members
        .windows(2)
        .all(|w| w[0].linf_distance(&w[1]) <= 1e-15);

    let dim = x.len();
    let samples: Vec<RealVector> = (0..n_samples)
        .map(|_| stream.uniform_vector(dim, -ball.epsilon, ball.epsilon))
        .collect::<Result<_>>()?;
    let losses = par::try_map_indexed(&samples, |_, d| model.loss_ce(&x.add(d), y))?;

    let half = n_samples / 2;
    let (calib, held) = samples.split_at(half);
    let (calib_losses, held_losses) = losses.split_at(half);

    // Lipschitz estimate: max loss-difference ratio over calibration pairs
    // and calibration-to-member pairs, distances floored.
    let mut l_hat: f64 = 0.0;
    for i in 0..calib.len() {
        for j in (i + 1)..calib.len() {
            let dist = calib[i].linf_distance(&calib[j]).max(DIST_FLOOR);
            l_hat = l_hat.max((calib_losses[i] - calib_losses[j]).abs() / dist);
        }
        for (m, ml) in members.iter().zip(member_losses.iter()) {
            let dist = calib[i].linf_distance(m).max(DIST_FLOOR);
            l_hat = l_hat.max((calib_losses[i] - ml).abs() / dist);
        }
    }

    // Covering radius of the held-out half by the population.
    let eta_cover = held
        .iter()
        .map(|s| {
            members
                .iter()
                .map(|m| s.linf_distance(m))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max);

    let bound = gamma + l_hat * eta_cover;
    let mut violations = 0usize;
    let mut max_excess = f64::NEG_INFINITY;
    for &loss in held_losses {
        let excess = loss - bound;
        max_excess = max_excess.max(excess);
        if excess > BOUND_SLACK {
            violations += 1;
        }
    }
    Ok(TheoremCheckReport {
        gamma,
        l_hat,
        eta_cover,
        samples: n_samples,
        violation_rate: violations as f64 / held.len() as f64,
        max_excess,
        degenerate,
    })
}
