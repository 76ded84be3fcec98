//! L-infinity projected sign-gradient machinery (PGD).
//!
//! Used standalone as the baseline attack and evaluation attack, and as the
//! per-iteration gradient step inside the evolutionary attack.

use crate::error::{Error, Result};
use crate::model::PromptedClassifier;
use crate::numcore::{RandomStream, RealVector};

/// L-infinity ball of radius epsilon, with an optional valid-data box that
/// additionally constrains x + delta entrywise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbationBall {
    pub epsilon: f64,
    pub input_lo: Option<f64>,
    pub input_hi: Option<f64>,
}

impl PerturbationBall {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::config("ball.epsilon", "must be positive and finite"));
        }
        Ok(Self {
            epsilon,
            input_lo: None,
            input_hi: None,
        })
    }

    pub fn with_box(epsilon: f64, lo: f64, hi: f64) -> Result<Self> {
        let mut ball = Self::new(epsilon)?;
        if !(lo < hi) {
            return Err(Error::config(
                "ball.input_lo",
                format!("input_lo ({lo}) must be below input_hi ({hi})"),
            ));
        }
        ball.input_lo = Some(lo);
        ball.input_hi = Some(hi);
        Ok(ball)
    }

    /// Entrywise clamp onto [-epsilon, epsilon]. Idempotent.
    pub fn project(&self, delta: &RealVector) -> RealVector {
        delta.map(|v| v.clamp(-self.epsilon, self.epsilon))
    }

    /// Clamp onto the ball and, when a data box is configured, onto
    /// {delta : x + delta in [lo, hi]}. Assumes x itself lies in the box.
    pub fn project_at(&self, delta: &RealVector, x: &RealVector) -> RealVector {
        match (self.input_lo, self.input_hi) {
            (Some(lo), Some(hi)) => {
                assert_eq!(delta.len(), x.len(), "project_at: length mismatch");
                let data: Vec<f64> = delta
                    .iter()
                    .zip(x.iter())
                    .map(|(&d, &xi)| {
                        let l = (-self.epsilon).max(lo - xi);
                        let u = self.epsilon.min(hi - xi);
                        d.clamp(l, u.max(l))
                    })
                    .collect();
                RealVector::from_vec(data).expect("finite projection")
            }
            _ => self.project(delta),
        }
    }

    pub fn contains(&self, delta: &RealVector, tol: f64) -> bool {
        delta.linf_norm() <= self.epsilon + tol
    }
}

/// PGD schedule: step count, step size (the sign-step magnitude), and
/// whether the start point is drawn uniformly from the ball.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackConfig {
    pub steps: usize,
    pub step_size: f64,
    pub random_start: bool,
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::config("attack.steps", "must be at least 1"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::config("attack.step_size", "must be positive"));
        }
        Ok(())
    }
}

/// sign with sign(0) = 0, so flat coordinates do not drift.
#[inline]
pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One projected sign-gradient ascent step on the cross-entropy loss:
/// delta' = project(delta + step_size * sign(d CE(f(x+delta), y) / d delta)).
pub fn pgd_step(
    model: &PromptedClassifier,
    x: &RealVector,
    y: usize,
    delta: &RealVector,
    ball: &PerturbationBall,
    step_size: f64,
) -> Result<RealVector> {
    if delta.len() != x.len() {
        return Err(Error::DimMismatch {
            context: "pgd_step delta",
            left: delta.len(),
            right: x.len(),
        });
    }
    let adv = x.add(delta);
    let grad = model.grad_input_ce(&adv, y)?;
    grad.validate_finite("pgd_step gradient")?;
    let mut stepped = delta.clone();
    for i in 0..stepped.len() {
        stepped[i] += step_size * sign(grad[i]);
    }
    Ok(ball.project_at(&stepped, x))
}

/// Multi-step PGD from zero or a uniform random start inside the ball.
pub fn pgd_attack(
    model: &PromptedClassifier,
    x: &RealVector,
    y: usize,
    ball: &PerturbationBall,
    cfg: &AttackConfig,
    stream: &mut RandomStream,
) -> Result<RealVector> {
    cfg.validate()?;
    let mut delta = if cfg.random_start {
        let d = stream.uniform_vector(x.len(), -ball.epsilon, ball.epsilon)?;
        ball.project_at(&d, x)
    } else {
        RealVector::zeros(x.len())
    };
    for _ in 0..cfg.steps {
        delta = pgd_step(model, x, y, &delta, ball, cfg.step_size)?;
    }
    Ok(delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BackboneKind, ModelInitSpec, PromptedClassifier};

    fn toy_model(backbone: BackboneKind, seed: u64) -> PromptedClassifier {
        PromptedClassifier::init(&ModelInitSpec {
            input_dim: 2,
            prompt_dim: 2,
            feature_dim: 4,
            num_classes: 2,
            backbone,
            init_seed: seed,
            init_scale: 1.0,
            tau_logit: 0.5,
        })
        .unwrap()
    }

    #[test]
    fn project_inside_is_identity() {
        let ball = PerturbationBall::new(0.5).unwrap();
        let d = RealVector::from_vec(vec![0.1, -0.3]).unwrap();
        assert_eq!(ball.project(&d), d);
    }

    #[test]
    fn project_clamps_to_epsilon() {
        let ball = PerturbationBall::new(1.0 / 255.0).unwrap();
        let d = RealVector::from_vec(vec![0.02]).unwrap();
        let p = ball.project(&d);
        assert_eq!(p[0], 1.0 / 255.0);
    }

    #[test]
    fn project_is_idempotent() {
        let ball = PerturbationBall::new(0.2).unwrap();
        let mut s = RandomStream::new(99);
        for _ in 0..100 {
            let d = s.uniform_vector(5, -1.0, 1.0).unwrap();
            let once = ball.project(&d);
            assert_eq!(ball.project(&once), once);
        }
    }

    #[test]
    fn project_with_box_keeps_input_valid() {
        let ball = PerturbationBall::with_box(0.5, 0.0, 1.0).unwrap();
        let x = RealVector::from_vec(vec![0.1, 0.9]).unwrap();
        let d = RealVector::from_vec(vec![-0.4, 0.4]).unwrap();
        let p = ball.project_at(&d, &x);
        assert!(x.as_slice().iter().zip(p.as_slice()).all(|(&xi, &di)| {
            let v = xi + di;
            (0.0..=1.0).contains(&v)
        }));
        // statically inside everything -> untouched
        let small = RealVector::from_vec(vec![0.05, -0.05]).unwrap();
        assert_eq!(ball.project_at(&small, &x), small);
    }

    #[test]
    fn zero_step_size_is_projection_only() {
        let m = toy_model(BackboneKind::Linear, 1);
        let ball = PerturbationBall::new(0.1).unwrap();
        let x = RealVector::from_vec(vec![0.3, -0.2]).unwrap();
        let d = RealVector::from_vec(vec![0.05, -0.05]).unwrap();
        let out = pgd_step(&m, &x, 0, &d, &ball, 0.0).unwrap();
        assert_eq!(out, d);
    }

    #[test]
    fn pgd_step_stays_in_ball_and_moves_by_step() {
        let m = toy_model(BackboneKind::OneHiddenTanh, 2);
        let ball = PerturbationBall::new(0.05).unwrap();
        let mut s = RandomStream::new(5);
        for _ in 0..50 {
            let x = s.uniform_vector(2, -1.0, 1.0).unwrap();
            let d = s.uniform_vector(2, -0.05, 0.05).unwrap();
            let out = pgd_step(&m, &x, 0, &d, &ball, 0.01).unwrap();
            assert!(ball.contains(&out, 1e-15));
            for i in 0..2 {
                let moved = (out[i] - d[i]).abs();
                assert!(moved <= 0.01 + 1e-15);
            }
        }
    }

    #[test]
    fn one_step_increases_ce_on_linear_backbone() {
        // Sign-gradient ascent from delta = 0 with a paper-scale epsilon.
        let ball = PerturbationBall::new(1.0 / 255.0).unwrap();
        let mut s = RandomStream::new(31);
        let mut checked = 0;
        for seed in 0..40u64 {
            let m = toy_model(BackboneKind::Linear, seed);
            let x = s.uniform_vector(2, -1.0, 1.0).unwrap();
            let y = s.next_below(2) as usize;
            let g = m.grad_input_ce(&x, y).unwrap();
            // Treat a numerically flat landscape as the excluded
            // zero-gradient case; the first-order increase is swamped by
            // curvature there.
            if g.linf_norm() < 1e-8 {
                continue;
            }
            let before = m.loss_ce(&x, y).unwrap();
            let d = pgd_step(&m, &x, y, &RealVector::zeros(2), &ball, ball.epsilon).unwrap();
            let after = m.loss_ce(&x.add(&d), y).unwrap();
            assert!(after > before, "loss did not increase: {before} -> {after}");
            checked += 1;
        }
        assert!(checked > 30);
    }

    #[test]
    fn single_step_attack_equals_pgd_step_from_zero() {
        let m = toy_model(BackboneKind::Linear, 9);
        let ball = PerturbationBall::new(0.02).unwrap();
        let x = RealVector::from_vec(vec![0.4, 0.1]).unwrap();
        let cfg = AttackConfig {
            steps: 1,
            step_size: 0.01,
            random_start: false,
        };
        let mut stream = RandomStream::new(0);
        let a = pgd_attack(&m, &x, 1, &ball, &cfg, &mut stream).unwrap();
        let b = pgd_step(&m, &x, 1, &RealVector::zeros(2), &ball, 0.01).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn attack_is_deterministic_per_stream() {
        let m = toy_model(BackboneKind::OneHiddenTanh, 12);
        let ball = PerturbationBall::new(0.1).unwrap();
        let x = RealVector::from_vec(vec![-0.3, 0.6]).unwrap();
        let cfg = AttackConfig {
            steps: 5,
            step_size: 0.02,
            random_start: true,
        };
        let mut s1 = RandomStream::new(77).split_str("attack");
        let mut s2 = RandomStream::new(77).split_str("attack");
        let a = pgd_attack(&m, &x, 0, &ball, &cfg, &mut s1).unwrap();
        let b = pgd_attack(&m, &x, 0, &ball, &cfg, &mut s2).unwrap();
        assert_eq!(a, b);
        assert!(ball.contains(&a, 1e-15));
    }

    #[test]
    fn attack_config_validation() {
        assert!(AttackConfig {
            steps: 0,
            step_size: 0.1,
            random_start: false
        }
        .validate()
        .is_err());
        assert!(AttackConfig {
            steps: 1,
            step_size: 0.0,
            random_start: false
        }
        .validate()
        .is_err());
    }
}
