//! End-to-end training loop: per-batch population evolution (or the
//! single-PGD baseline), combined loss over the selected adversarial
//! examples, SGD-with-momentum prompt updates under warmup + cosine
//! learning rate, and per-epoch dynamic loss weighting.

use crate::attack::{pgd_attack, AttackConfig, PerturbationBall};
use crate::dataio::LabeledDataset;
use crate::error::{Error, Result};
use crate::evaluation;
use crate::evolution::{
    final_selected, run_evolution_population, EvolutionConfig, IterationTrace,
};
use crate::losses::{combined_loss_with_grad, EpochWeightLog, LossWeightState, WeightConfig};
use crate::model::PromptedClassifier;
use crate::numcore::{RandomStream, RealVector};
use crate::par;
use serde::Serialize;
use std::fmt::Write as _;

/// Which inner maximizer generates the training perturbations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Evolutionary population attack; trains on the final selected block.
    ErApt,
    /// One PGD perturbation per example.
    SinglePgdBaseline,
}

impl TrainMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::ErApt => "er_apt",
            TrainMode::SinglePgdBaseline => "single_pgd_baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "er_apt" => Ok(TrainMode::ErApt),
            "single_pgd_baseline" => Ok(TrainMode::SinglePgdBaseline),
            other => Err(Error::config(
                "train.mode",
                format!("unknown mode `{other}` (er_apt | single_pgd_baseline)"),
            )),
        }
    }
}

/// Full training configuration.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub momentum: f64,
    pub warmup_epochs: usize,
    pub attack: AttackConfig,
    pub evolution: EvolutionConfig,
    pub ball: PerturbationBall,
    pub weights: WeightConfig,
    pub mode: TrainMode,
    pub seed: u64,
    /// Average the robust loss over the full final population instead of
    /// the selected third.
    pub average_full_population: bool,
    /// Use KL(adv || clean) instead of KL(clean || adv).
    pub kl_reversed: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.lr_init > 0.0 && self.lr_init.is_finite()) {
            return Err(Error::config("train.lr_init", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum", "must lie in [0, 1)"));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::config(
                "train.warmup_epochs",
                "must not exceed train.epochs",
            ));
        }
        self.attack.validate()?;
        self.evolution.validate()?;
        if let (Some(lo), Some(hi)) = (self.ball.input_lo, self.ball.input_hi) {
            if !(lo < hi) {
                return Err(Error::config("ball.input_lo", "must be below ball.input_hi"));
            }
        }
        self.weights.validate()?;
        Ok(())
    }
}

/// Warmup + cosine learning rate over global steps (0-based epoch/batch).
///
/// During the warmup epochs the rate ramps linearly from lr_init/100 toward
/// lr_init; afterwards it follows lr_init * (1 + cos(pi * progress)) / 2
/// with progress spanning the post-warmup steps, so the first post-warmup
/// step runs at exactly lr_init and the final step approaches zero.
pub fn cosine_lr(epoch: usize, batch: usize, batches_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let step = epoch * batches_per_epoch + batch;
    let warmup_steps = cfg.warmup_epochs * batches_per_epoch;
    let total_steps = cfg.epochs * batches_per_epoch;
    if step < warmup_steps {
        let lo = cfg.lr_init / 100.0;
        return lo + (cfg.lr_init - lo) * (step as f64 / warmup_steps as f64);
    }
    let span = (total_steps - warmup_steps).max(1);
    let progress = (step - warmup_steps) as f64 / span as f64;
    cfg.lr_init * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// SGD momentum buffer.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub velocity: RealVector,
    pub step_count: usize,
}

impl OptimizerState {
    pub fn new(dim: usize) -> Self {
        Self {
            velocity: RealVector::zeros(dim),
            step_count: 0,
        }
    }
}

/// v' = momentum * v + grad; prompt' = prompt - lr * v'.
pub fn sgd_step(
    prompt: &RealVector,
    grad: &RealVector,
    opt: &OptimizerState,
    lr: f64,
    momentum: f64,
) -> Result<(RealVector, OptimizerState)> {
    if grad.len() != prompt.len() {
        return Err(Error::DimMismatch {
            context: "sgd_step",
            left: grad.len(),
            right: prompt.len(),
        });
    }
    grad.validate_finite("sgd_step gradient")?;
    let mut velocity = opt.velocity.scale(momentum);
    velocity.add_scaled(1.0, grad);
    let mut next = prompt.clone();
    next.add_scaled(-lr, &velocity);
    Ok((
        next,
        OptimizerState {
            velocity,
            step_count: opt.step_count + 1,
        },
    ))
}

/// Per-epoch metrics row of the training report CSV.
#[derive(Clone, Debug, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub natural_acc: f64,
    pub robust_acc: f64,
    pub mean_ce: f64,
    pub mean_kl: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
}

/// Structured event-log entries (one JSON object per line).
#[derive(Clone, Debug, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TrainEvent {
    EpochStart {
        epoch: usize,
        lr: f64,
        alpha: f64,
        beta: f64,
    },
    WeightsUpdated {
        epoch: usize,
        w_acc: f64,
        w_rob: f64,
        alpha: f64,
        beta: f64,
    },
    EpochEnd {
        epoch: usize,
        natural_acc: f64,
        robust_acc: f64,
        mean_ce: f64,
        mean_kl: f64,
        lr: f64,
    },
}

/// Everything a finished run reports.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub weight_logs: Vec<EpochWeightLog>,
    pub events: Vec<TrainEvent>,
    pub final_frozen_checksum: u64,
    pub wall_time_secs: f64,
}

impl TrainReport {
    /// Fixed-column CSV, one row per epoch. Excludes wall time so reruns
    /// are byte-identical.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("epoch,natural_acc,robust_acc,mean_ce,mean_kl,alpha,beta,lr\n");
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.epoch, r.natural_acc, r.robust_acc, r.mean_ce, r.mean_kl, r.alpha, r.beta, r.lr
            );
        }
        out
    }

    /// Weight/speed CSV: epoch, w_acc, w_rob, alpha, beta.
    pub fn weights_csv(&self) -> String {
        let mut out = String::from("epoch,w_acc,w_rob,alpha,beta\n");
        for l in &self.weight_logs {
            let _ = writeln!(out, "{},{},{},{},{}", l.epoch, l.w_acc, l.w_rob, l.alpha, l.beta);
        }
        out
    }

    pub fn events_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            let _ = writeln!(out, "{}", serde_json::to_string(e).expect("event serialization"));
        }
        out
    }
}

struct ExampleOutcome {
    prompt_grad: RealVector,
    ce: f64,
    kl: f64,
    traces: Vec<IterationTrace>,
}

/// Batch-level aggregate returned by [`train_batch`].
pub struct BatchOutcome {
    /// Unweighted mean of per-example prompt gradients.
    pub prompt_grad: RealVector,
    pub ce_sum: f64,
    pub kl_sum: f64,
    pub count: usize,
    /// (example index, per-iteration traces) when tracing was requested.
    pub traces: Vec<(usize, Vec<IterationTrace>)>,
}

/// One batch: attack every example (population or single PGD), compute the
/// combined loss over the resulting delta set, and fold per-example
/// gradients in example order.
#[allow(clippy::too_many_arguments)]
pub fn train_batch(
    model: &PromptedClassifier,
    dataset: &LabeledDataset,
    batch_indices: &[usize],
    alpha: f64,
    beta: f64,
    cfg: &TrainConfig,
    batch_stream: &RandomStream,
    collect_traces: bool,
) -> Result<BatchOutcome> {
    if batch_indices.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    let outcomes: Vec<ExampleOutcome> = par::try_map_indexed(batch_indices, |_, &idx| {
        let x = dataset.input(idx);
        let y = dataset.label(idx);
        let mut stream = batch_stream.split(idx as u64);
        let mut traces = Vec::new();
        let deltas: Vec<RealVector> = match cfg.mode {
            TrainMode::ErApt => {
                let mut sink = collect_traces.then(Vec::new);
                let mut pop = run_evolution_population(
                    model,
                    x,
                    y,
                    &cfg.ball,
                    &cfg.evolution,
                    &mut stream,
                    sink.as_mut(),
                )?;
                if let Some(t) = sink.take() {
                    traces = t;
                }
                if cfg.average_full_population {
                    pop.deltas().to_vec()
                } else {
                    final_selected(&mut pop, model, x, y)?.deltas().to_vec()
                }
            }
            TrainMode::SinglePgdBaseline => {
                vec![pgd_attack(model, x, y, &cfg.ball, &cfg.attack, &mut stream)?]
            }
        };
        let out = combined_loss_with_grad(model, x, y, &deltas, alpha, beta, cfg.kl_reversed)?;
        Ok(ExampleOutcome {
            prompt_grad: out.prompt_grad,
            ce: out.ce,
            kl: out.kl_mean,
            traces,
        })
    })?;

    let mut grad = RealVector::zeros(model.prompt_dim());
    let mut ce_sum = 0.0;
    let mut kl_sum = 0.0;
    let mut traces = Vec::new();
    for (slot, o) in outcomes.into_iter().enumerate() {
        grad.add_scaled(1.0, &o.prompt_grad);
        ce_sum += o.ce;
        kl_sum += o.kl;
        if collect_traces && !o.traces.is_empty() {
            traces.push((batch_indices[slot], o.traces));
        }
    }
    let n = batch_indices.len() as f64;
    Ok(BatchOutcome {
        prompt_grad: grad.scale(1.0 / n),
        ce_sum,
        kl_sum,
        count: batch_indices.len(),
        traces,
    })
}

/// Run the full training loop. Deterministic given the config seed; the
/// report is identical at any worker count because per-example streams are
/// pre-split and reductions fold in example order.
pub fn run_training(
    model: &PromptedClassifier,
    cfg: &TrainConfig,
    dataset: &LabeledDataset,
) -> Result<(PromptedClassifier, TrainReport)> {
    run_training_traced(model, cfg, dataset, None)
}

/// As [`run_training`], optionally collecting per-example population traces.
pub fn run_training_traced(
    model: &PromptedClassifier,
    cfg: &TrainConfig,
    dataset: &LabeledDataset,
    mut trace_sink: Option<&mut Vec<(usize, Vec<IterationTrace>)>>,
) -> Result<(PromptedClassifier, TrainReport)> {
    cfg.validate()?;
    let start = std::time::Instant::now();
    let mut model = model.clone();
    let mut opt = OptimizerState::new(model.prompt_dim());
    let mut weights = LossWeightState::new(&cfg.weights)?;
    let root = RandomStream::new(cfg.seed);
    let n = dataset.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);

    let mut records = Vec::with_capacity(cfg.epochs);
    let mut weight_logs = Vec::with_capacity(cfg.epochs);
    let mut events = Vec::new();

    for epoch in 0..cfg.epochs {
        let epoch_stream = root.split_str("train").split(epoch as u64);
        let first_lr = cosine_lr(epoch, 0, batches_per_epoch, cfg);
        events.push(TrainEvent::EpochStart {
            epoch: epoch + 1,
            lr: first_lr,
            alpha: weights.alpha(),
            beta: weights.beta(),
        });
        let mut last_lr = first_lr;
        for batch in 0..batches_per_epoch {
            let lo = batch * cfg.batch_size;
            let hi = (lo + cfg.batch_size).min(n);
            let indices: Vec<usize> = (lo..hi).collect();
            let batch_stream = epoch_stream.split(batch as u64);
            let outcome = train_batch(
                &model,
                dataset,
                &indices,
                weights.alpha(),
                weights.beta(),
                cfg,
                &batch_stream,
                trace_sink.is_some(),
            )?;
            if let Some(sink) = trace_sink.as_deref_mut() {
                sink.extend(outcome.traces);
            }
            weights.accumulate(outcome.ce_sum, outcome.kl_sum, outcome.count);
            let lr = cosine_lr(epoch, batch, batches_per_epoch, cfg);
            last_lr = lr;
            let (next_prompt, next_opt) =
                sgd_step(model.prompt(), &outcome.prompt_grad, &opt, lr, cfg.momentum)?;
            model.set_prompt(next_prompt)?;
            opt = next_opt;
        }

        let (mean_ce, mean_kl) = weights.pending_means()?;
        let eval_stream = root.split_str("eval").split(epoch as u64);
        let natural = evaluation::accuracy(&model, dataset)?;
        let robust =
            evaluation::robust_accuracy(&model, dataset, &cfg.ball, &cfg.attack, &eval_stream)?;
        let (alpha_used, beta_used) = (weights.alpha(), weights.beta());
        let log = weights.epoch_weighting()?;
        weight_logs.push(log);
        events.push(TrainEvent::WeightsUpdated {
            epoch: log.epoch,
            w_acc: log.w_acc,
            w_rob: log.w_rob,
            alpha: log.alpha,
            beta: log.beta,
        });
        records.push(EpochRecord {
            epoch: epoch + 1,
            natural_acc: natural,
            robust_acc: robust,
            mean_ce,
            mean_kl,
            alpha: alpha_used,
            beta: beta_used,
            lr: last_lr,
        });
        events.push(TrainEvent::EpochEnd {
            epoch: epoch + 1,
            natural_acc: natural,
            robust_acc: robust,
            mean_ce,
            mean_kl,
            lr: last_lr,
        });
    }

    let report = TrainReport {
        epochs: records,
        weight_logs,
        events,
        final_frozen_checksum: model.frozen_checksum(),
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}
