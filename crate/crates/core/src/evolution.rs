//! Per-example population lifecycle for the evolutionary attack:
//! PGD step on every member, fitness ranking, top-third selection, mutation,
//! convex crossover, and the selected/mutated/crossover union that forms the
//! next generation. The final selected block feeds prompt tuning.

use crate::attack::{pgd_step, PerturbationBall};
use crate::error::{Error, Result};
use crate::model::PromptedClassifier;
use crate::numcore::{RandomStream, RealVector};
use serde::Serialize;

/// Evolutionary attack parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvolutionConfig {
    /// Population size N; must be divisible by 3 with N/3 >= 2.
    pub population: usize,
    /// Mutation intensity phi in [0, 1]: noise is uniform in
    /// [-phi*epsilon, phi*epsilon].
    pub phi: f64,
    /// Number of evolve iterations (the attack phase length).
    pub iterations: usize,
    /// Sign-step magnitude for the per-member PGD step.
    pub step_size: f64,
    /// Start every member at zero instead of uniform in the ball. Off by
    /// default; used to reduce the method to the single-PGD baseline.
    pub zero_init: bool,
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population % 3 != 0 || self.population / 3 < 2 {
            return Err(Error::config(
                "evolution.N",
                format!(
                    "population size {} must be divisible by 3 with N/3 >= 2",
                    self.population
                ),
            ));
        }
        if !(self.phi >= 0.0 && self.phi <= 1.0) {
            return Err(Error::config("evolution.phi", "must lie in [0, 1]"));
        }
        if self.iterations < 1 {
            return Err(Error::config("evolution.iterations", "must be at least 1"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::config("evolution.step_size", "must be positive"));
        }
        Ok(())
    }
}

/// Where a population member came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockTag {
    Initial,
    Selected,
    Mutated,
    Crossover,
}

/// One generation's evaluated fitness plus member provenance, for the
/// line-delimited trace dump.
#[derive(Clone, Debug, Serialize)]
pub struct IterationTrace {
    pub iteration: usize,
    pub fitness: Vec<f64>,
    pub blocks: Vec<BlockTag>,
}

/// A set of perturbations for one example, with a cached fitness ranking.
#[derive(Clone, Debug)]
pub struct Population {
    deltas: Vec<RealVector>,
    fitness: Option<Vec<f64>>,
    blocks: Vec<BlockTag>,
    ball: PerturbationBall,
}

impl Population {
    /// N i.i.d. uniform members inside the ball (or zeros under
    /// `zero_init`), fitness stale.
    pub fn init(
        cfg: &EvolutionConfig,
        ball: &PerturbationBall,
        dim: usize,
        stream: &mut RandomStream,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut deltas = Vec::with_capacity(cfg.population);
        for _ in 0..cfg.population {
            if cfg.zero_init {
                deltas.push(RealVector::zeros(dim));
            } else {
                deltas.push(stream.uniform_vector(dim, -ball.epsilon, ball.epsilon)?);
            }
        }
        Ok(Self {
            deltas,
            fitness: None,
            blocks: vec![BlockTag::Initial; cfg.population],
            ball: *ball,
        })
    }

    pub fn from_deltas(deltas: Vec<RealVector>, ball: &PerturbationBall) -> Result<Self> {
        for d in &deltas {
            if !ball.contains(d, 1e-12) {
                return Err(Error::config(
                    "population",
                    "member outside the perturbation ball",
                ));
            }
        }
        let blocks = vec![BlockTag::Initial; deltas.len()];
        Ok(Self {
            deltas,
            fitness: None,
            blocks,
            ball: *ball,
        })
    }

    pub fn size(&self) -> usize {
        self.deltas.len()
    }

    pub fn deltas(&self) -> &[RealVector] {
        &self.deltas
    }

    pub fn blocks(&self) -> &[BlockTag] {
        &self.blocks
    }

    pub fn ball(&self) -> &PerturbationBall {
        &self.ball
    }

    /// Cached fitness values, if fresh.
    pub fn fitness(&self) -> Option<&[f64]> {
        self.fitness.as_deref()
    }

    /// Fitness of member i is the adversarial cross-entropy
    /// CE(f(x + delta_i), y). Marks the cache fresh.
    pub fn evaluate_fitness(
        &mut self,
        model: &PromptedClassifier,
        x: &RealVector,
        y: usize,
    ) -> Result<()> {
        let mut fit = Vec::with_capacity(self.deltas.len());
        for d in &self.deltas {
            fit.push(model.loss_ce(&x.add(d), y)?);
        }
        self.fitness = Some(fit);
        Ok(())
    }

    /// Top N/3 members by descending fitness; ties broken by smaller
    /// original index (stable sort). Errors if the cache is stale.
    pub fn select_top_third(&self) -> Result<Population> {
        let fitness = self.fitness.as_ref().ok_or(Error::StaleFitness)?;
        let keep = self.deltas.len() / 3;
        let order = rank_descending(fitness);
        let chosen = &order[..keep];
        Ok(Population {
            deltas: chosen.iter().map(|&i| self.deltas[i].clone()).collect(),
            fitness: Some(chosen.iter().map(|&i| fitness[i]).collect()),
            blocks: vec![BlockTag::Selected; keep],
            ball: self.ball,
        })
    }

    /// Add one fresh uniform noise vector in [-phi*eps, phi*eps] per member
    /// (drawn in member order) and project back onto the ball.
    pub fn mutate(&self, phi: f64, stream: &mut RandomStream) -> Result<Population> {
        let eps = self.ball.epsilon;
        let mut deltas = Vec::with_capacity(self.deltas.len());
        for d in &self.deltas {
            let noise = stream.uniform_vector(d.len(), -phi * eps, phi * eps)?;
            deltas.push(self.ball.project(&d.add(&noise)));
        }
        Ok(Population {
            deltas,
            fitness: None,
            blocks: vec![BlockTag::Mutated; self.deltas.len()],
            ball: self.ball,
        })
    }

    /// One child per parent slot: draw an unordered pair of distinct parent
    /// indices uniformly, then lambda ~ U(0,1), then combine. Draw order is
    /// fixed (pair before lambda, child by child) for determinism.
    pub fn crossover(&self, stream: &mut RandomStream) -> Result<Population> {
        let n = self.deltas.len();
        if n < 2 {
            return Err(Error::config(
                "evolution.N",
                "crossover needs at least 2 parents",
            ));
        }
        let mut deltas = Vec::with_capacity(n);
        for _ in 0..n {
            let p1 = stream.next_below(n as u64) as usize;
            let mut p2 = stream.next_below(n as u64 - 1) as usize;
            if p2 >= p1 {
                p2 += 1;
            }
            let lambda = stream.next_f64();
            let child = convex_combine(&self.deltas[p1], &self.deltas[p2], lambda);
            deltas.push(self.ball.project(&child));
        }
        Ok(Population {
            deltas,
            fitness: None,
            blocks: vec![BlockTag::Crossover; n],
            ball: self.ball,
        })
    }
}

/// lambda * a + (1 - lambda) * b. Exact at the endpoints and exact when the
/// parents are bit-identical, so a degenerate population stays bit-stable.
pub(crate) fn convex_combine(a: &RealVector, b: &RealVector, lambda: f64) -> RealVector {
    if a == b {
        return a.clone();
    }
    let mut out = a.scale(lambda);
    out.add_scaled(1.0 - lambda, b);
    out
}

/// Indices sorted by descending fitness; stability gives smaller-original-
/// index tie-breaking.
fn rank_descending(fitness: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..fitness.len()).collect();
    order.sort_by(|&a, &b| fitness[b].total_cmp(&fitness[a]));
    order
}

/// One full generation: PGD-step every member, evaluate fitness, keep the
/// top third, then rebuild the population as selected | mutated | crossover
/// in that member order. Fitness of the result is stale.
pub fn evolve_iteration(
    pop: &Population,
    model: &PromptedClassifier,
    x: &RealVector,
    y: usize,
    cfg: &EvolutionConfig,
    stream: &mut RandomStream,
) -> Result<Population> {
    let mut stepped = Vec::with_capacity(pop.size());
    for d in &pop.deltas {
        stepped.push(pgd_step(model, x, y, d, &pop.ball, cfg.step_size)?);
    }
    let mut post = Population {
        deltas: stepped,
        fitness: None,
        blocks: pop.blocks.clone(),
        ball: pop.ball,
    };
    post.evaluate_fitness(model, x, y)?;
    let selected = post.select_top_third()?;
    let mutated = selected.mutate(cfg.phi, stream)?;
    let crossed = selected.crossover(stream)?;

    let mut deltas = Vec::with_capacity(pop.size());
    let mut blocks = Vec::with_capacity(pop.size());
    for (src, tag) in [
        (&selected, BlockTag::Selected),
        (&mutated, BlockTag::Mutated),
        (&crossed, BlockTag::Crossover),
    ] {
        deltas.extend(src.deltas.iter().cloned());
        blocks.extend(std::iter::repeat(tag).take(src.size()));
    }
    Ok(Population {
        deltas,
        fitness: None,
        blocks,
        ball: pop.ball,
    })
}

/// Variant of [`evolve_iteration`] that also reports the evaluated
/// post-PGD fitness and provenance for tracing.
pub fn evolve_iteration_traced(
    pop: &Population,
    model: &PromptedClassifier,
    x: &RealVector,
    y: usize,
    cfg: &EvolutionConfig,
    stream: &mut RandomStream,
    iteration: usize,
) -> Result<(Population, IterationTrace)> {
    let mut stepped = Vec::with_capacity(pop.size());
    for d in &pop.deltas {
        stepped.push(pgd_step(model, x, y, d, &pop.ball, cfg.step_size)?);
    }
    let mut post = Population {
        deltas: stepped,
        fitness: None,
        blocks: pop.blocks.clone(),
        ball: pop.ball,
    };
    post.evaluate_fitness(model, x, y)?;
    let trace = IterationTrace {
        iteration,
        fitness: post.fitness.clone().unwrap_or_default(),
        blocks: post.blocks.clone(),
    };
    let selected = post.select_top_third()?;
    let mutated = selected.mutate(cfg.phi, stream)?;
    let crossed = selected.crossover(stream)?;
    let mut deltas = Vec::with_capacity(pop.size());
    let mut blocks = Vec::with_capacity(pop.size());
    for (src, tag) in [
        (&selected, BlockTag::Selected),
        (&mutated, BlockTag::Mutated),
        (&crossed, BlockTag::Crossover),
    ] {
        deltas.extend(src.deltas.iter().cloned());
        blocks.extend(std::iter::repeat(tag).take(src.size()));
    }
    Ok((
        Population {
            deltas,
            fitness: None,
            blocks,
            ball: pop.ball,
        },
        trace,
    ))
}

/// Final-generation selection: evaluate fitness, keep the top third. The
/// returned block is what prompt tuning trains on.
pub fn final_selected(
    pop: &mut Population,
    model: &PromptedClassifier,
    x: &RealVector,
    y: usize,
) -> Result<Population> {
    pop.evaluate_fitness(model, x, y)?;
    pop.select_top_third()
}

/// Attack phase without the final selection: init plus `iterations`
/// generations, returning the full N-member population (fitness stale).
/// Appends one trace record per generation when a sink is provided.
pub fn run_evolution_population(
    model: &PromptedClassifier,
    x: &RealVector,
    y: usize,
    ball: &PerturbationBall,
    cfg: &EvolutionConfig,
    stream: &mut RandomStream,
    mut trace: Option<&mut Vec<IterationTrace>>,
) -> Result<Population> {
    let mut pop = Population::init(cfg, ball, x.len(), stream)?;
    for it in 0..cfg.iterations {
        match trace.as_deref_mut() {
            Some(sink) => {
                let (next, rec) = evolve_iteration_traced(&pop, model, x, y, cfg, stream, it)?;
                sink.push(rec);
                pop = next;
            }
            None => {
                pop = evolve_iteration(&pop, model, x, y, cfg, stream)?;
            }
        }
    }
    Ok(pop)
}

/// Full attack phase: init, `iterations` generations, final selection.
pub fn run_evolution(
    model: &PromptedClassifier,
    x: &RealVector,
    y: usize,
    ball: &PerturbationBall,
    cfg: &EvolutionConfig,
    stream: &mut RandomStream,
    trace: Option<&mut Vec<IterationTrace>>,
) -> Result<Population> {
    let mut pop = run_evolution_population(model, x, y, ball, cfg, stream, trace)?;
    final_selected(&mut pop, model, x, y)
}
