//! Evolutionary region adversarial prompt tuning at desk scale.
//!
//! A small frozen-backbone classifier is hardened against L-infinity
//! perturbations by evolving a per-example population of adversarial
//! examples (PGD step, fitness selection, mutation, crossover) and training
//! the prompt on the selected survivors under a dynamically reweighted
//! clean/robust objective. Includes PGD baselines, robustness evaluation,
//! and a numerical verifier for the population-coverage loss bound.

pub mod attack;
pub mod dataio;
pub mod error;
pub mod evaluation;
pub mod evolution;
pub mod losses;
pub mod model;
pub mod numcore;
pub mod par;
pub mod trainer;

pub use error::{Error, Result};
