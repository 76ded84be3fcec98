//! Dense vector/matrix arithmetic, elementary differentiable functions,
//! a finite-difference gradient oracle, and deterministic splittable
//! random streams.

pub mod ops;
pub mod rng;
pub mod vector;

pub use ops::{
    cosine_similarity, cross_entropy, finite_diff_gradient, kl_divergence, max_relative_error,
    softmax, PROB_FLOOR,
};
pub use rng::{fnv1a64, RandomStream};
pub use vector::{RealMatrix, RealVector};
