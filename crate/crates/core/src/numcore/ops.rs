//! Elementary differentiable functions shared by the model and losses.

use crate::error::{Error, Result};
use crate::numcore::vector::RealVector;

/// Floor applied inside logarithms so cross-entropy and KL stay finite when
/// a probability underflows to zero.
pub const PROB_FLOOR: f64 = 1e-12;

/// Numerically stable softmax (max-subtraction before exponentiation).
pub fn softmax(logits: &RealVector) -> Result<RealVector> {
    if logits.is_empty() {
        return Err(Error::EmptyInput("softmax"));
    }
    logits.validate_finite("softmax input")?;
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    RealVector::from_vec(exps.into_iter().map(|e| e / sum).collect())
}

/// Cross-entropy -log p[label], with the probability floored at
/// [`PROB_FLOOR`].
pub fn cross_entropy(probs: &RealVector, label: usize) -> Result<f64> {
    if label >= probs.len() {
        return Err(Error::IndexOutOfRange {
            index: label,
            len: probs.len(),
        });
    }
    Ok(-probs[label].max(PROB_FLOOR).ln())
}

/// KL(p || q) = sum_i p_i (ln p_i - ln q_i), with both probabilities
/// floored inside the logs. Zero-mass terms contribute exactly zero.
pub fn kl_divergence(p: &RealVector, q: &RealVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimMismatch {
            context: "kl_divergence",
            left: p.len(),
            right: q.len(),
        });
    }
    let mut sum = 0.0;
    for (&pi, &qi) in p.iter().zip(q.iter()) {
        if pi > 0.0 {
            sum += pi * (pi.max(PROB_FLOOR).ln() - qi.max(PROB_FLOOR).ln());
        }
    }
    Ok(sum)
}

/// Cosine similarity a.b / (|a||b|), clamped to [-1, 1].
pub fn cosine_similarity(a: &RealVector, b: &RealVector) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            context: "cosine_similarity",
            left: a.len(),
            right: b.len(),
        });
    }
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm("cosine_similarity"));
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Central-difference gradient oracle: ((f(x + h e_i) - f(x - h e_i)) / 2h)_i.
///
/// Independent of every analytic gradient in this crate; used to check them.
pub fn finite_diff_gradient<F>(mut f: F, at: &RealVector, h: f64) -> Result<RealVector>
where
    F: FnMut(&RealVector) -> Result<f64>,
{
    let mut grad = vec![0.0; at.len()];
    let mut probe = at.clone();
    for i in 0..at.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe)?;
        probe[i] = orig - h;
        let fm = f(&probe)?;
        probe[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite("finite_diff_gradient evaluation"));
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    RealVector::from_vec(grad)
}

/// Relative error between two gradient vectors:
/// |a - b|_inf / max(|a|_inf, |b|_inf, 1e-8). Comparing at the vector level
/// keeps near-zero components from drowning the check in rounding noise.
pub fn max_relative_error(a: &RealVector, b: &RealVector) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.sub(b).linf_norm();
    diff / a.linf_norm().max(b.linf_norm()).max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vecf(v: &[f64]) -> RealVector {
        RealVector::from_vec(v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_symmetry() {
        let p = softmax(&vecf(&[0.0, 0.0])).unwrap();
        assert_eq!(p.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_no_overflow() {
        let p = softmax(&vecf(&[1000.0, 0.0])).unwrap();
        assert!(p[0] > 1.0 - 1e-12 && p[1] < 1e-12);
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_matches_direct_formula() {
        // Frozen from extended-precision evaluation of exp(x_i)/sum exp(x_j)
        // at [1, 2, 3].
        let p = softmax(&vecf(&[1.0, 2.0, 3.0])).unwrap();
        let expect = [
            0.09003057317038046,
            0.24472847105479764,
            0.6652409557748219,
        ];
        for (a, e) in p.iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-15, "{a} vs {e}");
        }
    }

    #[test]
    fn softmax_rejects_empty() {
        assert!(softmax(&RealVector::zeros(0)).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        // one-hot at the label
        assert_eq!(cross_entropy(&vecf(&[0.0, 1.0]), 1).unwrap(), 0.0);
        // uniform over 4 classes -> ln 4
        let u = vecf(&[0.25; 4]);
        assert!((cross_entropy(&u, 2).unwrap() - 1.3862943611198906).abs() < 1e-15);
        // floored zero probability -> -ln(1e-12)
        let z = vecf(&[1.0, 0.0]);
        assert!((cross_entropy(&z, 1).unwrap() - 27.631021115928547).abs() < 1e-12);
        // label out of range
        assert!(cross_entropy(&z, 2).is_err());
    }

    #[test]
    fn kl_cases() {
        let p = vecf(&[1.0, 0.0]);
        let q = vecf(&[0.5, 0.5]);
        assert!((kl_divergence(&p, &q).unwrap() - 0.6931471805599453).abs() < 1e-15);
        let a = vecf(&[0.9, 0.1]);
        let b = vecf(&[0.1, 0.9]);
        assert!((kl_divergence(&a, &b).unwrap() - 1.7577796618689756).abs() < 1e-14);
        assert_eq!(kl_divergence(&a, &a).unwrap(), 0.0);
        assert!(kl_divergence(&a, &vecf(&[1.0])).is_err());
    }

    #[test]
    fn cosine_cases() {
        let a = vecf(&[3.0, -1.0, 2.0]);
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        let e1 = vecf(&[1.0, 0.0]);
        let e2 = vecf(&[0.0, 1.0]);
        assert_eq!(cosine_similarity(&e1, &e2).unwrap(), 0.0);
        let d = vecf(&[1.0, 1.0]);
        assert!((cosine_similarity(&d, &e1).unwrap() - 0.7071067811865476).abs() < 1e-15);
        assert!(cosine_similarity(&RealVector::zeros(2), &e1).is_err());
    }

    #[test]
    fn finite_diff_known_gradients() {
        // f(x) = |x|^2 at [1, 2] -> [2, 4]
        let g = finite_diff_gradient(|x| Ok(x.dot(x)), &vecf(&[1.0, 2.0]), 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);
        // constant f -> zero vector
        let g0 = finite_diff_gradient(|_| Ok(3.5), &vecf(&[1.0, -1.0, 0.5]), 1e-5).unwrap();
        assert!(g0.iter().all(|&v| v == 0.0));
        // f(x) = x0*x1 at [3, 5] -> [5, 3]
        let gp = finite_diff_gradient(|x| Ok(x[0] * x[1]), &vecf(&[3.0, 5.0]), 1e-5).unwrap();
        assert!((gp[0] - 5.0).abs() < 1e-8 && (gp[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn finite_diff_rejects_non_finite() {
        let r = finite_diff_gradient(|_| Ok(f64::NAN), &vecf(&[1.0]), 1e-5);
        assert!(r.is_err());
    }
}
