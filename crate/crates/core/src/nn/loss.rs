//! Softmax, cross-entropy and entropy. Logs are natural and probabilities
//! are clamped to `[PROB_FLOOR, 1]` inside every log.

use crate::error::{Error, Result};
use crate::nn::math::Real;

pub const PROB_FLOOR: f64 = 1e-12;

/// A probability vector: entries in `[0, 1]` summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Wraps raw probabilities, validating the simplex constraint to 1e-6.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidArgument("empty probability vector".into()));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument(format!(
                "probabilities outside [0, 1]: {probs:?}"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        Ok(ProbVector(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn clamped_ln<T: Real>(p: T) -> T {
    if p.value() < PROB_FLOOR {
        T::cst(PROB_FLOOR.ln())
    } else if p.value() > 1.0 {
        T::cst(0.0)
    } else {
        p.ln()
    }
}

pub(crate) fn softmax_generic<T: Real>(logits: &[T]) -> Vec<T> {
    let mut m = logits[0];
    for &z in &logits[1..] {
        if z.value() > m.value() {
            m = z;
        }
    }
    let exps: Vec<T> = logits.iter().map(|&z| (z - m).exp()).collect();
    let mut total = T::cst(0.0);
    for &e in &exps {
        total += e;
    }
    exps.into_iter().map(|e| e / total).collect()
}

pub(crate) fn entropy_generic<T: Real>(p: &[T]) -> T {
    let mut h = T::cst(0.0);
    for &pi in p {
        if pi.value() > 0.0 {
            h += -(pi * clamped_ln(pi));
        }
    }
    h
}

/// dH/dz for H = entropy(softmax(z)): `-p_k (ln p_k + H)`.
pub(crate) fn entropy_logit_grad_generic<T: Real>(p: &[T], h: T) -> Vec<T> {
    p.iter()
        .map(|&pk| {
            if pk.value() > 0.0 {
                -(pk * (clamped_ln(pk) + h))
            } else {
                T::cst(0.0)
            }
        })
        .collect()
}

/// Max-subtracted softmax computed in `f64`.
pub fn softmax(logits: &[f32]) -> Result<ProbVector> {
    if logits.is_empty() {
        return Err(Error::InvalidArgument("softmax of an empty vector".into()));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite("softmax input"));
    }
    let z: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
    Ok(ProbVector(softmax_generic(&z)))
}

/// `-ln p_y` with `p_y` clamped away from zero.
pub fn cross_entropy(probs: &ProbVector, label: usize) -> Result<f64> {
    let p = probs.0.get(label).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            probs.len()
        ))
    })?;
    Ok(-clamped_ln(*p))
}

/// `Σ -p ln p` with `0 ln 0 = 0`.
pub fn entropy(probs: &ProbVector) -> f64 {
    entropy_generic(&probs.0)
}

/// Gradient of `cross_entropy(softmax(z), y)` with respect to `z`.
pub fn cross_entropy_logit_grad(probs: &ProbVector, label: usize) -> Vec<f64> {
    let mut g = probs.0.clone();
    g[label] -= 1.0;
    g
}

/// Gradient of `entropy(softmax(z))` with respect to `z`.
pub fn entropy_logit_grad(probs: &ProbVector) -> Vec<f64> {
    entropy_logit_grad_generic(&probs.0, entropy(probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for &v in p.probs() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let p = softmax(&[1f32.ln(), 2f32.ln(), 3f32.ln()]).unwrap();
        for (v, e) in p.probs().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((v - e).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = softmax(&[0.3, -1.2]).unwrap();
        let b = softmax(&[100.3, 98.8]).unwrap();
        for (x, y) in a.probs().iter().zip(b.probs()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let onehot = ProbVector::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(cross_entropy(&onehot, 1).unwrap(), 0.0);
        let uniform = ProbVector::new(vec![0.2; 5]).unwrap();
        assert!((cross_entropy(&uniform, 3).unwrap() - 5f64.ln()).abs() < 1e-12);
        let half = ProbVector::new(vec![0.5, 0.5]).unwrap();
        assert!((cross_entropy(&half, 0).unwrap() - std::f64::consts::LN_2).abs() < 1e-8);
        assert!(cross_entropy(&half, 2).is_err());
    }

    #[test]
    fn cross_entropy_of_zero_probability_is_clamped() {
        let p = ProbVector::new(vec![1.0, 0.0]).unwrap();
        let ce = cross_entropy(&p, 1).unwrap();
        assert!(ce.is_finite());
        assert!((ce - 1e12f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&ProbVector::new(vec![0.0, 1.0]).unwrap()), 0.0);
        let u = ProbVector::new(vec![0.25; 4]).unwrap();
        assert!((entropy(&u) - 4f64.ln()).abs() < 1e-12);
        let p = ProbVector::new(vec![0.9, 0.1]).unwrap();
        assert!((entropy(&p) - 0.325_082_96).abs() < 1e-7);
    }

    #[test]
    fn entropy_grad_matches_finite_differences() {
        let z = [0.4f64, -1.3, 2.2, 0.05];
        let h = |z: &[f64]| entropy_generic(&softmax_generic(z));
        let p = softmax_generic(&z);
        let g = entropy_logit_grad_generic(&p, entropy_generic(&p));
        for k in 0..4 {
            let mut zp = z;
            let mut zm = z;
            zp[k] += 1e-6;
            zm[k] -= 1e-6;
            let fd = (h(&zp) - h(&zm)) / 2e-6;
            assert!((g[k] - fd).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn softmax_is_a_prob_vector(logits in prop::collection::vec(-1.0e4f32..1.0e4, 1..12)) {
            let p = softmax(&logits).unwrap();
            prop_assert!(ProbVector::new(p.probs().to_vec()).is_ok());
        }

        #[test]
        fn entropy_is_bounded(logits in prop::collection::vec(-30.0f32..30.0, 1..12)) {
            let p = softmax(&logits).unwrap();
            let h = entropy(&p);
            prop_assert!(h >= 0.0);
            prop_assert!(h <= (p.len() as f64).ln() + 1e-12);
        }
    }
}
