//! Dense arithmetic, stable nonlinearities and reverse-mode differentiation.

pub mod gradcheck;
pub mod tape;
pub mod tensor;

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, grad_check_with, GradCheckReport};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{dot, Tensor2};

/// Floor applied to every logarithm argument. Keeps `ln p` and `ln(1 - p)`
/// finite when a probability saturates at 0 or 1.
pub const LOG_FLOOR: f64 = 1e-12;

/// Softmax via max subtraction.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::InvalidArgument("softmax of an empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln` with the argument floored at [`LOG_FLOOR`].
pub fn ln_floor(x: f64) -> f64 {
    x.max(LOG_FLOOR).ln()
}

/// `p ln p` with `0 ln 0 = 0`.
pub fn xlogx(p: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else {
        p * ln_floor(p)
    }
}

/// Entropy of a Bernoulli(p) variable in nats.
pub fn binary_entropy(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "binary_entropy expects p in [0, 1], got {p}"
        )));
    }
    Ok(-(xlogx(p) + xlogx(1.0 - p)))
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = l2_norm(v);
    if !n.is_finite() {
        return Err(Error::NonFinite("l2_normalize input".into()));
    }
    if n == 0.0 {
        return Err(Error::InvalidArgument(
            "cannot normalize a zero vector".into(),
        ));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[1f64.ln(), 3f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        assert!(softmax(&[]).is_err());
        // large logits stay finite thanks to max subtraction
        let p = softmax(&[1000.0, 999.0]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn binary_entropy_examples() {
        assert_eq!(binary_entropy(0.0).unwrap(), 0.0);
        assert_eq!(binary_entropy(1.0).unwrap(), 0.0);
        assert!((binary_entropy(0.5).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(binary_entropy(-0.1).is_err());
        assert!(binary_entropy(1.1).is_err());
    }

    #[test]
    fn binary_entropy_peaks_at_half() {
        let best = (0..=10_000)
            .map(|i| i as f64 / 10_000.0)
            .max_by(|a, b| {
                binary_entropy(*a)
                    .unwrap()
                    .partial_cmp(&binary_entropy(*b).unwrap())
                    .unwrap()
            })
            .unwrap();
        assert_eq!(best, 0.5);
    }

    #[test]
    fn l2_normalize_examples() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&[0.0, 1.0]).unwrap(), vec![0.0, 1.0]);
        assert!(l2_normalize(&[0.0, 0.0]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            v in prop::collection::vec(-30.0f64..30.0, 1..12),
            c in -50.0f64..50.0,
        ) {
            let p = softmax(&v).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            // order preserving
            for i in 0..v.len() {
                for j in 0..v.len() {
                    if v[i] > v[j] {
                        prop_assert!(p[i] >= p[j]);
                    }
                }
            }
        }

        #[test]
        fn binary_entropy_symmetric_and_bounded(p in 0.0f64..=1.0) {
            let h = binary_entropy(p).unwrap();
            prop_assert!((0.0..=2f64.ln() + 1e-15).contains(&h));
            prop_assert!((h - binary_entropy(1.0 - p).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn l2_normalize_scale_invariant(
            v in prop::collection::vec(-10.0f64..10.0, 2..8),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(l2_norm(&v) > 1e-6);
            let a = l2_normalize(&v).unwrap();
            prop_assert!((l2_norm(&a) - 1.0).abs() < 1e-9);
            let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
            let b = l2_normalize(&scaled).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
