//! Prediction with unknown rejection and H-score evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::math::{Tensor2, LOG_FLOOR};
use crate::model::ModelParams;
use crate::par::{self, ExecMode};

/// Decision threshold on the in-lier probability of the predicted class.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Prediction {
    Known(usize),
    Unknown,
}

/// How UNK aggregates over target-private samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum UnkMode {
    /// fraction of all target-private samples rejected
    #[default]
    Pooled,
    /// mean over target-private classes of their rejection rate
    PerClass,
}

impl fmt::Display for UnkMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UnkMode::Pooled => "pooled",
            UnkMode::PerClass => "per_class",
        })
    }
}

impl FromStr for UnkMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "pooled" => Ok(UnkMode::Pooled),
            "per_class" => Ok(UnkMode::PerClass),
            other => Err(Error::InvalidArgument(format!(
                "unk mode '{other}' is neither 'pooled' nor 'per_class'"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    /// mean per-class accuracy over shared classes present in the data
    pub os_star: f64,
    /// rejection accuracy on target-private samples
    pub unk: f64,
    pub hsc: f64,
    /// shared class id → accuracy
    pub per_class: BTreeMap<usize, f64>,
    pub reject_threshold: f64,
    pub n_known: usize,
    pub n_unknown: usize,
}

/// `2ab / (a + b)`, or 0 when `a + b = 0`.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b > 0.0 {
        2.0 * a * b / (a + b)
    } else {
        0.0
    }
}

/// Argmax of the closed-set row (lowest index on ties); rejected when the
/// matching open-set score, clamped to `[1e-12, 1 - 1e-12]`, is below
/// `threshold`.
pub fn decide(p_c: &[f64], p_o: &[f64], threshold: f64) -> Prediction {
    let mut best = 0;
    for (k, &p) in p_c.iter().enumerate() {
        if p > p_c[best] {
            best = k;
        }
    }
    let score = p_o[best].clamp(LOG_FLOOR, 1.0 - LOG_FLOOR);
    if score < threshold {
        Prediction::Unknown
    } else {
        Prediction::Known(best)
    }
}

/// Closed/open probabilities for every row, computed in row chunks.
pub fn probabilities(
    params: &ModelParams,
    x: &Tensor2,
    mode: ExecMode,
) -> Result<(Tensor2, Tensor2)> {
    const CHUNK: usize = 64;
    let starts: Vec<usize> = (0..x.rows()).step_by(CHUNK).collect();
    let parts = par::try_map(mode, &starts, |&s| {
        let idx: Vec<usize> = (s..(s + CHUNK).min(x.rows())).collect();
        let out = params.forward(&x.select_rows(&idx))?;
        Ok((out.p_c, out.p_o))
    })?;
    let pcs: Vec<&Tensor2> = parts.iter().map(|(c, _)| c).collect();
    let pos: Vec<&Tensor2> = parts.iter().map(|(_, o)| o).collect();
    if parts.is_empty() {
        let k = params.num_classes();
        return Ok((Tensor2::zeros(0, k), Tensor2::zeros(0, k)));
    }
    Ok((Tensor2::vstack(&pcs)?, Tensor2::vstack(&pos)?))
}

fn decide_all(p_c: &Tensor2, p_o: &Tensor2, threshold: f64) -> Vec<Prediction> {
    p_c.iter_rows()
        .zip(p_o.iter_rows())
        .map(|(c, o)| decide(c, o, threshold))
        .collect()
}

pub fn predict(params: &ModelParams, x: &Tensor2, threshold: f64) -> Result<Vec<Prediction>> {
    predict_with(params, x, threshold, ExecMode::default())
}

pub fn predict_with(
    params: &ModelParams,
    x: &Tensor2,
    threshold: f64,
    mode: ExecMode,
) -> Result<Vec<Prediction>> {
    let (p_c, p_o) = probabilities(params, x, mode)?;
    Ok(decide_all(&p_c, &p_o, threshold))
}

/// OS*, UNK and H-score. Ground-truth ids outside `shared` are unknown; shared
/// classes absent from `truth` are excluded from OS* (and logged). When one
/// side has no samples its accuracy is reported as 0.
pub fn h_score(
    predictions: &[Prediction],
    truth: &[usize],
    shared: &BTreeSet<usize>,
    threshold: f64,
    unk_mode: UnkMode,
) -> Result<EvalResult> {
    if predictions.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truth.len()
        )));
    }
    // class id → (correct, total)
    let mut known: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut unknown: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&pred, &y) in predictions.iter().zip(truth) {
        if shared.contains(&y) {
            let e = known.entry(y).or_default();
            e.0 += usize::from(pred == Prediction::Known(y));
            e.1 += 1;
        } else {
            let e = unknown.entry(y).or_default();
            e.0 += usize::from(pred == Prediction::Unknown);
            e.1 += 1;
        }
    }
    let n_known: usize = known.values().map(|c| c.1).sum();
    let n_unknown: usize = unknown.values().map(|c| c.1).sum();
    if n_known == 0 && n_unknown == 0 {
        return Err(Error::EmptyEvaluation);
    }
    for c in shared.iter().filter(|c| !known.contains_key(c)) {
        log::info!("shared class {c} has no target samples; excluded from OS*");
    }

    let per_class: BTreeMap<usize, f64> = known
        .iter()
        .map(|(&c, &(ok, n))| (c, ok as f64 / n as f64))
        .collect();
    let os_star = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    let unk = match (n_unknown, unk_mode) {
        (0, _) => 0.0,
        (_, UnkMode::Pooled) => {
            unknown.values().map(|c| c.0).sum::<usize>() as f64 / n_unknown as f64
        }
        (_, UnkMode::PerClass) => {
            unknown
                .values()
                .map(|&(ok, n)| ok as f64 / n as f64)
                .sum::<f64>()
                / unknown.len() as f64
        }
    };
    Ok(EvalResult {
        os_star,
        unk,
        hsc: harmonic_mean(os_star, unk),
        per_class,
        reject_threshold: threshold,
        n_known,
        n_unknown,
    })
}

/// Predicts and scores a labeled target set.
pub fn evaluate(
    params: &ModelParams,
    x: &Tensor2,
    truth: &[usize],
    shared: &BTreeSet<usize>,
    threshold: f64,
    unk_mode: UnkMode,
    mode: ExecMode,
) -> Result<EvalResult> {
    let preds = predict_with(params, x, threshold, mode)?;
    h_score(&preds, truth, shared, threshold, unk_mode)
}

/// One [`EvalResult`] per threshold, sharing a single forward pass.
pub fn threshold_sweep(
    params: &ModelParams,
    x: &Tensor2,
    truth: &[usize],
    shared: &BTreeSet<usize>,
    grid: &[f64],
    unk_mode: UnkMode,
    mode: ExecMode,
) -> Result<Vec<EvalResult>> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty threshold grid".into()));
    }
    if let Some(t) = grid.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::InvalidArgument(format!(
            "threshold {t} outside [0, 1]"
        )));
    }
    let (p_c, p_o) = probabilities(params, x, mode)?;
    par::try_map(mode, grid, |&t| {
        let preds = decide_all(&p_c, &p_o, t);
        h_score(&preds, truth, shared, t, unk_mode)
    })
}

impl fmt::Display for EvalResult {
    /// Human-readable summary block.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "threshold  {:.3}", self.reject_threshold)?;
        writeln!(
            f,
            "OS*        {:6.2}%  ({} known samples)",
            100.0 * self.os_star,
            self.n_known
        )?;
        writeln!(
            f,
            "UNK        {:6.2}%  ({} unknown samples)",
            100.0 * self.unk,
            self.n_unknown
        )?;
        writeln!(f, "H-score    {:6.2}%", 100.0 * self.hsc)?;
        for (c, acc) in &self.per_class {
            writeln!(f, "  class {c:>3}  {:6.2}%", 100.0 * acc)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    #[test]
    fn decide_examples() {
        assert_eq!(
            decide(&[0.0, 1.0, 0.0], &[0.2, 0.9, 0.1], 0.5),
            Prediction::Known(1)
        );
        assert_eq!(
            decide(&[0.0, 1.0, 0.0], &[0.2, 0.1, 0.9], 0.5),
            Prediction::Unknown
        );
        for p in [0.0, 0.3, 1.0] {
            assert_eq!(decide(&[0.6, 0.4], &[p, 0.5], 0.0), Prediction::Known(0));
            assert_eq!(decide(&[0.6, 0.4], &[p, 0.5], 1.0), Prediction::Unknown);
        }
        // ties take the lower index
        assert_eq!(decide(&[0.5, 0.5], &[1.0, 1.0], 0.5), Prediction::Known(0));
    }

    #[test]
    fn harmonic_examples() {
        assert!((harmonic_mean(0.9, 0.9) - 0.9).abs() < 1e-15);
        assert!((harmonic_mean(0.8, 0.6) - 0.96 / 1.4).abs() < 1e-15);
        assert!((harmonic_mean(0.8, 0.6) - 0.6857).abs() < 1e-4);
        assert_eq!(harmonic_mean(0.7, 0.0), 0.0);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
    }

    #[test]
    fn h_score_counts() {
        use Prediction::*;
        let shared: BTreeSet<usize> = [0, 1].into();
        let truth = [0, 0, 1, 1, 5, 5, 6, 6];
        let preds = [
            Known(0),
            Known(1),
            Known(1),
            Known(1),
            Unknown,
            Known(0),
            Unknown,
            Unknown,
        ];
        let r = h_score(&preds, &truth, &shared, 0.5, UnkMode::Pooled).unwrap();
        assert_eq!(r.per_class[&0], 0.5);
        assert_eq!(r.per_class[&1], 1.0);
        assert_eq!(r.os_star, 0.75);
        assert_eq!(r.unk, 0.75);
        assert_eq!((r.n_known, r.n_unknown), (4, 4));
        let r = h_score(&preds, &truth, &shared, 0.5, UnkMode::PerClass).unwrap();
        assert_eq!(r.unk, 0.75);
        let truth = [0, 0, 1, 1, 5, 6, 6, 6];
        let r = h_score(&preds, &truth, &shared, 0.5, UnkMode::PerClass).unwrap();
        assert_eq!(r.unk, 0.5 * (1.0 + 2.0 / 3.0));
    }

    #[test]
    fn absent_shared_class_is_excluded() {
        use Prediction::*;
        let shared: BTreeSet<usize> = [0, 1, 2].into();
        let r = h_score(&[Known(0), Unknown], &[0, 9], &shared, 0.5, UnkMode::Pooled).unwrap();
        assert_eq!(r.per_class.len(), 1);
        assert_eq!(r.os_star, 1.0);
    }

    #[test]
    fn empty_evaluation_is_an_error() {
        let shared: BTreeSet<usize> = [0].into();
        assert!(matches!(
            h_score(&[], &[], &shared, 0.5, UnkMode::Pooled),
            Err(Error::EmptyEvaluation)
        ));
    }

    #[test]
    fn hsc_bounds_on_random_predictions() {
        let mut rng = rng::seeded(2);
        let shared: BTreeSet<usize> = (0..4).collect();
        for _ in 0..200 {
            let n = rng.random_range(1..40);
            let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..7)).collect();
            let preds: Vec<Prediction> = (0..n)
                .map(|_| match rng.random_range(0..5) {
                    4 => Prediction::Unknown,
                    k => Prediction::Known(k),
                })
                .collect();
            let r = h_score(&preds, &truth, &shared, 0.5, UnkMode::Pooled).unwrap();
            assert!(r.hsc <= (2.0 * r.os_star).min(2.0 * r.unk) + 1e-15);
            assert!(r.hsc <= r.os_star.max(r.unk) + 1e-15);
            assert_eq!(r.hsc == 0.0, r.os_star == 0.0 || r.unk == 0.0);
        }
    }
}
