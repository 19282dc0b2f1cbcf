//! Memory bank of l2-normalized target features and the neighborhood
//! machinery used by neighborhood invariance learning.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::math::{self, dot, Tensor2};
use crate::par::{self, ExecMode};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MemoryConfig {
    /// neighborhood size |N_j|
    pub k_nn: usize,
    /// softmax temperature for neighbor similarities
    pub temperature: f64,
    /// 0 = hard replacement; otherwise `row = normalize(m·old + (1-m)·new)`
    pub momentum: f64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            k_nn: 5,
            temperature: 0.05,
            momentum: 0.0,
        }
    }
}

impl MemoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_nn == 0 {
            return Err(Error::InvalidArgument("k_nn must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "bank momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// One unit-norm feature row per target sample.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    entries: Tensor2,
    valid: Vec<bool>,
    config: MemoryConfig,
}

impl MemoryBank {
    pub fn new(n: usize, dim: usize, config: MemoryConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            entries: Tensor2::zeros(n, dim),
            valid: vec![false; n],
            config,
        })
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.entries.cols()
    }

    pub fn is_valid(&self, j: usize) -> bool {
        self.valid.get(j).copied().unwrap_or(false)
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn row(&self, j: usize) -> &[f64] {
        self.entries.row(j)
    }

    /// Stores `l2_normalize(z)` at row `j` (blended with the old row when a
    /// momentum is configured) and marks it valid.
    pub fn update(&mut self, j: usize, z: &[f64]) -> Result<()> {
        if j >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "bank index {j} out of range for {} rows",
                self.len()
            )));
        }
        if z.len() != self.dim() {
            return Err(Error::Shape(format!(
                "feature of length {} for a bank of dimension {}",
                z.len(),
                self.dim()
            )));
        }
        let fresh = math::l2_normalize(z)?;
        let m = self.config.momentum;
        let row = if m > 0.0 && self.valid[j] {
            let blended: Vec<f64> = self
                .entries
                .row(j)
                .iter()
                .zip(&fresh)
                .map(|(old, new)| m * old + (1.0 - m) * new)
                .collect();
            // opposite old/new directions can cancel; fall back to the new row
            math::l2_normalize(&blended).unwrap_or(fresh)
        } else {
            fresh
        };
        self.entries.row_mut(j).copy_from_slice(&row);
        self.valid[j] = true;
        Ok(())
    }

    /// Updates rows `indices[i]` with `features.row(i)`.
    pub fn update_rows(&mut self, indices: &[usize], features: &Tensor2) -> Result<()> {
        if indices.len() != features.rows() {
            return Err(Error::Shape(format!(
                "{} indices for {} feature rows",
                indices.len(),
                features.rows()
            )));
        }
        for (&j, z) in indices.iter().zip(features.iter_rows()) {
            self.update(j, z)?;
        }
        Ok(())
    }

    /// The `min(k_nn, #valid - 1)` valid rows other than `j` with the largest
    /// dot product against row `j`, best first; ties go to the lower index.
    pub fn neighbors(&self, j: usize) -> Result<Vec<usize>> {
        if !self.is_valid(j) {
            return Err(Error::InvalidArgument(format!("bank row {j} is not valid")));
        }
        let query = self.entries.row(j);
        let mut scored: Vec<(f64, usize)> = (0..self.len())
            .filter(|&k| k != j && self.valid[k])
            .map(|k| (dot(query, self.entries.row(k)), k))
            .collect();
        let take = self.config.k_nn.min(scored.len());
        if take == 0 {
            return Ok(Vec::new());
        }
        let by_rank = |a: &(f64, usize), b: &(f64, usize)| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
        };
        if take < scored.len() {
            scored.select_nth_unstable_by(take - 1, by_rank);
            scored.truncate(take);
        }
        scored.sort_by(by_rank);
        Ok(scored.into_iter().map(|(_, k)| k).collect())
    }

    /// Neighborhoods for several rows at once.
    pub fn neighbors_many(&self, rows: &[usize], mode: ExecMode) -> Result<Vec<Vec<usize>>> {
        par::try_map(mode, rows, |&j| self.neighbors(j))
    }

    /// Neighborhood of `j` with its softmax-normalized similarities
    /// `softmax_k(row_j · row_k / τ)` over `k ∈ N_j`.
    pub fn similarity_probs(&self, j: usize) -> Result<(Vec<usize>, Vec<f64>)> {
        let nbrs = self.neighbors(j)?;
        if nbrs.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "bank row {j} has no neighbors"
            )));
        }
        let dots: Vec<f64> = nbrs
            .iter()
            .map(|&k| dot(self.entries.row(j), self.entries.row(k)))
            .collect();
        let probs = similarity_softmax(&dots, self.config.temperature)?;
        Ok((nbrs, probs))
    }
}

/// `softmax(dots / τ)`.
pub fn similarity_softmax(dots: &[f64], temperature: f64) -> Result<Vec<f64>> {
    let scaled: Vec<f64> = dots.iter().map(|d| d / temperature).collect();
    math::softmax(&scaled)
}

/// `|A ∩ B| / |A ∪ B|`, with two empty sets scoring 0.
pub fn jaccard_weight(a: &[usize], b: &[usize]) -> f64 {
    let a: BTreeSet<usize> = a.iter().copied().collect();
    let b: BTreeSet<usize> = b.iter().copied().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}
