//! Problem instances: a labeled source domain, an unlabeled target domain and
//! the split that relates their label sets.
//!
//! Class ids follow one convention everywhere: shared classes are
//! `0..n_shared`, source-private classes `n_shared..K`, and target-private
//! classes `K..K + n_target_private`. Any target label `>= K` is unknown.

mod io;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::math::Tensor2;
use crate::rng::{self, Rng};

pub use io::{
    load_domains, load_features, load_scenario, save_features, save_scenario, ScenarioFiles,
};

/// Sizes of the shared, source-private and target-private label sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SplitSpec {
    pub n_shared: usize,
    pub n_source_private: usize,
    pub n_target_private: usize,
}

impl SplitSpec {
    pub fn new(n_shared: usize, n_source_private: usize, n_target_private: usize) -> Result<Self> {
        let s = Self {
            n_shared,
            n_source_private,
            n_target_private,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_source_classes() < 2 {
            return Err(Error::InvalidArgument(format!(
                "split {self} has K = {} source classes, need at least 2",
                self.num_source_classes()
            )));
        }
        Ok(())
    }

    /// K = |source label set|.
    pub fn num_source_classes(&self) -> usize {
        self.n_shared + self.n_source_private
    }

    pub fn num_target_classes(&self) -> usize {
        self.n_shared + self.n_target_private
    }

    pub fn shared_classes(&self) -> BTreeSet<usize> {
        (0..self.n_shared).collect()
    }

    pub fn source_label_space(&self) -> BTreeSet<usize> {
        (0..self.num_source_classes()).collect()
    }

    pub fn target_label_space(&self) -> BTreeSet<usize> {
        let k = self.num_source_classes();
        (0..self.n_shared)
            .chain(k..k + self.n_target_private)
            .collect()
    }

    pub fn is_unknown(&self, label: usize) -> bool {
        label >= self.num_source_classes()
    }
}

impl fmt::Display for SplitSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}",
            self.n_shared, self.n_source_private, self.n_target_private
        )
    }
}

impl FromStr for SplitSpec {
    type Err = Error;

    /// Parses `shared/source-private/target-private`, e.g. `10/10/11`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split('/').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(Error::InvalidArgument(format!(
                "split '{s}' must have the form shared/source-private/target-private"
            )));
        }
        let mut n = [0usize; 3];
        for (slot, p) in n.iter_mut().zip(&parts) {
            *slot = p.parse().map_err(|_| {
                Error::InvalidArgument(format!("split '{s}': '{p}' is not a count"))
            })?;
        }
        SplitSpec::new(n[0], n[1], n[2])
    }
}

/// Feature rows of one domain, optionally labeled.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub features: Tensor2,
    pub labels: Option<Vec<usize>>,
    pub label_space: BTreeSet<usize>,
}

impl DomainDataset {
    pub fn new(
        features: Tensor2,
        labels: Option<Vec<usize>>,
        label_space: BTreeSet<usize>,
    ) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::InvalidArgument("dataset has no samples".into()));
        }
        if let Some(l) = &labels {
            if l.len() != features.rows() {
                return Err(Error::Shape(format!(
                    "{} labels for {} samples",
                    l.len(),
                    features.rows()
                )));
            }
            if let Some(bad) = l.iter().find(|y| !label_space.contains(y)) {
                return Err(Error::InvalidArgument(format!(
                    "label {bad} outside the label space"
                )));
            }
        }
        Ok(Self {
            features,
            labels,
            label_space,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// A full adaptation problem. Target labels are kept for evaluation only.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub source: DomainDataset,
    pub target: DomainDataset,
    pub split: SplitSpec,
    pub k: usize,
}

impl Scenario {
    pub fn new(source: DomainDataset, target: DomainDataset, split: SplitSpec) -> Result<Self> {
        split.validate()?;
        let k = split.num_source_classes();
        if source.labels.is_none() {
            return Err(Error::InvalidArgument(
                "source domain must be labeled".into(),
            ));
        }
        if source.label_space != split.source_label_space() {
            return Err(Error::InvalidArgument(format!(
                "source label space does not match split {split}"
            )));
        }
        if let Some(labels) = &target.labels {
            let allowed = split.target_label_space();
            if let Some(bad) = labels.iter().find(|y| !allowed.contains(y)) {
                return Err(Error::InvalidArgument(format!(
                    "target label {bad} is neither shared nor target-private for split {split}"
                )));
            }
        }
        if source.dim() != target.dim() {
            return Err(Error::Shape(format!(
                "source dimension {} vs target dimension {}",
                source.dim(),
                target.dim()
            )));
        }
        Ok(Self {
            source,
            target,
            split,
            k,
        })
    }

    pub fn dim(&self) -> usize {
        self.source.dim()
    }

    pub fn source_labels(&self) -> &[usize] {
        self.source
            .labels
            .as_deref()
            .expect("validated at construction")
    }
}

/// Parameters of [`generate_scenario`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub split: SplitSpec,
    pub dim: usize,
    pub n_per_class: usize,
    pub shift_magnitude: f64,
    pub spread: f64,
}

const MEAN_RADIUS: f64 = 10.0;
const MIN_SEPARATION: f64 = 4.0;
const PLACEMENT_ATTEMPTS: usize = 2000;

fn unit_vector(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = crate::math::l2_norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Places a new class mean on the sphere, rejecting candidates closer than
/// `min_sep` to any placed mean. When the sphere is too crowded the candidate
/// with the largest clearance is used instead.
fn place_mean(
    rng: &mut Rng,
    dim: usize,
    radius: f64,
    min_sep: f64,
    placed: &[Vec<f64>],
) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let cand: Vec<f64> = unit_vector(rng, dim)
            .into_iter()
            .map(|x| x * radius)
            .collect();
        let clearance = placed
            .iter()
            .map(|m| distance(m, &cand))
            .fold(f64::INFINITY, f64::min);
        if clearance >= min_sep {
            return cand;
        }
        if best.as_ref().is_none_or(|(c, _)| clearance > *c) {
            best = Some((clearance, cand));
        }
    }
    let (clearance, cand) = best.expect("at least one attempt");
    log::warn!(
        "class mean placed with clearance {clearance:.3} < {min_sep:.3}; sphere too crowded"
    );
    cand
}

/// Draws Gaussian class clouds for both domains.
///
/// Class means lie on a sphere of radius `10 * spread` and are kept at least
/// `4 * spread` apart; target-private means are placed after, and repelled
/// from, every source mean. Target samples of class `k` are centred on
/// `mean_k + shift_k`, where `shift_k` is a per-class random direction of
/// length `shift_magnitude`.
pub fn generate_scenario(spec: &SyntheticSpec, seed: u64) -> Result<Scenario> {
    let SyntheticSpec {
        split,
        dim,
        n_per_class,
        shift_magnitude,
        spread,
    } = *spec;
    split.validate()?;
    if dim < 2 {
        return Err(Error::InvalidArgument(format!(
            "feature dimension {dim} < 2"
        )));
    }
    if n_per_class < 4 {
        return Err(Error::InvalidArgument(format!(
            "n_per_class {n_per_class} < 4"
        )));
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "spread {spread} must be positive"
        )));
    }
    if !(shift_magnitude >= 0.0 && shift_magnitude.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "shift magnitude {shift_magnitude} must be non-negative"
        )));
    }

    let mut rng = rng::seeded(seed);
    let k = split.num_source_classes();
    let total_classes = k + split.n_target_private;
    let radius = MEAN_RADIUS * spread;
    let min_sep = MIN_SEPARATION * spread;

    let mut means: Vec<Vec<f64>> = Vec::with_capacity(total_classes);
    for _ in 0..total_classes {
        let m = place_mean(&mut rng, dim, radius, min_sep, &means);
        means.push(m);
    }
    let shifts: Vec<Vec<f64>> = (0..total_classes)
        .map(|_| {
            unit_vector(&mut rng, dim)
                .into_iter()
                .map(|x| x * shift_magnitude)
                .collect()
        })
        .collect();

    let draw = |rng: &mut Rng, centre: &[f64]| -> Vec<f64> {
        centre
            .iter()
            .map(|&c| {
                let z: f64 = StandardNormal.sample(rng);
                c + spread * z
            })
            .collect()
    };

    let mut src_rows = Vec::with_capacity(k * n_per_class);
    let mut src_labels = Vec::with_capacity(k * n_per_class);
    for (class, mean) in means.iter().enumerate().take(k) {
        for _ in 0..n_per_class {
            src_rows.push(draw(&mut rng, mean));
            src_labels.push(class);
        }
    }

    let target_classes: Vec<usize> = split.target_label_space().into_iter().collect();
    let mut tgt_rows = Vec::with_capacity(target_classes.len() * n_per_class);
    let mut tgt_labels = Vec::with_capacity(target_classes.len() * n_per_class);
    for &class in &target_classes {
        let centre: Vec<f64> = means[class]
            .iter()
            .zip(&shifts[class])
            .map(|(m, s)| m + s)
            .collect();
        for _ in 0..n_per_class {
            tgt_rows.push(draw(&mut rng, &centre));
            tgt_labels.push(class);
        }
    }

    let source = DomainDataset::new(
        Tensor2::from_rows(&src_rows)?,
        Some(src_labels),
        split.source_label_space(),
    )?;
    let target = DomainDataset::new(
        Tensor2::from_rows(&tgt_rows)?,
        Some(tgt_labels),
        split.target_label_space(),
    )?;
    Scenario::new(source, target, split)
}
