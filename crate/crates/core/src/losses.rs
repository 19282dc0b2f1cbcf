//! Training losses.
//!
//! Each loss exists twice: a per-sample function over plain probability rows
//! (used for reporting and identities) and a batch-mean term recorded on a
//! [`Tape`] (used for training). Tests keep the two in agreement.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::math::{self, binary_entropy, ln_floor, Tape, Tensor2, Var};
use crate::memory::{jaccard_weight, MemoryBank};
use crate::model::{ForwardVars, ModelParams, ModelVars};
use crate::par::ExecMode;
use crate::rng::Rng;

/// Multipliers of the adaptation terms and the mixup Beta parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// neighborhood invariance
    pub beta1: f64,
    /// cross-domain mixup
    pub beta2: f64,
    /// consistency
    pub eta: f64,
    /// open-set entropy
    pub gamma: f64,
    /// mixup coefficients are drawn from Beta(alpha, alpha)
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta1: 0.5,
            beta2: 0.1,
            eta: 0.16,
            gamma: 0.1,
            alpha: 2.0,
        }
    }
}

impl LossWeights {
    /// Only the supervised source terms.
    pub fn source_only() -> Self {
        Self {
            beta1: 0.0,
            beta2: 0.0,
            eta: 0.0,
            gamma: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.beta1, self.beta2, self.eta, self.gamma];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be finite and >= 0: {self:?}"
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "mixup alpha {} must be positive",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// How the open-set entropy term weighs the K one-vs-all classifiers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum OemMode {
    /// every classifier counts 1/K
    Uniform,
    /// classifier k counts p_c(k|x)/K
    #[default]
    Weighted,
}

impl fmt::Display for OemMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OemMode::Uniform => "uniform",
            OemMode::Weighted => "weighted",
        })
    }
}

impl FromStr for OemMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "uniform" => Ok(OemMode::Uniform),
            "weighted" => Ok(OemMode::Weighted),
            other => Err(Error::InvalidArgument(format!(
                "oem mode '{other}' is neither 'uniform' nor 'weighted'"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub oem_mode: OemMode,
    /// stop gradients through p_c in the weighted entropy term
    pub detach_weights: bool,
}

/// Batch-mean value of every term and their weighted total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub cls: f64,
    pub ova: f64,
    pub oem: f64,
    pub nil: f64,
    pub cmm: f64,
    pub cc: f64,
    pub total: f64,
    pub oem_mode: OemMode,
    pub weights: LossWeights,
}

impl LossReport {
    /// `cls + ova + β1·nil + η·cc + γ·oem + β2·cmm`.
    pub fn combine(&self) -> f64 {
        let w = &self.weights;
        self.cls
            + self.ova
            + w.beta1 * self.nil
            + w.eta * self.cc
            + w.gamma * self.oem
            + w.beta2 * self.cmm
    }

    pub fn is_finite(&self) -> bool {
        [
            self.cls, self.ova, self.oem, self.nil, self.cmm, self.cc, self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

fn check_probs(name: &str, p: &[f64]) -> Result<()> {
    if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument(format!(
            "{name} has entries outside [0, 1]"
        )));
    }
    Ok(())
}

fn check_class(y: usize, k: usize) -> Result<()> {
    if y >= k {
        return Err(Error::InvalidArgument(format!(
            "class {y} out of range for K = {k}"
        )));
    }
    Ok(())
}

/// Cross-entropy `-ln p_c(y)`.
pub fn loss_cls(p_c: &[f64], y: usize) -> Result<f64> {
    check_class(y, p_c.len())?;
    check_probs("p_c", p_c)?;
    Ok(-ln_floor(p_c[y]))
}

/// The negative class with the largest in-lier probability.
pub fn hardest_negative(p_o: &[f64], y: usize) -> Option<usize> {
    p_o.iter()
        .enumerate()
        .filter(|&(k, _)| k != y)
        .fold(None, |best: Option<(usize, f64)>, (k, &p)| match best {
            Some((_, bp)) if bp >= p => best,
            _ => Some((k, p)),
        })
        .map(|(k, _)| k)
}

/// Hard-negative one-vs-all loss:
/// `-ln p_o(y) - min_{k≠y} ln(1 - p_o(k))`.
pub fn loss_ova(p_o: &[f64], y: usize) -> Result<f64> {
    if p_o.len() < 2 {
        return Err(Error::InvalidArgument(
            "one-vs-all loss needs K >= 2 so a negative class exists".into(),
        ));
    }
    check_class(y, p_o.len())?;
    check_probs("p_o", p_o)?;
    let hard = hardest_negative(p_o, y).expect("K >= 2");
    Ok(-ln_floor(p_o[y]) - ln_floor(1.0 - p_o[hard]))
}

/// Mean binary entropy of the K one-vs-all scores.
pub fn loss_oem_uniform(p_o: &[f64]) -> Result<f64> {
    if p_o.is_empty() {
        return Err(Error::InvalidArgument("empty p_o row".into()));
    }
    let k = p_o.len() as f64;
    let mut total = 0.0;
    for &p in p_o {
        total += binary_entropy(p)?;
    }
    Ok(total / k)
}

/// Entropy of classifier k weighted by the closed-set probability of k:
/// `(1/K) Σ_k p_c(k) H(p_o(k))`.
pub fn loss_oem_weighted(p_o: &[f64], p_c: &[f64]) -> Result<f64> {
    if p_o.is_empty() || p_o.len() != p_c.len() {
        return Err(Error::Shape(format!(
            "p_o has {} entries, p_c has {}",
            p_o.len(),
            p_c.len()
        )));
    }
    check_probs("p_c", p_c)?;
    if (p_c.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument("p_c must sum to 1".into()));
    }
    let k = p_o.len() as f64;
    let mut total = 0.0;
    for (&po, &pc) in p_o.iter().zip(p_c) {
        total += pc * binary_entropy(po)?;
    }
    Ok(total / k)
}

/// `-(1/|N|) Σ_k w_k ln p_k` over a neighborhood.
pub fn loss_nil(probs: &[f64], weights: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::InvalidArgument("empty neighborhood".into()));
    }
    if probs.len() != weights.len() {
        return Err(Error::Shape(format!(
            "{} probabilities for {} weights",
            probs.len(),
            weights.len()
        )));
    }
    check_probs("similarity probabilities", probs)?;
    let n = probs.len() as f64;
    Ok(-probs
        .iter()
        .zip(weights)
        .map(|(&p, &w)| w * ln_floor(p))
        .sum::<f64>()
        / n)
}

/// `λ z_s + (1 - λ) z_t`.
pub fn mixup_feature(z_s: &[f64], z_t: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if z_s.len() != z_t.len() {
        return Err(Error::Shape(format!(
            "mixing features of length {} and {}",
            z_s.len(),
            z_t.len()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!(
            "mixup weight {lambda} outside [0, 1]"
        )));
    }
    Ok(z_s
        .iter()
        .zip(z_t)
        .map(|(s, t)| lambda * s + (1.0 - lambda) * t)
        .collect())
}

/// Rejection of a mixed feature by the source class's classifier:
/// `-ln(1 - p_o(y_s))`.
pub fn loss_cmm(p_o_mixed: &[f64], y_s: usize) -> Result<f64> {
    check_class(y_s, p_o_mixed.len())?;
    check_probs("p_o", p_o_mixed)?;
    Ok(-ln_floor(1.0 - p_o_mixed[y_s]))
}

/// `-(1/K) Σ_k p_c(k) p_o(k)`, in `[-1/K, 0]`.
pub fn loss_cc(p_c: &[f64], p_o: &[f64]) -> Result<f64> {
    if p_c.is_empty() || p_c.len() != p_o.len() {
        return Err(Error::Shape(format!(
            "p_c has {} entries, p_o has {}",
            p_c.len(),
            p_o.len()
        )));
    }
    let k = p_c.len() as f64;
    Ok(-p_c.iter().zip(p_o).map(|(a, b)| a * b).sum::<f64>() / k)
}

/// Draws one mixup coefficient per pair from Beta(alpha, alpha).
pub fn sample_mix_lambdas(rng: &mut Rng, alpha: f64, n: usize) -> Result<Vec<f64>> {
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::InvalidArgument(format!("Beta({alpha}, {alpha}): {e}")))?;
    Ok((0..n).map(|_| beta.sample(rng)).collect())
}

// ---------------------------------------------------------------------------
// Batch terms on the tape. Every term returns a 1×1 node holding a batch mean.

fn batch_mean(tape: &mut Tape, per_row: Var, rows: usize) -> Var {
    let s = tape.sum(per_row);
    tape.scale(s, 1.0 / rows as f64)
}

/// Mean of `-ln p_c(y_i)`.
pub fn cls_term(tape: &mut Tape, p_c: Var, labels: &[usize]) -> Result<Var> {
    let k = tape.value(p_c).cols();
    for &y in labels {
        check_class(y, k)?;
    }
    let picked = tape.gather_one(p_c, labels)?;
    let lp = tape.ln(picked);
    let m = batch_mean(tape, lp, labels.len());
    Ok(tape.scale(m, -1.0))
}

/// Mean hard-negative one-vs-all loss. The hardest negative is chosen from the
/// current values and treated as a fixed index.
pub fn ova_term(tape: &mut Tape, p_o: Var, labels: &[usize]) -> Result<Var> {
    let k = tape.value(p_o).cols();
    if k < 2 {
        return Err(Error::InvalidArgument(
            "one-vs-all loss needs K >= 2 so a negative class exists".into(),
        ));
    }
    let hard: Vec<usize> = labels
        .iter()
        .enumerate()
        .map(|(r, &y)| {
            check_class(y, k)?;
            Ok(hardest_negative(tape.value(p_o).row(r), y).expect("K >= 2"))
        })
        .collect::<Result<_>>()?;
    let pos = tape.gather_one(p_o, labels)?;
    let pos = tape.ln(pos);
    let neg = tape.gather_one(p_o, &hard)?;
    let neg = tape.one_minus(neg);
    let neg = tape.ln(neg);
    let both = tape.add(pos, neg)?;
    let m = batch_mean(tape, both, labels.len());
    Ok(tape.scale(m, -1.0))
}

/// Elementwise binary entropy `-(p ln p + (1-p) ln(1-p))`.
fn entropy_elementwise(tape: &mut Tape, p: Var) -> Result<Var> {
    let lp = tape.ln(p);
    let a = tape.mul(p, lp)?;
    let q = tape.one_minus(p);
    let lq = tape.ln(q);
    let b = tape.mul(q, lq)?;
    let s = tape.add(a, b)?;
    Ok(tape.scale(s, -1.0))
}

/// Mean open-set entropy. With `weights = Some(p_c)` classifier `k` of row `i`
/// counts `p_c[i,k] / K`, otherwise `1 / K`.
pub fn oem_term(tape: &mut Tape, p_o: Var, weights: Option<Var>) -> Result<Var> {
    let (rows, k) = tape.value(p_o).shape();
    let h = entropy_elementwise(tape, p_o)?;
    let h = match weights {
        Some(w) => tape.mul(h, w)?,
        None => h,
    };
    let m = batch_mean(tape, h, rows);
    Ok(tape.scale(m, 1.0 / k as f64))
}

/// Mean of `-(1/K) Σ_k p_c p_o`.
pub fn cc_term(tape: &mut Tape, p_c: Var, p_o: Var) -> Result<Var> {
    let (rows, k) = tape.value(p_o).shape();
    let prod = tape.mul(p_c, p_o)?;
    let m = batch_mean(tape, prod, rows);
    Ok(tape.scale(m, -1.0 / k as f64))
}

/// Mixup rejection. Source row `i` mixes with target row `i mod n_t` using
/// `lambdas[i]`; the mixed feature is scored by the open-set heads.
pub fn cmm_term(
    tape: &mut Tape,
    model: &ModelVars,
    z_s: Var,
    z_t: Var,
    labels: &[usize],
    lambdas: &[f64],
) -> Result<Var> {
    let n_s = tape.value(z_s).rows();
    let n_t = tape.value(z_t).rows();
    if lambdas.len() != n_s || labels.len() != n_s || n_t == 0 {
        return Err(Error::Shape(format!(
            "{n_s} source rows, {} labels, {} mixup weights, {n_t} target rows",
            labels.len(),
            lambdas.len()
        )));
    }
    if let Some(l) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::InvalidArgument(format!(
            "mixup weight {l} outside [0, 1]"
        )));
    }
    let pairs: Vec<usize> = (0..n_s).map(|i| i % n_t).collect();
    let zt_paired = tape.gather_rows(z_t, pairs)?;
    let a = tape.scale_rows(z_s, lambdas.to_vec())?;
    let b = tape.scale_rows(zt_paired, lambdas.iter().map(|l| 1.0 - l).collect())?;
    let z_m = tape.add(a, b)?;
    let p_m = model.open_probs(tape, z_m)?;
    let k = tape.value(p_m).cols();
    for &y in labels {
        check_class(y, k)?;
    }
    let picked = tape.gather_one(p_m, labels)?;
    let rej = tape.one_minus(picked);
    let lr = tape.ln(rej);
    let m = batch_mean(tape, lr, n_s);
    Ok(tape.scale(m, -1.0))
}

/// Neighborhood invariance over a target batch whose row `i` is stored at bank
/// row `bank_rows[i]`. Rows that are invalid in the bank or have no neighbors
/// contribute 0; the sum is divided by the full batch size. Bank rows are
/// constants. Returns `None` when no row is active.
pub fn nil_term(
    tape: &mut Tape,
    z_t: Var,
    bank_rows: &[usize],
    bank: &MemoryBank,
    mode: ExecMode,
) -> Result<Option<Var>> {
    let n_t = tape.value(z_t).rows();
    if bank_rows.len() != n_t {
        return Err(Error::Shape(format!(
            "{} bank indices for {n_t} target rows",
            bank_rows.len()
        )));
    }
    // zero features cannot be normalized and are skipped like unfilled bank rows
    let zv = tape.value(z_t);
    let candidates: Vec<usize> = (0..n_t)
        .filter(|&i| bank.is_valid(bank_rows[i]) && math::l2_norm(zv.row(i)) > 0.0)
        .collect();
    let cand_bank: Vec<usize> = candidates.iter().map(|&i| bank_rows[i]).collect();
    let hoods = bank.neighbors_many(&cand_bank, mode)?;
    let (active, hoods): (Vec<usize>, Vec<Vec<usize>>) = candidates
        .into_iter()
        .zip(hoods)
        .filter(|(_, h)| !h.is_empty())
        .unzip();
    if active.is_empty() {
        return Ok(None);
    }

    // neighborhoods of the neighbors, for the Jaccard confidence weights
    let mut others: Vec<usize> = hoods.iter().flatten().copied().collect();
    others.sort_unstable();
    others.dedup();
    let other_hoods = bank.neighbors_many(&others, mode)?;
    let hood_of = |k: usize| -> &[usize] {
        let pos = others.binary_search(&k).expect("collected above");
        &other_hoods[pos]
    };

    let width = hoods[0].len();
    let mut weights = Tensor2::zeros(active.len(), width);
    for (r, hood) in hoods.iter().enumerate() {
        debug_assert_eq!(
            hood.len(),
            width,
            "neighborhood size depends only on #valid"
        );
        for (c, &k) in hood.iter().enumerate() {
            weights.set(r, c, jaccard_weight(hood, hood_of(k)) / hood.len() as f64);
        }
    }

    let rows = tape.gather_rows(z_t, active)?;
    let unit = tape.l2_normalize_rows(rows)?;
    let bank_t = tape.constant(bank_entries(bank));
    let sims = tape.matmul_nt(unit, bank_t)?;
    let sims = tape.gather(sims, hoods)?;
    let sims = tape.scale(sims, 1.0 / bank.config().temperature);
    let probs = tape.softmax_rows(sims)?;
    let lp = tape.ln(probs);
    let w = tape.constant(weights);
    let weighted = tape.mul(lp, w)?;
    let s = tape.sum(weighted);
    Ok(Some(tape.scale(s, -1.0 / n_t as f64)))
}

fn bank_entries(bank: &MemoryBank) -> Tensor2 {
    let rows: Vec<&[f64]> = (0..bank.len()).map(|j| bank.row(j)).collect();
    Tensor2::from_rows(&rows).unwrap_or_else(|_| Tensor2::zeros(0, bank.dim()))
}

/// A labeled source batch on the tape.
#[derive(Clone, Copy, Debug)]
pub struct SourceBatch<'a> {
    pub fwd: ForwardVars,
    pub labels: &'a [usize],
}

/// An unlabeled target batch on the tape; `bank_rows[i]` is the bank index of
/// row `i`.
#[derive(Clone, Copy, Debug)]
pub struct TargetBatch<'a> {
    pub fwd: ForwardVars,
    pub bank_rows: &'a [usize],
}

/// The full objective
/// `E_s[cls + ova] + E_t[β1 nil + η cc + γ oem] + E_{s,t}[β2 cmm]`.
///
/// Every term is evaluated for the report; only terms with a positive weight
/// enter the differentiated total. The neighborhood term is reported as 0 when
/// `bank` is `None` or no target row has neighbors yet.
pub fn loss_all(
    tape: &mut Tape,
    model: &ModelVars,
    source: SourceBatch<'_>,
    target: TargetBatch<'_>,
    mix_lambdas: &[f64],
    bank: Option<&MemoryBank>,
    cfg: &LossConfig,
) -> Result<(Var, LossReport)> {
    cfg.weights.validate()?;
    if source.labels.is_empty() || target.bank_rows.is_empty() {
        return Err(Error::InvalidArgument(
            "empty source or target batch".into(),
        ));
    }
    let w = cfg.weights;

    let cls = cls_term(tape, source.fwd.p_c, source.labels)?;
    let ova = ova_term(tape, source.fwd.p_o, source.labels)?;
    let oem = match cfg.oem_mode {
        OemMode::Uniform => oem_term(tape, target.fwd.p_o, None)?,
        OemMode::Weighted => {
            let pc = if cfg.detach_weights {
                tape.detach(target.fwd.p_c)
            } else {
                target.fwd.p_c
            };
            oem_term(tape, target.fwd.p_o, Some(pc))?
        }
    };
    let cc = cc_term(tape, target.fwd.p_c, target.fwd.p_o)?;
    let cmm = cmm_term(
        tape,
        model,
        source.fwd.z,
        target.fwd.z,
        source.labels,
        mix_lambdas,
    )?;
    let nil = match bank {
        Some(b) => nil_term(
            tape,
            target.fwd.z,
            target.bank_rows,
            b,
            ExecMode::Sequential,
        )?,
        None => None,
    };

    let mut total = tape.add(cls, ova)?;
    for (term, weight) in [
        (nil, w.beta1),
        (Some(cc), w.eta),
        (Some(oem), w.gamma),
        (Some(cmm), w.beta2),
    ] {
        if let (Some(t), true) = (term, weight > 0.0) {
            let scaled = tape.scale(t, weight);
            total = tape.add(total, scaled)?;
        }
    }

    let report = LossReport {
        cls: tape.scalar(cls),
        ova: tape.scalar(ova),
        oem: tape.scalar(oem),
        nil: nil.map_or(0.0, |v| tape.scalar(v)),
        cmm: tape.scalar(cmm),
        cc: tape.scalar(cc),
        total: tape.scalar(total),
        oem_mode: cfg.oem_mode,
        weights: w,
    };
    if !report.is_finite() {
        return Err(Error::NonFinite(format!("loss report {report:?}")));
    }
    Ok((total, report))
}

/// One step's worth of inputs.
#[derive(Clone, Debug)]
pub struct StepBatch {
    pub source_x: Tensor2,
    pub source_y: Vec<usize>,
    pub target_x: Tensor2,
    /// bank index of every target row
    pub target_idx: Vec<usize>,
    pub mix_lambdas: Vec<f64>,
}

/// Forward both batches, optionally refresh the bank rows of the target batch
/// with the new features, evaluate [`loss_all`] and backpropagate. Gradients
/// come back in canonical tensor order.
pub fn loss_and_grads(
    params: &ModelParams,
    batch: &StepBatch,
    bank: Option<&mut MemoryBank>,
    update_bank: bool,
    cfg: &LossConfig,
) -> Result<(LossReport, Vec<Tensor2>)> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let xs = tape.constant(batch.source_x.clone());
    let xt = tape.constant(batch.target_x.clone());
    let fs = vars.forward(&mut tape, xs)?;
    let ft = vars.forward(&mut tape, xt)?;
    let bank = match bank {
        Some(b) => {
            if update_bank {
                // a zero feature has no direction; keep that row's previous entry
                let z = tape.value(ft.z);
                for (r, &j) in batch.target_idx.iter().enumerate() {
                    if math::l2_norm(z.row(r)) > 0.0 {
                        b.update(j, z.row(r))?;
                    } else {
                        log::debug!("zero feature for target row {j}; bank entry kept");
                    }
                }
            }
            Some(&*b)
        }
        None => None,
    };
    let (total, report) = loss_all(
        &mut tape,
        &vars,
        SourceBatch {
            fwd: fs,
            labels: &batch.source_y,
        },
        TargetBatch {
            fwd: ft,
            bank_rows: &batch.target_idx,
        },
        &batch.mix_lambdas,
        bank,
        cfg,
    )?;
    let grads = tape.backward(total)?;
    Ok((
        report,
        vars.all()
            .into_iter()
            .map(|v| grads.get(v).clone())
            .collect(),
    ))
}

#[cfg(test)]
mod tests;
