//! SGD with Nesterov momentum, inverse learning-rate decay and the training
//! loop that ties batches, the memory bank and the losses together.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::eval::{self, EvalResult, UnkMode, DEFAULT_THRESHOLD};
use crate::losses::{self, LossConfig, LossReport, StepBatch};
use crate::math::Tensor2;
use crate::memory::{MemoryBank, MemoryConfig};
use crate::model::{self, ModelConfig, ModelParams, ParamGroup, ParamKind};
use crate::par::ExecMode;
use crate::rng::{self, Rng};
use crate::scenario::Scenario;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    /// base learning rate of the feature extractor
    pub lr_backbone: f64,
    /// base learning rate of the closed-set and open-set heads
    pub lr_heads: f64,
    /// Nesterov momentum
    pub momentum: f64,
    /// applied to weights, not biases
    pub weight_decay: f64,
    /// `(a, b)` of `lr · (1 + a·p)^(-b)`
    pub schedule: (f64, f64),
    pub epochs: usize,
    /// total batch, split evenly between source and target
    pub batch: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_backbone: 1e-3,
            lr_heads: 1e-2,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: (10.0, 0.75),
            epochs: 50,
            batch: 36,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.lr_backbone > 0.0 && self.lr_heads > 0.0) {
            return bad(format!(
                "learning rates must be positive ({}, {})",
                self.lr_backbone, self.lr_heads
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight decay {} is negative", self.weight_decay));
        }
        if self.schedule.0 < 0.0 || self.schedule.1 < 0.0 {
            return bad(format!(
                "schedule constants {:?} must be >= 0",
                self.schedule
            ));
        }
        if self.batch < 2 || !self.batch.is_multiple_of(2) {
            return bad(format!("batch {} must be even and >= 2", self.batch));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        Ok(())
    }
}

/// `base · (1 + a·p)^(-b)` for training progress `p ∈ [0, 1]`.
pub fn lr_at(base_lr: f64, progress: f64, schedule: (f64, f64)) -> f64 {
    let (a, b) = schedule;
    base_lr * (1.0 + a * progress.clamp(0.0, 1.0)).powf(-b)
}

/// One Nesterov step over every tensor:
///
/// ```text
/// g' = g + wd·w          (weights only)
/// v' = μ·v − lr·g'
/// w' = w + μ·v' − lr·g'
/// ```
///
/// `lr` is the tensor's group rate scaled by [`lr_at`].
pub fn sgd_step(
    params: &mut [&mut Tensor2],
    kinds: &[ParamKind],
    grads: &[Tensor2],
    velocity: &mut [Tensor2],
    cfg: &OptimConfig,
    progress: f64,
) -> Result<()> {
    let n = params.len();
    if kinds.len() != n || grads.len() != n || velocity.len() != n {
        return Err(Error::Shape(format!(
            "{n} params, {} kinds, {} grads, {} velocities",
            kinds.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params[i].shape() || velocity[i].shape() != params[i].shape() {
            return Err(Error::Shape(format!(
                "tensor {i}: gradient or velocity shape mismatch"
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of tensor {i}")));
        }
    }
    let mu = cfg.momentum;
    for i in 0..n {
        let base = match kinds[i].group {
            ParamGroup::Backbone => cfg.lr_backbone,
            ParamGroup::Heads => cfg.lr_heads,
        };
        let lr = lr_at(base, progress, cfg.schedule);
        let wd = if kinds[i].is_bias {
            0.0
        } else {
            cfg.weight_decay
        };
        let w = params[i].data_mut();
        let v = velocity[i].data_mut();
        for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(grads[i].data()) {
            let step = g + wd * *w;
            *v = mu * *v - lr * step;
            *w += mu * *v - lr * step;
        }
    }
    Ok(())
}

/// Everything [`train`] needs beyond the scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub d_feat: usize,
    pub optim: OptimConfig,
    pub loss: LossConfig,
    pub memory: MemoryConfig,
    /// rejection threshold for the end-of-epoch evaluation
    pub threshold: f64,
    pub unk_mode: UnkMode,
    /// evaluate on the target ground truth after every epoch (else only after the last)
    pub eval_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            d_feat: 32,
            optim: OptimConfig::default(),
            loss: LossConfig::default(),
            memory: MemoryConfig::default(),
            threshold: DEFAULT_THRESHOLD,
            unk_mode: UnkMode::Pooled,
            eval_every_epoch: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    /// current learning rate of the heads group
    pub lr: f64,
    pub report: LossReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub eval: Option<EvalResult>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// wall-clock seconds per epoch; not part of the deterministic record
    pub epoch_seconds: Vec<f64>,
}

impl PartialEq for TrainHistory {
    fn eq(&self, other: &Self) -> bool {
        self.steps == other.steps && self.epochs == other.epochs
    }
}

impl TrainHistory {
    pub fn final_eval(&self) -> Option<&EvalResult> {
        self.epochs.iter().rev().find_map(|e| e.eval.as_ref())
    }
}

/// Cycles through a shuffled permutation, reshuffling on wrap-around.
#[derive(Clone, Debug)]
struct Sampler {
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(n: usize, rng: &mut Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn next_batch(&mut self, size: usize, rng: &mut Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Stateful training run; [`train`] drives it to completion.
#[derive(Debug)]
pub struct Trainer<'a> {
    scenario: &'a Scenario,
    cfg: TrainConfig,
    params: ModelParams,
    kinds: Vec<ParamKind>,
    velocity: Vec<Tensor2>,
    bank: MemoryBank,
    rng: Rng,
    source_sampler: Sampler,
    target_sampler: Sampler,
    steps_per_epoch: usize,
    step: usize,
    history: TrainHistory,
}

impl<'a> Trainer<'a> {
    pub fn new(scenario: &'a Scenario, cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.optim.validate()?;
        cfg.loss.weights.validate()?;
        cfg.memory.validate()?;
        let mut rng = rng::seeded(seed);
        let model_cfg = ModelConfig {
            d_in: scenario.dim(),
            hidden: cfg.hidden.clone(),
            d_feat: cfg.d_feat,
            num_classes: scenario.k,
        };
        let params = model::init_params(&model_cfg, rng.random())?;
        let kinds = params.kinds();
        let velocity = params
            .tensors()
            .iter()
            .map(|t| Tensor2::zeros(t.rows(), t.cols()))
            .collect();
        let bank = MemoryBank::new(scenario.target.len(), cfg.d_feat, cfg.memory)?;
        let source_sampler = Sampler::new(scenario.source.len(), &mut rng);
        let target_sampler = Sampler::new(scenario.target.len(), &mut rng);
        let half = cfg.optim.batch / 2;
        let larger = scenario.source.len().max(scenario.target.len());
        let steps_per_epoch = larger.div_ceil(half);
        Ok(Self {
            scenario,
            cfg,
            params,
            kinds,
            velocity,
            bank,
            rng,
            source_sampler,
            target_sampler,
            steps_per_epoch,
            step: 0,
            history: TrainHistory::default(),
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn bank(&self) -> &MemoryBank {
        &self.bank
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch * self.cfg.optim.epochs
    }

    fn next_batch(&mut self) -> StepBatch {
        let half = self.cfg.optim.batch / 2;
        let src = self.source_sampler.next_batch(half, &mut self.rng);
        let tgt = self.target_sampler.next_batch(half, &mut self.rng);
        let lambdas = losses::sample_mix_lambdas(&mut self.rng, self.cfg.loss.weights.alpha, half)
            .expect("alpha validated at construction");
        let labels = self.scenario.source_labels();
        StepBatch {
            source_x: self.scenario.source.features.select_rows(&src),
            source_y: src.iter().map(|&i| labels[i]).collect(),
            target_x: self.scenario.target.features.select_rows(&tgt),
            target_idx: tgt,
            mix_lambdas: lambdas,
        }
    }

    /// Runs one optimization step and returns its record.
    pub fn step(&mut self) -> Result<StepRecord> {
        let batch = self.next_batch();
        let step = self.step;
        let (report, grads) = losses::loss_and_grads(
            &self.params,
            &batch,
            Some(&mut self.bank),
            true,
            &self.cfg.loss,
        )
        .map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!("step {step}: {msg}")),
            other => other,
        })?;
        let progress = step as f64 / self.total_steps() as f64;
        let mut tensors = self.params.tensors_mut();
        sgd_step(
            &mut tensors,
            &self.kinds,
            &grads,
            &mut self.velocity,
            &self.cfg.optim,
            progress,
        )
        .map_err(|e| match e {
            Error::NonFinite(msg) => {
                Error::NonFinite(format!("step {step}: {msg}; report {report:?}"))
            }
            other => other,
        })?;
        let record = StepRecord {
            step,
            epoch: step / self.steps_per_epoch,
            lr: lr_at(self.cfg.optim.lr_heads, progress, self.cfg.optim.schedule),
            report,
        };
        self.step += 1;
        self.history.steps.push(record);
        Ok(record)
    }

    /// Evaluates the current parameters on the target ground truth, if any.
    pub fn evaluate(&self) -> Result<Option<EvalResult>> {
        let Some(truth) = self.scenario.target.labels.as_deref() else {
            return Ok(None);
        };
        let shared: BTreeSet<usize> = self.scenario.split.shared_classes();
        eval::evaluate(
            &self.params,
            &self.scenario.target.features,
            truth,
            &shared,
            self.cfg.threshold,
            self.cfg.unk_mode,
            ExecMode::default(),
        )
        .map(Some)
    }

    pub fn run(mut self) -> Result<(ModelParams, TrainHistory)> {
        let epochs = self.cfg.optim.epochs;
        for epoch in 0..epochs {
            let start = Instant::now();
            for _ in 0..self.steps_per_epoch {
                self.step()?;
            }
            let last = epoch + 1 == epochs;
            let eval = if self.cfg.eval_every_epoch || last {
                self.evaluate()?
            } else {
                None
            };
            if let Some(e) = &eval {
                log::debug!(
                    "epoch {epoch}: OS* {:.3} UNK {:.3} HSC {:.3}",
                    e.os_star,
                    e.unk,
                    e.hsc
                );
            }
            self.history.epochs.push(EpochRecord { epoch, eval });
            self.history
                .epoch_seconds
                .push(start.elapsed().as_secs_f64());
        }
        Ok((self.params, self.history))
    }
}

/// Trains a fresh model on `scenario`. Deterministic under `seed`.
pub fn train(
    scenario: &Scenario,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelParams, TrainHistory)> {
    Trainer::new(scenario, cfg.clone(), seed)?.run()
}
