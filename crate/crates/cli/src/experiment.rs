//! The verbs behind the `unida` binary.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use unida_core::eval::{self, EvalResult, UnkMode};
use unida_core::losses::OemMode;
use unida_core::model::{self, ModelParams};
use unida_core::par::{self, ExecMode};
use unida_core::scenario::{self, DomainDataset, ScenarioFiles, SplitSpec};
use unida_core::trainer::{self, TrainHistory};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::report::{self, Cell, ComparisonTable, EvalRow, HistoryRow};

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub oem: Option<OemMode>,
    pub threads: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(s) = self.seed {
            cfg.run.seeds = vec![s];
        }
        if let Some(o) = &self.out {
            cfg.run.out = o.clone();
        }
        if let Some(m) = self.oem {
            cfg.loss.oem = m.to_string();
        }
        if let Some(t) = self.threads {
            cfg.run.threads = t;
        }
    }
}

pub const RESOLVED_CONFIG: &str = "resolved.cfg";
pub const HISTORY_CSV: &str = "history.csv";
pub const CHECKPOINT: &str = "model.ckpt";
pub const EVAL_CSV: &str = "eval.csv";
pub const TABLE_CSV: &str = "table.csv";
pub const TABLE_TXT: &str = "table.txt";
pub const CELLS_CSV: &str = "cells.csv";

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Runs `f` on every item, concurrently when `threads != 1`, keeping order.
fn run_cells<T: Sync, R: Send>(
    threads: usize,
    items: &[T],
    f: impl Fn(&T) -> CliResult<R> + Sync + Send,
) -> CliResult<Vec<R>> {
    let mode = if threads == 1 {
        ExecMode::Sequential
    } else {
        ExecMode::Parallel
    };
    par::with_threads(threads, || par::map(mode, items, f))
        .into_iter()
        .collect()
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

#[derive(Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub params: ModelParams,
    pub history: TrainHistory,
}

#[derive(Debug)]
pub struct RunOutput {
    pub out: PathBuf,
    pub runs: Vec<SeedRun>,
    pub evals: Vec<EvalRow>,
}

/// Trains one model per configured seed and writes the resolved config,
/// `eval.csv` and per-seed `history.csv` and `model.ckpt` under `run.out`.
pub fn run(cfg: &ExperimentConfig) -> CliResult<RunOutput> {
    let out = cfg.run.out.clone();
    create_dir(&out)?;
    write(&out.join(RESOLVED_CONFIG), &cfg.to_toml())?;
    let split = cfg.split()?;
    let tc = cfg
        .train_config()
        .map_err(|(_, msg)| CliError::Usage(msg))?;

    let runs = run_cells(cfg.run.threads, &cfg.run.seeds, |&seed| {
        let sc = cfg.build_scenario(split, seed)?;
        let (params, history) = trainer::train(&sc, &tc, seed)?;
        log::info!(
            "seed {seed}: {} steps, final HSC {}",
            history.steps.len(),
            history
                .final_eval()
                .map_or("n/a".to_string(), |e| format!("{:.4}", e.hsc))
        );
        Ok(SeedRun {
            seed,
            params,
            history,
        })
    })?;

    let mut evals = Vec::new();
    for r in &runs {
        let dir = seed_dir(&out, r.seed);
        create_dir(&dir)?;
        write(
            &dir.join(HISTORY_CSV),
            &report::history_csv(&HistoryRow::from_history(&r.history)),
        )?;
        model::save_checkpoint(dir.join(CHECKPOINT), &r.params)?;
        if let Some(e) = r.history.final_eval() {
            evals.push(EvalRow {
                label: format!("seed-{}", r.seed),
                result: e.clone(),
            });
        }
    }
    write(&out.join(EVAL_CSV), &report::eval_csv(&evals))?;
    Ok(RunOutput { out, runs, evals })
}

#[derive(Debug)]
pub struct AblationOutput {
    pub table: ComparisonTable,
    pub cells: Vec<Cell>,
}

/// Trains every (variant, task, seed) combination and writes the comparison
/// table (CSV and text) plus the per-run cells under `run.out`.
pub fn ablate(cfg: &ExperimentConfig) -> CliResult<AblationOutput> {
    let variants = cfg.variants()?;
    if variants.len() < 2 {
        return Err(CliError::Usage(
            "ablation needs at least two variants".into(),
        ));
    }
    let names: Vec<String> = variants.iter().map(|v| v.to_string()).collect();
    if names.iter().collect::<BTreeSet<_>>().len() != names.len() {
        return Err(CliError::Usage("ablation variants must be distinct".into()));
    }
    let tasks = cfg.tasks()?;
    let base = cfg
        .train_config()
        .map_err(|(_, msg)| CliError::Usage(msg))?;
    let out = cfg.run.out.clone();
    create_dir(&out)?;
    write(&out.join(RESOLVED_CONFIG), &cfg.to_toml())?;

    let mut jobs = Vec::new();
    for (vi, v) in variants.iter().enumerate() {
        for &task in &tasks {
            for &seed in &cfg.run.seeds {
                jobs.push((vi, v.clone(), task, seed));
            }
        }
    }
    log::info!("ablation: {} training runs", jobs.len());
    let cells = run_cells(cfg.run.threads, &jobs, |(vi, v, task, seed)| {
        let sc = cfg.build_scenario(*task, *seed)?;
        let (_, history) = trainer::train(&sc, &v.apply(&base), *seed)?;
        let e = history
            .final_eval()
            .ok_or_else(|| CliError::Usage("ablation needs labeled target data".into()))?;
        Ok(Cell {
            variant: names[*vi].clone(),
            task: *task,
            seed: *seed,
            os_star: e.os_star,
            unk: e.unk,
            hsc: e.hsc,
        })
    })?;

    let table = ComparisonTable::from_cells(&names, &tasks, &cells);
    write(&out.join(TABLE_CSV), &table.to_csv())?;
    write(&out.join(TABLE_TXT), &table.to_text())?;
    write(&out.join(CELLS_CSV), &report::cells_csv(&cells))?;
    Ok(AblationOutput { table, cells })
}

/// Labeled target features for checkpoint evaluation.
pub fn load_labeled(features: &Path) -> CliResult<DomainDataset> {
    Ok(scenario::load_features(features, true)?)
}

fn check_dims(params: &ModelParams, data: &DomainDataset, split: SplitSpec) -> CliResult<()> {
    if params.d_in() != data.dim() {
        return Err(CliError::Usage(format!(
            "checkpoint expects {}-dimensional features, file has {}",
            params.d_in(),
            data.dim()
        )));
    }
    if params.num_classes() != split.num_source_classes() {
        return Err(CliError::Usage(format!(
            "checkpoint has {} classes but split {split} implies {}",
            params.num_classes(),
            split.num_source_classes()
        )));
    }
    Ok(())
}

/// Scores a checkpoint on a labeled feature file.
pub fn eval_checkpoint(
    checkpoint: &Path,
    features: &Path,
    split: SplitSpec,
    threshold: f64,
    unk_mode: UnkMode,
) -> CliResult<EvalResult> {
    let params = model::load_checkpoint(checkpoint)?;
    let data = load_labeled(features)?;
    check_dims(&params, &data, split)?;
    let truth = data.labels.as_deref().unwrap_or_default();
    Ok(eval::evaluate(
        &params,
        &data.features,
        truth,
        &split.shared_classes(),
        threshold,
        unk_mode,
        ExecMode::default(),
    )?)
}

/// Evaluates a checkpoint at every threshold of `grid`.
pub fn sweep(
    checkpoint: &Path,
    features: &Path,
    split: SplitSpec,
    grid: &[f64],
    unk_mode: UnkMode,
) -> CliResult<Vec<EvalResult>> {
    let params = model::load_checkpoint(checkpoint)?;
    let data = load_labeled(features)?;
    check_dims(&params, &data, split)?;
    let truth = data.labels.as_deref().unwrap_or_default();
    Ok(eval::threshold_sweep(
        &params,
        &data.features,
        truth,
        &split.shared_classes(),
        grid,
        unk_mode,
        ExecMode::default(),
    )?)
}

/// Writes the configured synthetic scenario for `seed` to `out`.
pub fn gen(cfg: &ExperimentConfig, seed: u64, out: &Path) -> CliResult<ScenarioFiles> {
    let sc = cfg.build_scenario(cfg.split()?, seed)?;
    create_dir(out)?;
    Ok(scenario::save_scenario(out, &sc)?)
}

/// Parses a comma-separated threshold list such as `0,0.25,0.5`.
pub fn parse_grid(s: &str) -> CliResult<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("bad threshold '{t}' in grid")))
        })
        .collect()
}
