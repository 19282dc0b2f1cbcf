use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use unida_cli::experiment::{self, Overrides};
use unida_cli::{report, CliError, CliResult, ExperimentConfig};
use unida_core::eval::UnkMode;
use unida_core::losses::OemMode;
use unida_core::scenario::SplitSpec;

/// Universal domain adaptation experiments on embedded features.
#[derive(Parser)]
#[command(name = "unida", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per seed and write history, checkpoint and evaluation.
    Run(RunArgs),
    /// Train every variant on every task and seed; write a comparison table.
    Ablate(RunArgs),
    /// Score a checkpoint on a labeled feature file.
    Eval(EvalArgs),
    /// Write a synthetic scenario to feature files.
    Gen(GenArgs),
    /// Score a checkpoint across rejection thresholds.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// train this seed only
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    oem: Option<OemMode>,
    /// worker threads for independent runs (0 = all cores)
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// labeled target feature file
    #[arg(long)]
    features: PathBuf,
    /// shared/source-private/target-private
    #[arg(long)]
    split: SplitSpec,
    #[arg(long, default_value = "pooled")]
    unk: UnkMode,
    /// write the CSV here instead of only printing
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CheckpointArgs,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CheckpointArgs,
    /// comma-separated thresholds; defaults to 0, 0.05, ..., 1
    #[arg(long)]
    grid: Option<String>,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn load(args: &RunArgs) -> CliResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    Overrides {
        seed: args.seed,
        out: args.out.clone(),
        oem: args.oem,
        threads: args.threads,
    }
    .apply(&mut cfg);
    Ok(cfg)
}

fn emit(out: Option<&Path>, csv: &str) -> CliResult<()> {
    if let Some(path) = out {
        std::fs::write(path, csv).map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    }
    Ok(())
}

fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Run(args) => {
            let out = experiment::run(&load(&args)?)?;
            for row in &out.evals {
                println!("[{}]\n{}", row.label, row.result);
            }
            println!("wrote {}", out.out.display());
        }
        Command::Ablate(args) => {
            let cfg = load(&args)?;
            let out = experiment::ablate(&cfg)?;
            print!("{}", out.table.to_text());
            println!("wrote {}", cfg.run.out.display());
        }
        Command::Eval(args) => {
            let c = &args.common;
            let r = experiment::eval_checkpoint(
                &c.checkpoint,
                &c.features,
                c.split,
                args.threshold,
                c.unk,
            )?;
            print!("{r}");
            let row = report::EvalRow {
                label: c.features.display().to_string().replace(',', "_"),
                result: r,
            };
            emit(c.out.as_deref(), &report::eval_csv(&[row]))?;
        }
        Command::Sweep(args) => {
            let c = &args.common;
            let grid = match &args.grid {
                Some(g) => experiment::parse_grid(g)?,
                None => ExperimentConfig::default().eval.grid,
            };
            let results = experiment::sweep(&c.checkpoint, &c.features, c.split, &grid, c.unk)?;
            let rows: Vec<report::EvalRow> = results
                .into_iter()
                .map(|r| report::EvalRow {
                    label: "sweep".into(),
                    result: r,
                })
                .collect();
            let csv = report::eval_csv(&rows);
            print!("{csv}");
            emit(c.out.as_deref(), &csv)?;
        }
        Command::Gen(args) => {
            let cfg = ExperimentConfig::load(&args.config)?;
            let files = experiment::gen(&cfg, args.seed, &args.out)?;
            println!("wrote {}", files.manifest.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
