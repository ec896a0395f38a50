use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::Utc;
use clap::{Args, Parser, Subcommand};
use pnpslab::commands::{self, MarkerInjection, TrainRequest};
use pnpslab::record::persist;
use pnpslab::{experiments, ExperimentConfig, ExperimentKind, ExperimentOutput, RunError, RunResult};
use pnpslab_core::datagen::TaskId;
use pnpslab_core::training::TrainMethod;

#[derive(Parser, Debug)]
#[command(name = "pnpslab", version, about = "Synthetic spurious-feature experiments")]
struct Cli {
    /// JSON experiment config; unknown keys are rejected.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory (overridden by PNPSLAB_OUT).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Replaces the config's seed list with this single seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads for independent runs.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct TaskArgs {
    #[arg(long, default_value = "A")]
    task: TaskId,
    #[arg(long, default_value_t = 0.5)]
    strength: f64,
    /// Inject the marker token into this fraction of examples.
    #[arg(long)]
    marker_prevalence: Option<f64>,
    /// Fraction of marked examples carrying `marker_target`.
    #[arg(long, default_value_t = 0.9)]
    marker_strength: f64,
    #[arg(long, default_value_t = 1)]
    marker_target: usize,
}

impl TaskArgs {
    fn marker(&self) -> Option<MarkerInjection> {
        self.marker_prevalence.map(|prevalence| MarkerInjection {
            prevalence,
            strength: self.marker_strength,
            target_label: self.marker_target,
        })
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample train/dev/test datasets as JSONL.
    Generate(TaskArgs),
    /// Exact and Monte-Carlo PN/PS report.
    Pnps,
    /// Train one model and save a checkpoint.
    Train {
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long, default_value = "erm")]
        method: TrainMethod,
        /// Feature used for group bookkeeping and debiasing.
        #[arg(long, default_value = "reserved")]
        feature: String,
        #[arg(long)]
        train_data: Option<PathBuf>,
        #[arg(long)]
        dev_data: Option<PathBuf>,
    },
    /// Probe a saved model for a feature (accuracy and online code).
    Probe {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "reserved")]
        feature: String,
    },
    /// Iterative null-space projection across tasks and seeds.
    Inlp,
    /// Extractability across bias strengths.
    Sweep,
    /// Train on one feature group, test on the other.
    CrossGroup,
    /// Extractability under every training method.
    MethodTable,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate(_) => "generate",
            Command::Pnps => ExperimentKind::PnpsReport.as_str(),
            Command::Train { .. } => "train",
            Command::Probe { .. } => "probe",
            Command::Inlp => ExperimentKind::InlpSweep.as_str(),
            Command::Sweep => ExperimentKind::BiasSweep.as_str(),
            Command::CrossGroup => ExperimentKind::CrossGroup.as_str(),
            Command::MethodTable => ExperimentKind::MethodTable.as_str(),
        }
    }

    fn experiment(&self) -> Option<ExperimentKind> {
        match self {
            Command::Pnps => Some(ExperimentKind::PnpsReport),
            Command::Inlp => Some(ExperimentKind::InlpSweep),
            Command::Sweep => Some(ExperimentKind::BiasSweep),
            Command::CrossGroup => Some(ExperimentKind::CrossGroup),
            Command::MethodTable => Some(ExperimentKind::MethodTable),
            _ => None,
        }
    }
}

fn load_config(cli: &Cli) -> RunResult<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(kind) = cli.command.experiment() {
        match cfg.experiment {
            Some(k) if k != kind => {
                return Err(RunError::Config(format!(
                    "config is for `{k}` but the `{}` subcommand was given",
                    cli.command.name()
                )))
            }
            _ => cfg.experiment = Some(kind),
        }
    }
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: &ExperimentConfig) -> PathBuf {
    if let Some(env) = std::env::var_os("PNPSLAB_OUT").filter(|v| !v.is_empty()) {
        return PathBuf::from(env);
    }
    cli.out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| Path::new("runs").join(cli.command.name()))
}

fn execute(cli: &Cli) -> RunResult<PathBuf> {
    let cfg = load_config(cli)?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(RunError::Config("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| RunError::Config(e.to_string()))?;
    }
    let dir = out_dir(cli, &cfg);
    let started = Utc::now();
    let output: ExperimentOutput = match &cli.command {
        Command::Generate(t) => commands::generate(&cfg, t.task, t.strength, t.marker(), &dir)?,
        Command::Train {
            task,
            method,
            feature,
            train_data,
            dev_data,
        } => {
            let req = TrainRequest {
                task: task.task,
                strength: task.strength,
                method: *method,
                feature: feature.clone(),
                marker: task.marker(),
                train_path: train_data.clone(),
                dev_path: dev_data.clone(),
            };
            commands::train_one(&cfg, &req, &dir)?
        }
        Command::Probe { model, data, feature } => commands::probe_one(&cfg, model, data, feature)?,
        other => experiments::run(other.experiment().expect("experiment subcommand"), &cfg)?,
    };
    let (record, _) = persist(&dir, cli.command.name(), &cfg, &output, started)?;
    for (k, v) in &output.summary {
        log::info!("{k} = {v}");
    }
    Ok(record)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(record) => {
            println!("{}", record.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
