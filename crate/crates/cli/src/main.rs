// SPDX-License-Identifier: MIT OR Apache-2.0

//! `circuitbench`: run one experiment stage, or the whole pipeline, against
//! one output directory.
//!
//! Exit codes: 0 success, 1 other failure (including a locked output
//! directory), 2 invalid configuration, 3 missing upstream artifact,
//! 4 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use circuitbench_core::pipeline::{ExperimentConfig, Pipeline, PipelineError, Stage, EXIT_CONFIG};

#[derive(Debug, Parser)]
#[command(name = "circuitbench", version, about = "Seeded IOI circuit, SAE and monitor-deployment experiments")]
struct Cli {
    /// JSON experiment config; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override `global_seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the model checkpoint path.
    #[arg(long, global = true, env = "CIRCUITBENCH_WEIGHTS")]
    weights: Option<PathBuf>,
    /// Worker threads for parallel sweeps (default: all cores).
    #[arg(long, global = true, env = "CIRCUITBENCH_THREADS")]
    threads: Option<usize>,
    /// Omit wall-clock times and timestamps so reruns are byte-identical.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Clean IOI logit difference and accuracy.
    Baseline,
    /// Residual-stream activation patching over layers × positions.
    PatchResid,
    /// Per-head activation patching at END.
    PatchHeads,
    /// Collect SAE training and held-out activations.
    GenActivations,
    /// Train the sparse autoencoder.
    TrainSae,
    /// Per-name feature selectivity table.
    Selectivity,
    /// Single and cumulative feature ablations.
    Ablate,
    /// Fraction of variance explained by top-K features.
    Fve,
    /// Selectivity vs causal effect with distractor names.
    Stratify,
    /// Circuit and feature behaviour under distribution shift.
    Robustness,
    /// Monitor measurements and per-feature ROC curves.
    MonitorRoc,
    /// Monitor composition table.
    ComposeTable,
    /// Expected-cost sweep and deployment recommendation.
    DeploySweep,
    /// Cost-optimum sensitivity to the error base rate.
    Sensitivity,
    /// Run every stale stage, then write figures and the manifest.
    ReportAll,
}

impl Command {
    fn stage(&self) -> Stage {
        match self {
            Command::Baseline => Stage::Baseline,
            Command::PatchResid => Stage::PatchResid,
            Command::PatchHeads => Stage::PatchHeads,
            Command::GenActivations => Stage::GenActivations,
            Command::TrainSae => Stage::TrainSae,
            Command::Selectivity => Stage::Selectivity,
            Command::Ablate => Stage::Ablate,
            Command::Fve => Stage::Fve,
            Command::Stratify => Stage::Stratify,
            Command::Robustness => Stage::Robustness,
            Command::MonitorRoc => Stage::MonitorRoc,
            Command::ComposeTable => Stage::ComposeTable,
            Command::DeploySweep => Stage::DeploySweep,
            Command::Sensitivity => Stage::Sensitivity,
            Command::ReportAll => Stage::ReportAll,
        }
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.global_seed = seed;
    }
    if let Some(out) = cli.out {
        config.output_dir = out;
    }
    if let Some(weights) = cli.weights {
        config.weights = weights;
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(PipelineError::Config { field: "--threads".into(), message: "must be at least 1".into() });
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| PipelineError::Config { field: "--threads".into(), message: e.to_string() })?;
    }
    let pipeline = Pipeline::open(config, cli.deterministic)?;
    let record = pipeline.run(cli.command.stage())?;
    println!(
        "{}: {} outputs in {} (config {})",
        record.experiment,
        record.outputs.len(),
        pipeline.out_dir().display(),
        &record.config_hash[..12]
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
