// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pipeline errors and their process exit codes.

use std::path::PathBuf;

use thiserror::Error;

use crate::analysis::AnalysisError;
use crate::deployment::DeploymentError;
use crate::ioi::DatasetError;
use crate::model::ModelError;
use crate::patching::PatchingError;
use crate::report::PlotError;
use crate::robustness::RobustnessError;
use crate::sae::SaeError;
use crate::tokenizer::TokenizerError;

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING_ARTIFACT: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config field {field}: {message}")]
    Config { field: String, message: String },
    #[error("missing artifact {}: run `circuitbench {producer}` first ({reason})", path.display())]
    MissingArtifact {
        path: PathBuf,
        producer: &'static str,
        reason: &'static str,
    },
    #[error("output directory {} is in use by another invocation (lockfile {})", dir.display(), lock.display())]
    Locked { dir: PathBuf, lock: PathBuf },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Patching(#[from] PatchingError),
    #[error(transparent)]
    Sae(#[from] SaeError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Robustness(#[from] RobustnessError),
    #[error(transparent)]
    Deployment(#[from] DeploymentError),
    #[error(transparent)]
    Plot(#[from] PlotError),
}

fn model_numeric(e: &ModelError) -> bool {
    matches!(e, ModelError::NonFinite(_))
}

fn sae_numeric(e: &SaeError) -> bool {
    match e {
        SaeError::NonFinite(_) | SaeError::Diverged { .. } | SaeError::ZeroVariance => true,
        SaeError::Model(m) => model_numeric(m),
        _ => false,
    }
}

fn patching_numeric(e: &PatchingError) -> bool {
    match e {
        PatchingError::Model(m) => model_numeric(m),
        PatchingError::AllDegenerate => true,
        _ => false,
    }
}

fn analysis_numeric(e: &AnalysisError) -> bool {
    match e {
        AnalysisError::Model(m) => model_numeric(m),
        AnalysisError::Sae(s) => sae_numeric(s),
        _ => false,
    }
}

impl PipelineError {
    /// Non-finite values or a numerically degenerate computation.
    pub fn is_numeric(&self) -> bool {
        match self {
            PipelineError::Model(e) => model_numeric(e),
            PipelineError::Sae(e) => sae_numeric(e),
            PipelineError::Patching(e) => patching_numeric(e),
            PipelineError::Analysis(e) => analysis_numeric(e),
            PipelineError::Robustness(RobustnessError::Analysis(e)) => analysis_numeric(e),
            PipelineError::Robustness(RobustnessError::Patching(e)) => patching_numeric(e),
            PipelineError::Deployment(DeploymentError::Analysis(e)) => analysis_numeric(e),
            _ => false,
        }
    }

    /// 2: configuration; 3: missing upstream artifact; 4: numeric failure;
    /// 1: anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config { .. } => EXIT_CONFIG,
            PipelineError::MissingArtifact { .. } => EXIT_MISSING_ARTIFACT,
            e if e.is_numeric() => EXIT_NUMERIC,
            _ => EXIT_FAILURE,
        }
    }
}
