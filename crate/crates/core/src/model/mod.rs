// SPDX-License-Identifier: MIT OR Apache-2.0

//! GPT-2 decoder: weights, hookable forward pass and activation patching.

mod config;
mod forward;
mod hooks;
mod weights;

pub use config::ModelConfig;
pub use forward::{LayerTrace, RunTrace};
pub use hooks::{ActivationCache, HookSite, PatchSet, Position, SiteKind};
pub use weights::{LayerWeights, ModelWeights};

use thiserror::Error;

use crate::tensor_file::FormatError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("unexpected tensor {0}")]
    UnexpectedTensor(String),
    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("sequence length {len} outside 1..={max}")]
    SequenceLength { len: usize, max: usize },
    #[error("invalid hook site {0}")]
    InvalidSite(String),
    #[error("patch at {site}: expected shape {expected:?}, found {found:?}")]
    PatchShape {
        site: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("duplicate patch site {0}")]
    DuplicatePatch(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
}
