// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod rng;
pub mod tensor;
pub mod tensor_file;
pub mod tokenizer;
pub mod model;
pub mod ioi;
pub mod stats;
pub mod patching;
pub mod sae;
pub mod analysis;
pub mod robustness;
pub mod deployment;
pub mod report;
pub mod pipeline;
