// SPDX-License-Identifier: MIT OR Apache-2.0

//! Shared fixtures: the GPT-2 vocabulary and a small random model over it.

#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;

use circuitbench_core::ioi::{make_minimal_pairs, Frame, MinimalPair, PoolVariant, WordPools};
use circuitbench_core::model::{ModelConfig, ModelWeights};
use circuitbench_core::tokenizer::BpeVocab;

pub fn assets() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../assets")
}

pub fn vocab() -> &'static BpeVocab {
    static V: OnceLock<BpeVocab> = OnceLock::new();
    V.get_or_init(|| {
        BpeVocab::load_vocab(&assets().join("gpt2/vocab.json"), &assets().join("gpt2/merges.txt")).unwrap()
    })
}

/// Full GPT-2 vocabulary, narrow residual stream: cheap but token-compatible.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 50257,
        n_ctx: 64,
        d_model: 32,
        n_layers: 3,
        n_heads: 4,
        layer_norm_eps: 1e-5,
    }
}

pub fn small_model() -> &'static ModelWeights {
    static M: OnceLock<ModelWeights> = OnceLock::new();
    M.get_or_init(|| ModelWeights::random(&small_config(), 11).unwrap())
}

pub fn pairs(n: usize, seed: u64) -> Vec<MinimalPair> {
    make_minimal_pairs(vocab(), &WordPools::default(), seed, n, PoolVariant::InDistribution, Frame::Canonical).unwrap()
}
