// SPDX-License-Identifier: MIT OR Apache-2.0

//! Shared fixtures: a synthetic checkpoint and a scaled-down config so the
//! whole pipeline runs in seconds.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use circuitbench_core::model::{ModelConfig, ModelWeights};
use circuitbench_core::pipeline::ExperimentConfig;

pub fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn small_model_config() -> ModelConfig {
    ModelConfig { vocab_size: 50257, n_ctx: 64, d_model: 32, n_layers: 3, n_heads: 4, layer_norm_eps: 1e-5 }
}

/// Write a synthetic checkpoint into `dir` and return the path.
pub fn write_checkpoint(dir: &Path) -> PathBuf {
    let path = dir.join("synthetic.bin");
    ModelWeights::random(&small_model_config(), 5).unwrap().save(&path).unwrap();
    path
}

/// Every size shrunk so `report-all` finishes quickly on the synthetic model.
pub fn small_config(weights: &Path, out: &Path) -> ExperimentConfig {
    let assets = workspace_root().join("assets");
    let mut c = ExperimentConfig {
        weights: weights.to_path_buf(),
        vocab: assets.join("gpt2/vocab.json"),
        merges: assets.join("gpt2/merges.txt"),
        pools: assets.join("pools.json"),
        output_dir: out.to_path_buf(),
        model: small_model_config(),
        ..Default::default()
    };
    c.baseline.n_prompts = 8;
    c.patching.n_pairs = 4;
    c.patching.sum_check_layer = 1;
    c.activations.n_train = 96;
    c.activations.n_heldout = 24;
    c.activations.site_layer = 2;
    c.sae.d_sae = 48;
    c.sae.steps = 60;
    c.sae.batch_size = 16;
    c.sae.l1_coefficient = 0.01;
    c.analysis.selectivity_per_name = 2;
    c.analysis.n_ablation_features = 4;
    c.analysis.ablation_per_name = 2;
    c.analysis.n_top_features = 3;
    c.analysis.fve_k = vec![1, 2, 5, 10];
    c.analysis.stratify_per_name = 2;
    c.analysis.stratify_distractors = 2;
    c.robustness.n_baseline = 8;
    c.robustness.n_pairs = 4;
    c.robustness.canonical_heads = vec![(2, 0), (1, 3)];
    c.robustness.per_name = 2;
    c.monitor.n_positive = 4;
    c.monitor.n_negative = 12;
    c.monitor.pool_per_name = 4;
    c.monitor.roc_features = 3;
    c.monitor.monitor_features = 2;
    c.monitor.table_threshold = 0.05;
    c.monitor.theta_max = 0.5;
    c.monitor.theta_step = 0.05;
    c
}

pub fn write_config(config: &ExperimentConfig, path: &Path) -> PathBuf {
    std::fs::write(path, config.to_json()).unwrap();
    path.to_path_buf()
}

pub fn circuitbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_circuitbench"))
        .args(args)
        .env_remove("CIRCUITBENCH_WEIGHTS")
        .env_remove("CIRCUITBENCH_THREADS")
        .current_dir(workspace_root())
        .output()
        .expect("binary runs")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}
