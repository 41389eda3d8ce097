// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment configuration: one JSON document with every size, seed, grid
//! and path the pipeline uses. Unknown fields are rejected; omitted fields
//! take the documented defaults. Relative paths resolve against the working
//! directory of the invocation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::deployment::{CostModel, MonitorConfig};
use crate::model::ModelConfig;
use crate::robustness::RobustnessConfig;
use crate::sae::SaeTrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSettings {
    pub n_prompts: usize,
}

impl Default for BaselineSettings {
    fn default() -> Self {
        Self { n_prompts: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchingSettings {
    pub n_pairs: usize,
    /// Layer whose all-heads patch is compared with its best single head.
    pub sum_check_layer: usize,
}

impl Default for PatchingSettings {
    fn default() -> Self {
        Self { n_pairs: 30, sum_check_layer: 9 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActivationSettings {
    pub n_train: usize,
    pub n_heldout: usize,
    /// SAE site: `resid_pre` of this layer at END (= `resid_post` of the
    /// layer before).
    pub site_layer: usize,
}

impl Default for ActivationSettings {
    fn default() -> Self {
        Self { n_train: 2000, n_heldout: 500, site_layer: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSettings {
    /// IO-role (and S-role) prompts per name for the selectivity table.
    pub selectivity_per_name: usize,
    /// Features ablated singly and cumulatively, and used as the selective
    /// FVE list.
    pub n_ablation_features: usize,
    /// IO-role prompts per name for the ablation study.
    pub ablation_per_name: usize,
    /// Features carried into stratification, robustness and monitoring.
    pub n_top_features: usize,
    pub fve_k: Vec<usize>,
    pub stratify_per_name: usize,
    pub stratify_distractors: usize,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        Self {
            selectivity_per_name: 30,
            n_ablation_features: 15,
            ablation_per_name: 20,
            n_top_features: 10,
            fve_k: vec![1, 2, 3, 5, 10, 15, 20, 30, 50, 100],
            stratify_per_name: 60,
            stratify_distractors: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub global_seed: u64,
    pub weights: PathBuf,
    pub vocab: PathBuf,
    pub merges: PathBuf,
    pub pools: PathBuf,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub baseline: BaselineSettings,
    pub patching: PatchingSettings,
    pub activations: ActivationSettings,
    /// `sae.seed` is mixed into the seed derived from `global_seed`.
    pub sae: SaeTrainConfig,
    pub analysis: AnalysisSettings,
    pub robustness: RobustnessConfig,
    pub monitor: MonitorConfig,
    pub cost: CostModel,
    pub sensitivity_p_err: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            global_seed: 0,
            weights: PathBuf::from("assets/gpt2/model.bin"),
            vocab: PathBuf::from("assets/gpt2/vocab.json"),
            merges: PathBuf::from("assets/gpt2/merges.txt"),
            pools: PathBuf::from("assets/pools.json"),
            output_dir: PathBuf::from("runs/default"),
            model: ModelConfig::gpt2_small(),
            baseline: BaselineSettings::default(),
            patching: PatchingSettings::default(),
            activations: ActivationSettings::default(),
            sae: SaeTrainConfig::default(),
            analysis: AnalysisSettings::default(),
            robustness: RobustnessConfig::default(),
            monitor: MonitorConfig::default(),
            cost: CostModel::default(),
            sensitivity_p_err: vec![0.005, 0.02, 0.05, 0.10, 0.20],
        }
    }
}

fn invalid(field: &str, message: impl Into<String>) -> PipelineError {
    PipelineError::Config { field: field.to_string(), message: message.into() }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(text).map_err(|e| invalid("<document>", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid("--config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Check every field against its invariants; the error names the field.
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.model.validate().map_err(|e| invalid("model", e.to_string()))?;
        let layers = self.model.n_layers;
        let positive = [
            ("baseline.n_prompts", self.baseline.n_prompts),
            ("patching.n_pairs", self.patching.n_pairs),
            ("activations.n_train", self.activations.n_train),
            ("activations.n_heldout", self.activations.n_heldout),
            ("analysis.selectivity_per_name", self.analysis.selectivity_per_name),
            ("analysis.n_ablation_features", self.analysis.n_ablation_features),
            ("analysis.ablation_per_name", self.analysis.ablation_per_name),
            ("analysis.n_top_features", self.analysis.n_top_features),
            ("analysis.stratify_per_name", self.analysis.stratify_per_name),
            ("analysis.stratify_distractors", self.analysis.stratify_distractors),
            ("robustness.n_baseline", self.robustness.n_baseline),
            ("robustness.n_pairs", self.robustness.n_pairs),
            ("robustness.per_name", self.robustness.per_name),
            ("monitor.n_positive", self.monitor.n_positive),
            ("monitor.n_negative", self.monitor.n_negative),
            ("monitor.pool_per_name", self.monitor.pool_per_name),
            ("monitor.roc_features", self.monitor.roc_features),
            ("monitor.monitor_features", self.monitor.monitor_features),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(invalid(field, "must be at least 1"));
            }
        }
        if self.activations.n_heldout < 2 {
            return Err(invalid("activations.n_heldout", "must be at least 2"));
        }
        if self.activations.site_layer >= layers {
            return Err(invalid("activations.site_layer", format!("must be below n_layers = {layers}")));
        }
        if self.patching.sum_check_layer >= layers {
            return Err(invalid("patching.sum_check_layer", format!("must be below n_layers = {layers}")));
        }
        for &(l, h) in &self.robustness.canonical_heads {
            if l >= layers || h >= self.model.n_heads {
                return Err(invalid("robustness.canonical_heads", format!("head ({l}, {h}) is outside the model")));
            }
        }
        self.sae.validate().map_err(|e| invalid("sae", e.to_string()))?;
        if let Some(&k) = self.analysis.fve_k.iter().find(|&&k| k == 0 || k > self.sae.d_sae) {
            return Err(invalid("analysis.fve_k", format!("K = {k} outside 1..={}", self.sae.d_sae)));
        }
        if self.analysis.fve_k.is_empty() {
            return Err(invalid("analysis.fve_k", "must not be empty"));
        }
        let m = &self.monitor;
        if !(m.table_threshold >= 0.0 && m.table_threshold.is_finite()) {
            return Err(invalid("monitor.table_threshold", "must be finite and ≥ 0"));
        }
        if !(m.theta_min >= 0.0 && m.theta_max >= m.theta_min && m.theta_max.is_finite()) {
            return Err(invalid("monitor.theta_min", "need 0 ≤ theta_min ≤ theta_max"));
        }
        if !(m.theta_step > 0.0 && m.theta_step <= 1.0) {
            return Err(invalid("monitor.theta_step", "must lie in (0, 1]"));
        }
        self.cost.validate().map_err(|e| invalid("cost", e.to_string()))?;
        if self.sensitivity_p_err.is_empty() || self.sensitivity_p_err.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(invalid("sensitivity_p_err", "must be a non-empty list of probabilities"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
