// SPDX-License-Identifier: MIT OR Apache-2.0

//! Named, seeded, resumable experiment stages over one output directory.
//!
//! Every stage derives its randomness from `global_seed` via
//! [`derive_seed`](crate::rng::derive_seed) with a fixed stage label, writes
//! CSV/JSON artifacts, and commits a [`RunRecord`] last. A stage's config hash
//! covers the config fields it reads plus the hashes of the stages it
//! consumes, so `report-all` re-runs exactly the stages whose inputs changed.

mod config;
mod error;

use std::collections::BTreeMap;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use config::{ActivationSettings, AnalysisSettings, BaselineSettings, ExperimentConfig, PatchingSettings};
pub use error::{PipelineError, EXIT_CONFIG, EXIT_FAILURE, EXIT_MISSING_ARTIFACT, EXIT_NUMERIC};

use crate::analysis::{ablation_study, fve_report, selectivity_table, stratify, AblationStudy, FeatureProbe, FveReport, SelectivityTable, StratificationReport};
use crate::deployment::{
    composition_table, cost_sweep, measure_monitors, roc_table, sensitivity, sensitivity_csv, Condition, CostSweep, MonitorKind,
    MonitorMeasurements, RocCurve,
};
use crate::ioi::{balanced_role_prompts, make_minimal_pairs, sample_batch, Frame, IoiPrompt, PoolVariant, StructureMix, WordPools};
use crate::model::{ModelWeights};
use crate::patching::{baseline, head_sweep, resid_sweep, HeadSweep, ResidSweep};
use crate::report::{plot_curves, plot_heatmap, sha256_bytes, Axes, DirLock, HeatmapStyle, ManifestEntry, RunRecord, Series, SeriesStyle, StageOutputs};
use crate::rng::derive_seed;
use crate::robustness::{run_suite, RobustnessReport};
use crate::sae::{collect_end_activations, evaluate, train_with, ActivationDataset, DatasetProvenance, SaeParams, SaeTrainConfig};
use crate::tensor::Tensor;
use crate::tokenizer::BpeVocab;


// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Baseline,
    PatchResid,
    PatchHeads,
    GenActivations,
    TrainSae,
    Selectivity,
    Ablate,
    Fve,
    Stratify,
    Robustness,
    MonitorRoc,
    ComposeTable,
    DeploySweep,
    Sensitivity,
    ReportAll,
}

impl Stage {
    /// Every stage `report-all` runs, in dependency order.
    pub const PIPELINE: [Stage; 14] = [
        Stage::Baseline,
        Stage::PatchResid,
        Stage::PatchHeads,
        Stage::GenActivations,
        Stage::TrainSae,
        Stage::Selectivity,
        Stage::Ablate,
        Stage::Fve,
        Stage::Stratify,
        Stage::Robustness,
        Stage::MonitorRoc,
        Stage::ComposeTable,
        Stage::DeploySweep,
        Stage::Sensitivity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Baseline => "baseline",
            Stage::PatchResid => "patch-resid",
            Stage::PatchHeads => "patch-heads",
            Stage::GenActivations => "gen-activations",
            Stage::TrainSae => "train-sae",
            Stage::Selectivity => "selectivity",
            Stage::Ablate => "ablate",
            Stage::Fve => "fve",
            Stage::Stratify => "stratify",
            Stage::Robustness => "robustness",
            Stage::MonitorRoc => "monitor-roc",
            Stage::ComposeTable => "compose-table",
            Stage::DeploySweep => "deploy-sweep",
            Stage::Sensitivity => "sensitivity",
            Stage::ReportAll => "report-all",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::PIPELINE.into_iter().chain([Stage::ReportAll]).find(|s| s.name() == name)
    }

    /// Stages whose artifacts this stage reads.
    pub fn dependencies(self) -> &'static [Stage] {
        match self {
            Stage::Baseline | Stage::PatchResid | Stage::PatchHeads | Stage::GenActivations => &[],
            Stage::TrainSae => &[Stage::GenActivations],
            Stage::Selectivity => &[Stage::TrainSae],
            Stage::Ablate | Stage::Stratify | Stage::Robustness | Stage::MonitorRoc => &[Stage::TrainSae, Stage::Selectivity],
            Stage::Fve => &[Stage::GenActivations, Stage::TrainSae, Stage::Selectivity],
            Stage::ComposeTable | Stage::DeploySweep | Stage::Sensitivity => &[Stage::MonitorRoc],
            Stage::ReportAll => &Self::PIPELINE,
        }
    }

    /// The artifact named in missing-dependency errors.
    pub fn primary_artifact(self) -> &'static str {
        match self {
            Stage::Baseline => files::BASELINE_JSON,
            Stage::PatchResid => files::RESID_JSON,
            Stage::PatchHeads => files::HEADS_JSON,
            Stage::GenActivations => files::ACTIVATIONS,
            Stage::TrainSae => files::SAE,
            Stage::Selectivity => files::SELECTIVITY_JSON,
            Stage::Ablate => files::ABLATION_JSON,
            Stage::Fve => files::FVE_JSON,
            Stage::Stratify => files::STRATIFY_JSON,
            Stage::Robustness => files::ROBUSTNESS_JSON,
            Stage::MonitorRoc => files::MEASUREMENTS_JSON,
            Stage::ComposeTable => files::COMPOSITION_JSON,
            Stage::DeploySweep => files::RECOMMENDATION_JSON,
            Stage::Sensitivity => files::SENSITIVITY_JSON,
            Stage::ReportAll => files::MANIFEST_JSON,
        }
    }

    fn needs_model(self) -> bool {
        matches!(
            self,
            Stage::Baseline
                | Stage::PatchResid
                | Stage::PatchHeads
                | Stage::GenActivations
                | Stage::Selectivity
                | Stage::Ablate
                | Stage::Stratify
                | Stage::Robustness
                | Stage::MonitorRoc
        )
    }
}

/// Artifact file names, relative to the output directory.
pub mod files {
    pub const BASELINE_JSON: &str = "baseline.json";
    pub const BASELINE_CSV: &str = "baseline.csv";
    pub const RESID_JSON: &str = "resid_sweep.json";
    pub const RESID_POSITIONAL_CSV: &str = "resid_sweep_positional.csv";
    pub const RESID_ROLES_CSV: &str = "resid_sweep_roles.csv";
    pub const HEADS_JSON: &str = "head_sweep.json";
    pub const HEADS_CSV: &str = "head_sweep.csv";
    pub const ACTIVATIONS: &str = "activations.bin";
    pub const HELDOUT_ACTIVATIONS: &str = "activations_heldout.bin";
    pub const SAE: &str = "sae.bin";
    pub const SAE_LOG_CSV: &str = "sae_training.csv";
    pub const SAE_METRICS_JSON: &str = "sae_metrics.json";
    pub const SELECTIVITY_JSON: &str = "selectivity.json";
    pub const SELECTIVITY_CSV: &str = "selectivity.csv";
    pub const ABLATION_JSON: &str = "ablation.json";
    pub const ABLATION_SINGLE_CSV: &str = "ablation_single.csv";
    pub const ABLATION_CUMULATIVE_CSV: &str = "ablation_cumulative.csv";
    pub const FVE_JSON: &str = "fve.json";
    pub const FVE_CSV: &str = "fve.csv";
    pub const STRATIFY_JSON: &str = "stratification.json";
    pub const STRATIFY_CSV: &str = "stratification.csv";
    pub const ROBUSTNESS_JSON: &str = "robustness.json";
    pub const ROBUSTNESS_HEADS_CSV: &str = "robustness_heads.csv";
    pub const ROBUSTNESS_FEATURES_CSV: &str = "robustness_features.csv";
    pub const ROBUSTNESS_DOMINANT_CSV: &str = "robustness_dominant.csv";
    pub const ROBUSTNESS_RETENTION_CSV: &str = "robustness_retention.csv";
    pub const MEASUREMENTS_JSON: &str = "monitor_measurements.json";
    pub const ROC_JSON: &str = "roc.json";
    pub const ROC_CSV: &str = "roc.csv";
    pub const COMPOSITION_JSON: &str = "composition.json";
    pub const COMPOSITION_CSV: &str = "composition.csv";
    pub const SWEEP_JSON: &str = "deploy_sweep.json";
    pub const SWEEP_CSV: &str = "deploy_sweep.csv";
    pub const RECOMMENDATION_JSON: &str = "recommendation.json";
    pub const SENSITIVITY_JSON: &str = "sensitivity.json";
    pub const SENSITIVITY_CSV: &str = "sensitivity.csv";
    pub const MANIFEST_JSON: &str = "manifest.json";
    pub const FIGURES: [&str; 6] = [
        "figures/resid_patching.svg",
        "figures/head_patching.svg",
        "figures/fve_curves.svg",
        "figures/selectivity_vs_causal_drop.svg",
        "figures/robustness_retention.svg",
        "figures/cost_vs_threshold.svg",
    ];
}

// ---------------------------------------------------------------------------
// Stage payloads
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeSummary {
    pub d_model: usize,
    pub d_sae: usize,
    pub n_train: usize,
    pub l0: f64,
    pub variance_explained: f64,
    pub dead_features: usize,
    pub final_loss: f64,
    pub decoder_norm_error: f64,
    /// Whether the 10-step moving average of the loss decreases over the
    /// first 100 steps (checked on consecutive non-overlapping windows).
    pub early_loss_decreasing: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocEntry {
    pub name: String,
    pub feature: usize,
    pub condition: Condition,
    pub curve: RocCurve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: Vec<ManifestEntry>,
}

/// Outcome of one stage within `report-all`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageStatus {
    pub stage: Stage,
    /// False when an up-to-date record let the stage be skipped.
    pub ran: bool,
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

/// An opened output directory plus lazily loaded shared inputs.
pub struct Pipeline {
    config: ExperimentConfig,
    out_dir: PathBuf,
    deterministic: bool,
    _lock: DirLock,
    vocab: OnceLock<BpeVocab>,
    pools: OnceLock<WordPools>,
    weights: OnceLock<ModelWeights>,
}

impl Pipeline {
    /// Validate the config and take the output directory's lock.
    pub fn open(config: ExperimentConfig, deterministic: bool) -> Result<Self, PipelineError> {
        config.validate()?;
        let out_dir = config.output_dir.clone();
        let lock = DirLock::acquire(&out_dir).map_err(|e| {
            if e.kind() == io::ErrorKind::AlreadyExists {
                PipelineError::Locked { dir: out_dir.clone(), lock: out_dir.join(crate::report::record::LOCK_FILE) }
            } else {
                PipelineError::Io { path: out_dir.clone(), source: e }
            }
        })?;
        Ok(Self {
            config,
            out_dir,
            deterministic,
            _lock: lock,
            vocab: OnceLock::new(),
            pools: OnceLock::new(),
            weights: OnceLock::new(),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    /// Named sub-seed of the global seed.
    pub fn seed(&self, label: &str) -> u64 {
        derive_seed(self.config.global_seed, label)
    }

    // -- hashing -------------------------------------------------------------

    fn config_slice(&self, stage: Stage) -> serde_json::Value {
        let c = &self.config;
        let inputs = json!({
            "global_seed": c.global_seed,
            "weights": c.weights,
            "vocab": c.vocab,
            "merges": c.merges,
            "pools": c.pools,
            "model": c.model,
        });
        match stage {
            Stage::Baseline => json!([inputs, c.baseline]),
            Stage::PatchResid => json!([inputs, c.patching.n_pairs]),
            Stage::PatchHeads => json!([inputs, c.patching]),
            Stage::GenActivations => json!([inputs, c.activations]),
            Stage::TrainSae => json!(c.sae),
            Stage::Selectivity => json!([inputs, c.analysis.selectivity_per_name, c.activations.site_layer]),
            Stage::Ablate => json!([inputs, c.analysis.n_ablation_features, c.analysis.ablation_per_name]),
            Stage::Fve => json!([c.analysis.fve_k, c.analysis.n_ablation_features]),
            Stage::Stratify => json!([
                inputs,
                c.analysis.n_top_features,
                c.analysis.stratify_per_name,
                c.analysis.stratify_distractors
            ]),
            Stage::Robustness => json!([inputs, c.analysis.n_top_features, c.robustness]),
            Stage::MonitorRoc => json!([inputs, c.analysis.n_top_features, c.monitor, c.cost.heuristic_noise]),
            Stage::ComposeTable => json!(c.monitor),
            Stage::DeploySweep => json!([c.monitor, c.cost]),
            Stage::Sensitivity => json!([c.monitor, c.cost, c.sensitivity_p_err]),
            Stage::ReportAll => json!([c.robustness.canonical_heads]),
        }
    }

    /// Hash of the config fields `stage` reads and of its inputs' hashes.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let deps: Vec<String> = stage.dependencies().iter().map(|&d| self.stage_hash(d)).collect();
        let doc = json!({ "stage": stage.name(), "config": self.config_slice(stage), "inputs": deps });
        sha256_bytes(doc.to_string().as_bytes())
    }

    /// Whether `stage` has a record matching the current config whose outputs
    /// are intact.
    pub fn is_current(&self, stage: Stage) -> bool {
        RunRecord::load(&self.out_dir, stage.name()).is_some_and(|r| r.is_current(&self.out_dir, &self.stage_hash(stage)))
    }

    fn require(&self, stage: Stage) -> Result<(), PipelineError> {
        for &dep in stage.dependencies() {
            let reason = match RunRecord::load(&self.out_dir, dep.name()) {
                None => "not produced yet",
                Some(r) if !r.is_current(&self.out_dir, &self.stage_hash(dep)) => {
                    "stale: produced under a different config or modified since"
                }
                Some(_) => continue,
            };
            return Err(PipelineError::MissingArtifact {
                path: self.out_dir.join(dep.primary_artifact()),
                producer: dep.name(),
                reason,
            });
        }
        Ok(())
    }

    // -- shared inputs -------------------------------------------------------

    fn check_exists(&self, field: &str, path: &Path) -> Result<(), PipelineError> {
        if path.is_file() {
            Ok(())
        } else {
            Err(PipelineError::Config { field: field.into(), message: format!("file not found: {}", path.display()) })
        }
    }

    fn vocab(&self) -> Result<&BpeVocab, PipelineError> {
        if let Some(v) = self.vocab.get() {
            return Ok(v);
        }
        let v = BpeVocab::load_vocab(&self.config.vocab, &self.config.merges)?;
        Ok(self.vocab.get_or_init(|| v))
    }

    fn pools(&self) -> Result<&WordPools, PipelineError> {
        if let Some(p) = self.pools.get() {
            return Ok(p);
        }
        let p = WordPools::load(&self.config.pools)?;
        p.validate(self.vocab()?)?;
        Ok(self.pools.get_or_init(|| p))
    }

    fn weights(&self) -> Result<&ModelWeights, PipelineError> {
        if let Some(w) = self.weights.get() {
            return Ok(w);
        }
        log(Stage::Baseline, &format!("loading weights from {}", self.config.weights.display()));
        let w = ModelWeights::load(&self.config.weights, &self.config.model)?;
        Ok(self.weights.get_or_init(|| w))
    }

    fn load_json<T: DeserializeOwned>(&self, name: &str) -> Result<T, PipelineError> {
        let path = self.out_dir.join(name);
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|source| PipelineError::Json { path, source })
    }

    fn load_sae(&self) -> Result<SaeParams, PipelineError> {
        Ok(SaeParams::load(&self.out_dir.join(files::SAE))?)
    }

    fn timestamp(&self) -> Option<u64> {
        (!self.deterministic).then(|| SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()))
    }

    // -- running ---------------------------------------------------------------

    /// Run one stage (or, for [`Stage::ReportAll`], the whole pipeline).
    pub fn run(&self, stage: Stage) -> Result<RunRecord, PipelineError> {
        if stage == Stage::ReportAll {
            self.run_all()?;
            return RunRecord::load(&self.out_dir, stage.name()).ok_or_else(|| PipelineError::Io {
                path: RunRecord::path(&self.out_dir, stage.name()),
                source: io::Error::other("record not written"),
            });
        }
        self.execute(stage)
    }

    fn execute(&self, stage: Stage) -> Result<RunRecord, PipelineError> {
        self.require(stage)?;
        if stage.needs_model() {
            self.check_exists("weights", &self.config.weights)?;
            self.check_exists("vocab", &self.config.vocab)?;
            self.check_exists("merges", &self.config.merges)?;
            self.check_exists("pools", &self.config.pools)?;
        }
        let start = Instant::now();
        log(stage, "running");
        let mut out = StageOutputs::begin(&self.out_dir, stage.name()).map_err(io_err(&self.out_dir))?;
        match stage {
            Stage::Baseline => self.stage_baseline(&mut out),
            Stage::PatchResid => self.stage_patch_resid(&mut out),
            Stage::PatchHeads => self.stage_patch_heads(&mut out),
            Stage::GenActivations => self.stage_gen_activations(&mut out),
            Stage::TrainSae => self.stage_train_sae(&mut out),
            Stage::Selectivity => self.stage_selectivity(&mut out),
            Stage::Ablate => self.stage_ablate(&mut out),
            Stage::Fve => self.stage_fve(&mut out),
            Stage::Stratify => self.stage_stratify(&mut out),
            Stage::Robustness => self.stage_robustness(&mut out),
            Stage::MonitorRoc => self.stage_monitor_roc(&mut out),
            Stage::ComposeTable => self.stage_compose(&mut out),
            Stage::DeploySweep => self.stage_deploy_sweep(&mut out),
            Stage::Sensitivity => self.stage_sensitivity(&mut out),
            Stage::ReportAll => self.stage_figures(&mut out),
        }?;
        let wall = (!self.deterministic).then(|| start.elapsed().as_secs_f64());
        let record = out
            .commit(&self.stage_hash(stage), self.config.global_seed, wall)
            .map_err(io_err(&self.out_dir))?;
        log(stage, &format!("done ({} outputs, {:.1}s)", record.outputs.len(), start.elapsed().as_secs_f64()));
        Ok(record)
    }

    /// Every stage in order, skipping those with an up-to-date record, then
    /// the figures and the combined manifest.
    pub fn run_all(&self) -> Result<Vec<StageStatus>, PipelineError> {
        let mut status = Vec::new();
        for stage in Stage::PIPELINE {
            let ran = !self.is_current(stage);
            if ran {
                self.execute(stage)?;
            } else {
                log(stage, "up to date, skipped");
            }
            status.push(StageStatus { stage, ran });
        }
        self.execute(Stage::ReportAll)?;
        status.push(StageStatus { stage: Stage::ReportAll, ran: true });
        Ok(status)
    }

    // -- stages ----------------------------------------------------------------

    fn in_dist_prompts(&self, label: &str, n: usize) -> Result<Vec<IoiPrompt>, PipelineError> {
        Ok(sample_batch(
            self.vocab()?,
            self.pools()?,
            self.seed(label),
            n,
            PoolVariant::InDistribution,
            Frame::Canonical,
            StructureMix::Uniform,
        )?)
    }

    fn stage_baseline(&self, out: &mut StageOutputs) -> Result<(), PipelineError> {
        let prompts = self.in_dist_prompts("baseline", self.config.baseline.n_prompts)?;
        let report = baseline(self.weights()?, &prompts)?;
        let mut csv = String::from("prompt,io_name,s_name,logit_diff\n");
        for (i, (p, d)) in prompts.iter().zip(&report.logit_diffs).enumerate() {
            csv.push_str(&format!("{i},{},{},{d:.6}\n", p.io_name, p.s_name));
        }
        self.write(out, files::BASELINE_CSV, csv.as_bytes())?;
        self.write_json(out, files::BASELINE_JSON, &report)
    }

    fn pairs(&self) -> Result<Vec<crate::ioi::MinimalPair>, PipelineError> {
        Ok(make_minimal_pairs(
            self.vocab()?,
            self.pools()?,
            self.seed("pairs"),
            self.config.patching.n_pairs,
            PoolVariant::InDistribution,
            Frame::Canonical,
        )?)
    }

    fn stage_patch_resid(&self, out: &mut StageOutputs) -> Result<(), PipelineError> {
        let sweep: ResidSweep = resid_sweep(self.weights()?, &self.pairs()?)?;
        self.write(out, files::RESID_POSITIONAL_CSV, sweep.positional.to_csv().as_bytes())?;
        self.write(out, files::RESID_ROLES_CSV, sweep.roles.to_csv().as_bytes())?;
        self.write_json(out, files::RESID_JSON, &sweep)
    }

    fn stage_patch_heads(&self, out: &mut StageOutputs) -> Result<(), PipelineError> {
        let sweep: HeadSweep = head_sweep(self.weights()?, &self.pairs()?, self.config.patching.sum_check_layer)?;
        self.write(out, files::HEADS_CSV, sweep.grid.to_csv().as_bytes())?;
        self.write_json(out, files::HEADS_JSON, &sweep)
    }

    fn stage_gen_activations(&self, out: &mut StageOutputs) -> Result<(), PipelineError> {
        let a = &self.config.activations;
        for (label, n, name) in [("activations", a.n_train, files::ACTIVATIONS), ("activations-heldout", a.n_heldout, files::HELDOUT_ACTIVATIONS)] {
            let prompts = self.in_dist_prompts(label, n)?;
            let jobs: Vec<(&[u32], usize)> = prompts.iter().map(|p| (p.token_ids.as_slice(), p.end())).collect();
            let rows = collect_end_activations(self.weights()?, &jobs, a.site_layer)?;
            let d = self.config.model.d_model;
            let tensor = Tensor::new(vec![n, d], rows).map_err(|e| PipelineError::Sae(crate::sae::SaeError::Io(e.to_string())))?;
            let provenance = DatasetProvenance {
                seed: self.seed(label),
                pool_variant: "in_distribution".into(),
                resid_pre_layer: a.site_layer,
                n_prompts: n,
            };
            let ds = ActivationDataset::new(tensor, provenance)?;
            let path = out.path(name);
            ds.save(&path)?;
            out.register(name).map_err(io_err(&path))?;
            let sidecar = ActivationDataset::provenance_path(&path);
            let sidecar_name = sidecar.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            out.register(&sidecar_name).map_err(io_err(&sidecar))?;
        }
        Ok(())
    }

    fn stage_train_sae(&self, out: &mut StageOutputs) -> Result<(), PipelineError> {
        let ds = ActivationDataset::load(&self.out_dir.join(files::ACTIVATIONS))?;
        let cfg = SaeTrainConfig {
            seed: derive_seed(self.seed("train-sae"), &self.config.sae.seed.to_string()),
            ..self.config.sae.clone()
        };
        let every = (cfg.steps / 10).max(1);
        let (params, log_) = train_with(&ds, &cfg, |s, _| {
            if (s.step + 1) % every == 0 {
                log(Stage::TrainSae, &format!("step {}/{}: loss {:.4} mse {:.4} l0 {:.1}", s.step + 1, cfg.steps, s.loss, s.mse, s.l0));
            }
        })?;
        let metrics = evaluate(&params, &ds)?;
        let ma = log_.moving_average(10);
        let early: Vec<f64> = ma.iter().take(100).step_by(10).copied().collect();
        let summary = SaeSummary {
            d_model: params.d_model(),
            d_sae: params.d_sae(),
            n_train: ds.len(),
            l0: metrics.l0,
            variance_explained: metrics.variance_explained,
            dead_features: metrics.dead_features,
            final_loss: log_.steps.last().map_or(f64::NAN, |s| s.loss),
            decoder_norm_error: params.decoder_norm_error(),
            early_loss_decreasing: early.len() >= 2 && early.windows(2).all(|w| w[1] < w[0]),
        };
        let path = out.path(files::SAE);
        params.save(&path)?;
        out.register(files::SAE).map_err(io_err(&path))?;
        self.write(out, files::SAE_LOG_CSV, log_.to_csv().as_bytes())?;
        self.write_json(out, files::SAE_METRICS_JSON, &summary)
    }

    fn probe<'a>(&'a self, sae: &'a SaeParams) -> Result<FeatureProbe<'a>, PipelineError> {
        Ok(FeatureProbe::new(self.weights()?, sae, self.config.activations.site_layer)?)
    }

    fn selectivity(&self) -> Result<SelectivityTable, PipelineError> {
        self.load_json(files::SELECTIVITY_JSON)
    }

    fn stage_selectivity(&self, out: &mut StageOutputs) -> Result<(), PipelineError> {
        let sae = self.load_sae()?;
        let probe = self.probe(&sae)?;
        let pools = self.pools()?;
        let table = selectivity_table(
            &probe,
            self.vocab()?,
            &pools.names,
            &pools.places,
            &pools.objects,
            self.seed("selectivity"),
            self.config.analysis.selectivity_per_name,
            Frame::Canonical,
        )?;
        self.write(out, files::SELECTIVITY_CSV, table.to_csv().as_bytes())?;
        self.write_json(out, files::SELECTIVITY_JSON, &table)
    }

    fn stage_ablate(&self, out: &mut StageOutputs) -> Result<(), PipelineError> {
        let sae = self.load_sae()?;
        let probe = self.probe(&sae)?;
        let table = self.selectivity()?;
        let top = table.ranked(self.config.analysis.n_ablation_features);
        let pools = self.pools()?;
        let prompts = balanced_role_prompts(
            self.vocab()?,
            &pools.names,
            &pools.places,
            &pools.objects,
            self.seed("ablation"),
            self.config.analysis.ablation_per_name,
            Frame::Canonical,
        )?;
        let study: AblationStudy = ablation_study(&probe, &prompts, &top)?;
        self.write(out, files::ABLATION_SINGLE_CSV, study.single_csv().as_bytes())?;
        self.write(out, files::ABLATION_CUMULATIVE_CSV, study.cumulative_csv().as_bytes())?;
        self.write_json(out, files::ABLATION_JSON, &study)
    }

    fn stage_fve(&self, out: &mut StageOutputs) -> Result<(), PipelineError> {
        let sae = self.load_sae()?;
        let ds = ActivationDataset::load(&self.out_dir.join(files::HELDOUT_ACTIVATIONS))?;
        let selective: Vec<usize> = self
            .selectivity()?
            .ranked(self.config.analysis.n_ablation_features)
            .iter()
            .map(|t| t.feature)
            .collect();
        let report: FveReport = fve_report(&sae, ds.rows.data(), &self.config.analysis.fve_k, &selective)?;
        self.write(out, files::FVE_CSV, report.to_csv().as_bytes())?;
        self.write_json(out, files::FVE_JSON, &report)
    }

    fn stage_stratify(&self, out: &mut StageOutputs) -> Result<(), PipelineError> {
        let sae = self.load_sae()?;
        let probe = self.probe(&sae)?;
        let top = self.selectivity()?.ranked(self.config.analysis.n_top_features);
        let pools = self.pools()?;
        let report: StratificationReport = stratify(
            &probe,
            self.vocab()?,
            &pools.names,
            &pools.places,
            &pools.objects,
            &top,
            self.config.analysis.stratify_distractors,
            self.config.analysis.stratify_per_name,
            self.seed("stratify"),
            Frame::Canonical,
        )?;
        self.write(out, files::STRATIFY_CSV, report.to_csv().as_bytes())?;
        self.write_json(out, files::STRATIFY_JSON, &report)
    }

    fn stage_robustness(&self, out: &mut StageOutputs) -> Result<(), PipelineError> {
        let sae = self.load_sae()?;
        let probe = self.probe(&sae)?;
        let table = self.selectivity()?;
        let top = table.ranked(self.config.analysis.n_top_features);
        let report: RobustnessReport =
            run_suite(&probe, self.vocab()?, self.pools()?, &table, &top, &self.config.robustness, self.seed("robustness"))?;
        let mut retention = String::from("shift,name,feature,firing_retention,causal_retention\n");
        for g in &report.gaps {
            for f in &g.features {
                let causal = f.causal_retention.map_or(String::new(), |c| format!("{c:.6}"));
                let firing = f.firing_retention.map_or(String::new(), |c| format!("{c:.6}"));
                retention.push_str(&format!("{},{},{},{firing},{causal}\n", g.shifted.label(), f.name, f.feature));
            }
        }
        self.write(out, files::ROBUSTNESS_HEADS_CSV, report.heads_csv().as_bytes())?;
        self.write(out, files::ROBUSTNESS_FEATURES_CSV, report.features_csv().as_bytes())?;
        self.write(out, files::ROBUSTNESS_DOMINANT_CSV, report.dominant_csv().as_bytes())?;
        self.write(out, files::ROBUSTNESS_RETENTION_CSV, retention.as_bytes())?;
        self.write_json(out, files::ROBUSTNESS_JSON, &report)
    }

    fn stage_monitor_roc(&self, out: &mut StageOutputs) -> Result<(), PipelineError> {
        let sae = self.load_sae()?;
        let probe = self.probe(&sae)?;
        let top = self.selectivity()?.ranked(self.config.analysis.n_top_features);
        let m = measure_monitors(
            &probe,
            self.vocab()?,
            self.pools()?,
            &top,
            &self.config.monitor,
            self.config.cost.heuristic_noise,
            self.seed("monitor"),
        )?;
        let n = self.config.monitor.roc_features;
        let rows = roc_table(&m, n)?;
        let mut csv = String::from("condition,name,feature,auc\n");
        for r in &rows {
            csv.push_str(&format!("{},{},{},{:.6}\n", r.condition.label(), r.name, r.feature, r.auc));
        }
        let curves = Condition::ALL
            .iter()
            .flat_map(|&c| m.sets_for(c).take(n))
            .map(|s| {
                Ok(RocEntry { name: s.name.clone(), feature: s.feature, condition: s.condition, curve: s.roc()? })
            })
            .collect::<Result<Vec<_>, crate::deployment::DeploymentError>>()?;
        self.write(out, files::ROC_CSV, csv.as_bytes())?;
        self.write_json(out, files::ROC_JSON, &curves)?;
        self.write_json(out, files::MEASUREMENTS_JSON, &m)
    }

    fn measurements(&self) -> Result<MonitorMeasurements, PipelineError> {
        self.load_json(files::MEASUREMENTS_JSON)
    }

    fn stage_compose(&self, out: &mut StageOutputs) -> Result<(), PipelineError> {
        let table = composition_table(&self.measurements()?, &self.config.monitor);
        self.write(out, files::COMPOSITION_CSV, table.to_csv().as_bytes())?;
        self.write_json(out, files::COMPOSITION_JSON, &table)
    }

    fn stage_deploy_sweep(&self, out: &mut StageOutputs) -> Result<(), PipelineError> {
        let sweep: CostSweep = cost_sweep(&self.measurements()?, &self.config.cost, &self.config.monitor)?;
        self.write(out, files::SWEEP_CSV, sweep.to_csv().as_bytes())?;
        self.write_json(out, files::RECOMMENDATION_JSON, &sweep.optimum)?;
        self.write_json(out, files::SWEEP_JSON, &sweep)
    }

    fn stage_sensitivity(&self, out: &mut StageOutputs) -> Result<(), PipelineError> {
        let rows = sensitivity(&self.measurements()?, &self.config.cost, &self.config.monitor, &self.config.sensitivity_p_err)?;
        self.write(out, files::SENSITIVITY_CSV, sensitivity_csv(&rows).as_bytes())?;
        self.write_json(out, files::SENSITIVITY_JSON, &rows)
    }

    fn stage_figures(&self, out: &mut StageOutputs) -> Result<(), PipelineError> {
        let ts = self.timestamp();
        let [resid_fig, head_fig, fve_fig, strat_fig, robust_fig, cost_fig] = files::FIGURES;

        let resid: ResidSweep = self.load_json(files::RESID_JSON)?;
        let style = HeatmapStyle { title: "Residual-stream patching: recovery by layer and position".into(), row_prefix: "L".into(), ..Default::default() };
        self.write(out, resid_fig, plot_heatmap(&resid.positional, &style, ts)?.as_bytes())?;

        let heads: HeadSweep = self.load_json(files::HEADS_JSON)?;
        let style = HeatmapStyle {
            title: "Per-head patching at END: recovery".into(),
            row_prefix: "L".into(),
            highlight: self.config.robustness.canonical_heads.clone(),
            ..Default::default()
        };
        self.write(out, head_fig, plot_heatmap(&heads.grid, &style, ts)?.as_bytes())?;

        let fve: FveReport = self.load_json(files::FVE_JSON)?;
        let xs = || fve.k_values.iter().map(|&k| k as f64);
        let series = [
            Series { label: "top-K by magnitude".into(), points: xs().zip(fve.by_magnitude.iter().copied()).collect(), style: SeriesStyle::Line },
            Series { label: "top-K name-selective".into(), points: xs().zip(fve.selective.iter().copied()).collect(), style: SeriesStyle::Line },
        ];
        let axes = Axes {
            title: "Fraction of variance explained vs active features".into(),
            x_label: "K".into(),
            y_label: "FVE".into(),
            log_x: true,
            hlines: vec![(fve.full, format!("full SAE {:.3}", fve.full))],
            stars: vec![],
        };
        self.write(out, fve_fig, plot_curves(&series, &axes, ts)?.as_bytes())?;

        let strat: StratificationReport = self.load_json(files::STRATIFY_JSON)?;
        let points: Vec<(f64, f64)> = strat.rows.iter().map(|r| (r.selectivity_ratio, r.causal_drop)).collect();
        let axes = Axes {
            title: match strat.pearson_r {
                Some(r) => format!("Selectivity ratio vs causal drop (Pearson r = {r:.2})"),
                None => "Selectivity ratio vs causal drop".into(),
            },
            x_label: "selectivity ratio".into(),
            y_label: "causal drop (logits)".into(),
            log_x: points.iter().all(|p| p.0 > 0.0),
            ..Default::default()
        };
        let series = [Series { label: "top features".into(), points, style: SeriesStyle::Markers }];
        self.write(out, strat_fig, plot_curves(&series, &axes, ts)?.as_bytes())?;

        let robust: RobustnessReport = self.load_json(files::ROBUSTNESS_JSON)?;
        let mut series = Vec::new();
        for g in &robust.gaps {
            let firing: Vec<(f64, f64)> = g
                .features
                .iter()
                .enumerate()
                .filter_map(|(i, f)| f.firing_retention.map(|r| ((i + 1) as f64, r)))
                .collect();
            let causal: Vec<(f64, f64)> = g
                .features
                .iter()
                .enumerate()
                .filter_map(|(i, f)| f.causal_retention.map(|c| ((i + 1) as f64, c)))
                .collect();
            if !firing.is_empty() {
                series.push(Series { label: format!("{}: firing", g.shifted.label()), points: firing, style: SeriesStyle::Markers });
            }
            if !causal.is_empty() {
                series.push(Series { label: format!("{}: causal", g.shifted.label()), points: causal, style: SeriesStyle::Markers });
            }
        }
        let axes = Axes {
            title: "Feature retention under shift (shifted / in-distribution)".into(),
            x_label: "feature rank".into(),
            y_label: "retention".into(),
            hlines: vec![(1.0, "full retention".into())],
            ..Default::default()
        };
        self.write(out, robust_fig, plot_curves(&series, &axes, ts)?.as_bytes())?;

        let sweep: CostSweep = self.load_json(files::SWEEP_JSON)?;
        let series: Vec<Series> = MonitorKind::ALL
            .iter()
            .map(|&k| Series {
                label: k.label().into(),
                points: sweep.rows.iter().filter(|r| r.monitor == k).map(|r| (r.theta as f64, r.cost_per_1000)).collect(),
                style: SeriesStyle::Line,
            })
            .collect();
        let axes = Axes {
            title: "Expected cost per 1000 queries vs SAE threshold".into(),
            x_label: "threshold θ".into(),
            y_label: "$ per 1000 queries".into(),
            log_x: false,
            hlines: vec![(sweep.baseline_cost, format!("no monitor ${:.2}", sweep.baseline_cost))],
            stars: vec![(
                sweep.optimum.theta as f64,
                sweep.optimum.cost_per_1000,
                format!("{} θ={} ${:.2}", sweep.optimum.config.label(), sweep.optimum.theta, sweep.optimum.cost_per_1000),
            )],
        };
        self.write(out, cost_fig, plot_curves(&series, &axes, ts)?.as_bytes())?;

        // Combined manifest of every stage's outputs plus the figures.
        let mut all: BTreeMap<String, ManifestEntry> = BTreeMap::new();
        for stage in Stage::PIPELINE {
            if let Some(r) = RunRecord::load(&self.out_dir, stage.name()) {
                for e in r.outputs {
                    all.insert(e.path.clone(), e);
                }
            }
        }
        for e in out.entries() {
            all.insert(e.path.clone(), e.clone());
        }
        self.write_json(out, files::MANIFEST_JSON, &Manifest { files: all.into_values().collect() })
    }

    // -- output helpers --------------------------------------------------------

    fn write(&self, out: &mut StageOutputs, name: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        let path = out.path(name);
        out.write(name, bytes).map_err(io_err(&path))
    }

    fn write_json<T: Serialize>(&self, out: &mut StageOutputs, name: &str, value: &T) -> Result<(), PipelineError> {
        let path = out.path(name);
        out.write_json(name, value).map_err(io_err(&path))
    }
}

fn log(stage: Stage, message: &str) {
    eprintln!("[{}] {message}", stage.name());
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
