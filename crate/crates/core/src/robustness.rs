// SPDX-License-Identifier: MIT OR Apache-2.0

//! Distribution-shift suite: re-run the baseline, canonical-head recovery,
//! feature firing and single-feature ablation with the in-distribution SAE and
//! feature list under out-of-distribution content words, held-out names and a
//! reformulated prompt frame, then compare detection and causal retention.
//!
//! The SAE is never retrained: every shift measures transfer of the
//! in-distribution artifacts. An unshifted reference run ([`ShiftKind::None`])
//! goes through the same code so that retention ratios compare like with like.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{AnalysisError, FeatureProbe, SelectivityTable, TopFeature};
use crate::ioi::{
    balanced_role_prompts, make_minimal_pairs, partition_single_token, sample_from, DatasetError, Frame, PoolVariant,
    StructureMix, WordPools,
};
use crate::patching::{baseline, head_recoveries, PatchingError};
use crate::rng::derive_seed;
use crate::stats::ordered_mean;
use crate::tokenizer::BpeVocab;

/// Ablation drops below this (logits) make a causal retention ratio
/// meaningless; such features are flagged and left out of the mean.
pub const MIN_REFERENCE_DROP: f64 = 0.05;

#[derive(Debug, Error)]
pub enum RobustnessError {
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Patching(#[from] PatchingError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("shift {0:?} leaves fewer than four single-token names")]
    TooFewNames(ShiftKind),
    #[error("cannot compare {reference:?} against {shifted:?}: feature lists differ")]
    FeatureMismatch { reference: ShiftKind, shifted: ShiftKind },
}

// ---------------------------------------------------------------------------
// Shift specification
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    /// Unshifted reference (in-distribution pools, canonical frame).
    None,
    OodContent,
    HeldoutNames,
    ReformulatedFrame,
}

impl ShiftKind {
    pub const SHIFTS: [ShiftKind; 3] = [ShiftKind::OodContent, ShiftKind::HeldoutNames, ShiftKind::ReformulatedFrame];

    pub fn label(self) -> &'static str {
        match self {
            ShiftKind::None => "in_distribution",
            ShiftKind::OodContent => "ood_content",
            ShiftKind::HeldoutNames => "heldout_names",
            ShiftKind::ReformulatedFrame => "reformulated_frame",
        }
    }
}

/// A shift and the pool/frame overrides it implies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub pools: PoolVariant,
    pub frame: Frame,
}

impl ShiftSpec {
    pub fn new(kind: ShiftKind) -> Self {
        let (pools, frame) = match kind {
            ShiftKind::None => (PoolVariant::InDistribution, Frame::Canonical),
            ShiftKind::OodContent => (PoolVariant::OodContent, Frame::Canonical),
            ShiftKind::HeldoutNames => (PoolVariant::HeldoutNames, Frame::Canonical),
            ShiftKind::ReformulatedFrame => (PoolVariant::InDistribution, Frame::Cleft),
        };
        Self { kind, pools, frame }
    }

    /// Whether the in-distribution names (and so the per-name features) occur.
    pub fn keeps_training_names(&self) -> bool {
        self.pools != PoolVariant::HeldoutNames
    }
}

/// Sizes of the per-shift measurements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobustnessConfig {
    pub n_baseline: usize,
    pub n_pairs: usize,
    pub canonical_heads: Vec<(usize, usize)>,
    /// IO-role prompts per name for firing, ablation and dominance.
    pub per_name: usize,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        Self {
            n_baseline: 64,
            n_pairs: 30,
            canonical_heads: vec![(9, 9), (9, 6), (10, 0), (10, 7)],
            per_name: 10,
        }
    }
}

// ---------------------------------------------------------------------------
// Per-shift report
// ---------------------------------------------------------------------------

/// One in-distribution feature measured on its name's IO-role prompts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureShiftStats {
    pub name: String,
    pub feature: usize,
    pub mean_activation: f64,
    pub firing_rate: f64,
    /// Mean `Δ_clean − Δ_ablated`.
    pub ablation_drop: f64,
    pub n_prompts: usize,
}

/// Feature with the highest mean activation on a name's IO-role prompts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DominantFeature {
    pub name: String,
    pub feature: usize,
    pub mean_activation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub spec: ShiftSpec,
    /// Seed from which every sample in this report was derived.
    pub run_seed: u64,
    pub run_id: String,
    pub baseline_mean_logit_diff: f64,
    pub baseline_frac_correct: f64,
    pub heads: Vec<(usize, usize)>,
    pub head_recoveries: Vec<f32>,
    pub n_pairs: usize,
    pub n_degenerate_pairs: usize,
    /// Empty when the shift removes the training names.
    pub features: Vec<FeatureShiftStats>,
    pub dominant: Vec<DominantFeature>,
    pub n_distinct_dominant: usize,
    /// Names dropped because they are not a single token.
    pub excluded_names: Vec<String>,
    /// Whether any listed in-distribution feature is some name's dominant one.
    pub top_feature_dominant: bool,
    /// Names whose dominant feature equals their own selectivity top feature
    /// (only meaningful for the training names).
    pub dominant_agreement: Option<usize>,
}

impl ShiftReport {
    pub fn head_recovery(&self, head: (usize, usize)) -> Option<f32> {
        self.heads.iter().position(|&h| h == head).map(|i| self.head_recoveries[i])
    }
}

/// Per name, the feature with the highest mean activation on its IO-role
/// prompts (`features` is `[prompts × d_sae]`, aligned with `io_names`).
pub fn dominant_feature_map(names: &[String], io_names: &[&str], features: &[f32], d_sae: usize) -> Vec<DominantFeature> {
    names
        .iter()
        .filter_map(|name| {
            let rows: Vec<&[f32]> = io_names
                .iter()
                .zip(features.chunks_exact(d_sae))
                .filter(|(n, _)| **n == name.as_str())
                .map(|(_, r)| r)
                .collect();
            if rows.is_empty() {
                return None;
            }
            let (mut best, mut best_mean) = (0, f64::NEG_INFINITY);
            for j in 0..d_sae {
                let col: Vec<f32> = rows.iter().map(|r| r[j]).collect();
                let m = ordered_mean(&col).unwrap_or(0.0);
                if m > best_mean {
                    best = j;
                    best_mean = m;
                }
            }
            Some(DominantFeature { name: name.clone(), feature: best, mean_activation: best_mean })
        })
        .collect()
}

/// Run every robustness measurement under one shift.
#[allow(clippy::too_many_arguments)]
pub fn run_shift(
    probe: &FeatureProbe<'_>,
    vocab: &BpeVocab,
    pools: &WordPools,
    selectivity: &SelectivityTable,
    top: &[TopFeature],
    spec: ShiftSpec,
    config: &RobustnessConfig,
    seed: u64,
) -> Result<ShiftReport, RobustnessError> {
    let run_id = format!("robustness/{}", spec.kind.label());
    let run_seed = derive_seed(seed, &run_id);
    let (pool_names, places, objects) = pools.select(spec.pools);
    let mut candidates = pool_names.to_vec();
    if spec.kind == ShiftKind::HeldoutNames {
        candidates.extend(pools.multi_token_probe_names.iter().cloned());
    }
    let (names, excluded_names) = partition_single_token(vocab, &candidates);
    if names.len() < 4 {
        return Err(RobustnessError::TooFewNames(spec.kind));
    }
    let shifted_pools = WordPools {
        names: names.clone(),
        places: places.to_vec(),
        objects: objects.to_vec(),
        heldout_names: names.clone(),
        ..pools.clone()
    };

    // Baseline.
    let prompts = sample_from(
        vocab,
        &names,
        places,
        objects,
        derive_seed(run_seed, "baseline"),
        config.n_baseline,
        spec.frame,
        StructureMix::Uniform,
    )?;
    let base = baseline(probe.weights, &prompts)?;

    // Canonical heads.
    let variant = if spec.keeps_training_names() { spec.pools } else { PoolVariant::HeldoutNames };
    let pairs = make_minimal_pairs(vocab, &shifted_pools, derive_seed(run_seed, "pairs"), config.n_pairs, variant, spec.frame)?;
    let heads = head_recoveries(probe.weights, &pairs, &config.canonical_heads)?;

    // Features on balanced IO-role prompts.
    let role_prompts = balanced_role_prompts(
        vocab,
        &names,
        places,
        objects,
        derive_seed(run_seed, "roles"),
        config.per_name,
        spec.frame,
    )?;
    let d_sae = probe.d_sae();
    let mut features = Vec::new();
    let feats: Vec<f32> = if spec.keeps_training_names() {
        let sets: Vec<Vec<usize>> = top.iter().map(|t| vec![t.feature]).collect();
        let evals = probe.evaluate(&role_prompts, &sets)?;
        for (i, t) in top.iter().enumerate() {
            let mine: Vec<_> = role_prompts
                .iter()
                .zip(&evals)
                .filter(|(p, _)| p.io_name == t.name)
                .map(|(_, e)| e)
                .collect();
            let acts: Vec<f32> = mine.iter().map(|e| e.features[t.feature]).collect();
            let drops: Vec<f32> = mine.iter().map(|e| e.logit_diff - e.ablated[i]).collect();
            let (firing_rate, mean_activation, _, _) = crate::analysis::feature_observables(&acts);
            features.push(FeatureShiftStats {
                name: t.name.clone(),
                feature: t.feature,
                mean_activation,
                firing_rate,
                ablation_drop: ordered_mean(&drops).unwrap_or(0.0),
                n_prompts: mine.len(),
            });
        }
        evals.into_iter().flat_map(|e| e.features).collect()
    } else {
        probe.end_features(&role_prompts)?
    };
    let io_names: Vec<&str> = role_prompts.iter().map(|p| p.io_name.as_str()).collect();
    let dominant = dominant_feature_map(&names, &io_names, &feats, d_sae);
    let distinct: std::collections::BTreeSet<usize> = dominant.iter().map(|d| d.feature).collect();
    let top_feature_dominant = dominant.iter().any(|d| top.iter().any(|t| t.feature == d.feature));
    let dominant_agreement = spec.keeps_training_names().then(|| {
        dominant
            .iter()
            .filter(|d| {
                selectivity
                    .top
                    .iter()
                    .any(|t| t.name == d.name && t.feature == d.feature)
            })
            .count()
    });

    Ok(ShiftReport {
        spec,
        run_seed,
        run_id,
        baseline_mean_logit_diff: base.mean_logit_diff,
        baseline_frac_correct: base.frac_correct,
        heads: heads.heads,
        head_recoveries: heads.recoveries,
        n_pairs: heads.n_pairs,
        n_degenerate_pairs: heads.n_degenerate,
        features,
        n_distinct_dominant: distinct.len(),
        dominant,
        excluded_names,
        top_feature_dominant,
        dominant_agreement,
    })
}

// ---------------------------------------------------------------------------
// Detection versus causal retention
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRetention {
    pub name: String,
    pub feature: usize,
    /// Shifted / reference mean activation (1 when both are zero); `None`
    /// when only the reference is zero.
    pub firing_retention: Option<f64>,
    /// Shifted / reference ablation drop; `None` when the reference drop is
    /// below [`MIN_REFERENCE_DROP`].
    pub causal_retention: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetentionGap {
    pub reference: ShiftKind,
    pub shifted: ShiftKind,
    pub features: Vec<FeatureRetention>,
    /// Mean over features with a defined firing retention.
    pub mean_firing_retention: Option<f64>,
    /// Mean over unflagged features.
    pub mean_causal_retention: Option<f64>,
    pub flagged: Vec<String>,
    /// Features retaining at most half of their causal drop.
    pub n_lost_half: usize,
    /// Mean shifted drop / mean reference drop over all features.
    pub aggregate_drop_ratio: Option<f64>,
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    if den != 0.0 {
        Some(num / den)
    } else if num == 0.0 {
        Some(1.0)
    } else {
        None
    }
}

/// Per-feature firing and causal retention of `shifted` relative to `reference`.
pub fn detection_vs_causal_gap(reference: &ShiftReport, shifted: &ShiftReport) -> Result<RetentionGap, RobustnessError> {
    let same = reference.features.len() == shifted.features.len()
        && reference.features.iter().zip(&shifted.features).all(|(a, b)| a.feature == b.feature && a.name == b.name);
    if !same || reference.features.is_empty() {
        return Err(RobustnessError::FeatureMismatch { reference: reference.spec.kind, shifted: shifted.spec.kind });
    }
    let mut features = Vec::new();
    let mut flagged = Vec::new();
    for (r, s) in reference.features.iter().zip(&shifted.features) {
        let causal = if r.ablation_drop < MIN_REFERENCE_DROP {
            flagged.push(r.name.clone());
            None
        } else {
            Some(s.ablation_drop / r.ablation_drop)
        };
        features.push(FeatureRetention {
            name: r.name.clone(),
            feature: r.feature,
            firing_retention: ratio(s.mean_activation, r.mean_activation),
            causal_retention: causal,
        });
    }
    let firing: Vec<f32> = features.iter().filter_map(|f| f.firing_retention.map(|x| x as f32)).collect();
    let causal: Vec<f32> = features.iter().filter_map(|f| f.causal_retention.map(|x| x as f32)).collect();
    let mean_drop = |rep: &ShiftReport| {
        let v: Vec<f32> = rep.features.iter().map(|f| f.ablation_drop as f32).collect();
        ordered_mean(&v).unwrap_or(0.0)
    };
    let ref_drop = mean_drop(reference);
    Ok(RetentionGap {
        reference: reference.spec.kind,
        shifted: shifted.spec.kind,
        mean_firing_retention: ordered_mean(&firing),
        mean_causal_retention: ordered_mean(&causal),
        n_lost_half: features.iter().filter(|f| f.causal_retention.is_some_and(|c| c <= 0.5)).count(),
        aggregate_drop_ratio: (ref_drop.abs() >= MIN_REFERENCE_DROP).then(|| mean_drop(shifted) / ref_drop),
        features,
        flagged,
    })
}

/// The reference run, every shift, and retention gaps for the shifts that
/// keep the training names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub reference: ShiftReport,
    pub shifts: Vec<ShiftReport>,
    pub gaps: Vec<RetentionGap>,
}

impl RobustnessReport {
    pub fn shift(&self, kind: ShiftKind) -> Option<&ShiftReport> {
        if kind == ShiftKind::None {
            return Some(&self.reference);
        }
        self.shifts.iter().find(|s| s.spec.kind == kind)
    }

    pub fn gap(&self, kind: ShiftKind) -> Option<&RetentionGap> {
        self.gaps.iter().find(|g| g.shifted == kind)
    }

    /// Baseline and canonical-head recoveries per condition.
    pub fn heads_csv(&self) -> String {
        let mut out = String::from("condition,baseline_logit_diff,frac_correct");
        for (l, h) in &self.reference.heads {
            out.push_str(&format!(",L{l}H{h}"));
        }
        out.push('\n');
        for s in std::iter::once(&self.reference).chain(&self.shifts) {
            out.push_str(&format!("{},{:.6},{:.6}", s.spec.kind.label(), s.baseline_mean_logit_diff, s.baseline_frac_correct));
            for r in &s.head_recoveries {
                out.push_str(&format!(",{r:.6}"));
            }
            out.push('\n');
        }
        out
    }

    /// Per-feature firing and ablation drop per condition.
    pub fn features_csv(&self) -> String {
        let mut out = String::from("condition,name,feature,mean_activation,firing_rate,ablation_drop,n_prompts\n");
        for s in std::iter::once(&self.reference).chain(&self.shifts) {
            for f in &s.features {
                out.push_str(&format!(
                    "{},{},{},{:.6},{:.6},{:.6},{}\n",
                    s.spec.kind.label(),
                    f.name,
                    f.feature,
                    f.mean_activation,
                    f.firing_rate,
                    f.ablation_drop,
                    f.n_prompts
                ));
            }
        }
        out
    }

    /// Dominant feature per name per condition.
    pub fn dominant_csv(&self) -> String {
        let mut out = String::from("condition,name,feature,mean_activation\n");
        for s in std::iter::once(&self.reference).chain(&self.shifts) {
            for d in &s.dominant {
                out.push_str(&format!("{},{},{},{:.6}\n", s.spec.kind.label(), d.name, d.feature, d.mean_activation));
            }
        }
        out
    }
}

/// Reference run plus all three shifts.
#[allow(clippy::too_many_arguments)]
pub fn run_suite(
    probe: &FeatureProbe<'_>,
    vocab: &BpeVocab,
    pools: &WordPools,
    selectivity: &SelectivityTable,
    top: &[TopFeature],
    config: &RobustnessConfig,
    seed: u64,
) -> Result<RobustnessReport, RobustnessError> {
    let run = |kind| run_shift(probe, vocab, pools, selectivity, top, ShiftSpec::new(kind), config, seed);
    let reference = run(ShiftKind::None)?;
    let shifts = ShiftKind::SHIFTS.iter().map(|&k| run(k)).collect::<Result<Vec<_>, _>>()?;
    let gaps = shifts
        .iter()
        .filter(|s| s.spec.keeps_training_names())
        .map(|s| detection_vs_causal_gap(&reference, s))
        .collect::<Result<_, _>>()?;
    Ok(RobustnessReport { reference, shifts, gaps })
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
