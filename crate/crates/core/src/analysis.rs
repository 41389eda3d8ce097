// SPDX-License-Identifier: MIT OR Apache-2.0

//! Feature-level analyses on a trained SAE: selectivity tables, single and
//! cumulative error-preserving ablation, fidelity (FVE) curves and
//! reliability stratification.
//!
//! All analyses read SAE features at one site: `resid_pre` of
//! [`FeatureProbe::site_layer`] at each prompt's END position. Ablation
//! replaces that vector by `h − Σ_{i∈set} f_i(h)·direction_i`, leaving the SAE
//! reconstruction error in place, and resumes the forward pass from there.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ioi::{balanced_role_prompts, paraphrase_prompts, DatasetError, Frame, IoiPrompt};
use crate::model::{HookSite, ModelError, ModelWeights, PatchSet, Position, RunTrace};
use crate::sae::{collect_end_activations, fraction_variance_explained, SaeError, SaeParams};
use crate::stats::{ordered_mean, pearson, population_std};
use crate::tensor::Tensor;
use crate::tokenizer::BpeVocab;

/// Prompts per batched forward.
const CHUNK: usize = 16;
/// Denominator floor of the selectivity ratio.
pub const SELECTIVITY_EPS: f32 = 0.1;
/// Activation above which a feature counts as firing.
pub const FIRING_THRESHOLD: f32 = 1.0;
/// Tolerance of the cumulative-ablation monotonicity soft check.
pub const CUMULATIVE_TOLERANCE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sae(#[from] SaeError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("SAE width {sae} does not match model width {model}")]
    WidthMismatch { sae: usize, model: usize },
    #[error("site layer {layer} out of range for a {n_layers}-layer model")]
    SiteLayer { layer: usize, n_layers: usize },
    #[error("feature {feature} out of range for {d_sae} features")]
    FeatureOutOfRange { feature: usize, d_sae: usize },
    #[error("K = {k} exceeds the {d_sae} SAE features")]
    KOutOfRange { k: usize, d_sae: usize },
    #[error("no prompts with {name} as {role}")]
    EmptyCondition { name: String, role: &'static str },
    #[error("no prompts supplied")]
    NoPrompts,
}

// ---------------------------------------------------------------------------
// Feature probe
// ---------------------------------------------------------------------------

/// A model, its SAE and the residual site the SAE reads.
#[derive(Clone, Copy)]
pub struct FeatureProbe<'a> {
    pub weights: &'a ModelWeights,
    pub sae: &'a SaeParams,
    /// Index `L` of the `resid_pre_L` site.
    pub site_layer: usize,
}

/// One prompt's clean logit difference, SAE features at the site, and logit
/// difference under each requested ablation set.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEval {
    pub logit_diff: f32,
    pub features: Vec<f32>,
    pub ablated: Vec<f32>,
}

impl<'a> FeatureProbe<'a> {
    pub fn new(weights: &'a ModelWeights, sae: &'a SaeParams, site_layer: usize) -> Result<Self, AnalysisError> {
        let c = weights.config();
        if sae.d_model() != c.d_model {
            return Err(AnalysisError::WidthMismatch { sae: sae.d_model(), model: c.d_model });
        }
        if site_layer >= c.n_layers {
            return Err(AnalysisError::SiteLayer { layer: site_layer, n_layers: c.n_layers });
        }
        Ok(Self { weights, sae, site_layer })
    }

    pub fn d_sae(&self) -> usize {
        self.sae.d_sae()
    }

    fn check_features(&self, features: impl IntoIterator<Item = usize>) -> Result<(), AnalysisError> {
        let d_sae = self.d_sae();
        match features.into_iter().find(|&f| f >= d_sae) {
            Some(feature) => Err(AnalysisError::FeatureOutOfRange { feature, d_sae }),
            None => Ok(()),
        }
    }

    /// Residual vectors at the site, row-major `[n × d_model]`.
    pub fn end_activations(&self, prompts: &[IoiPrompt]) -> Result<Vec<f32>, AnalysisError> {
        let items: Vec<(&[u32], usize)> = prompts.iter().map(|p| (p.token_ids.as_slice(), p.labels.end)).collect();
        Ok(collect_end_activations(self.weights, &items, self.site_layer)?)
    }

    /// SAE features at the site, row-major `[n × d_sae]`.
    pub fn end_features(&self, prompts: &[IoiPrompt]) -> Result<Vec<f32>, AnalysisError> {
        Ok(self.sae.encode_batch(&self.end_activations(prompts)?))
    }

    /// Error-preserving ablation of `set` from one site vector.
    pub fn ablate_vector(&self, h: &[f32], features: &[f32], set: &BTreeSet<usize>) -> Vec<f32> {
        let mut out = h.to_vec();
        for &i in set {
            let a = features[i];
            if a != 0.0 {
                out.iter_mut().zip(self.sae.direction(i)).for_each(|(x, w)| *x -= a * w);
            }
        }
        out
    }

    /// Full evaluation with one ablated logit difference per set in `ablations`.
    /// An empty set leaves the logit difference unchanged bit-for-bit.
    pub fn evaluate(&self, prompts: &[IoiPrompt], ablations: &[Vec<usize>]) -> Result<Vec<PromptEval>, AnalysisError> {
        self.check_features(ablations.iter().flatten().copied())?;
        let sets: Vec<BTreeSet<usize>> = ablations.iter().map(|s| s.iter().copied().collect()).collect();
        let d = self.weights.config().d_model;
        let chunks: Vec<Vec<PromptEval>> = prompts
            .par_chunks(CHUNK)
            .map(|chunk| {
                let tokens: Vec<&[u32]> = chunk.iter().map(|p| p.token_ids.as_slice()).collect();
                let traces = self.weights.trace_batch(&tokens)?;
                let mut evals = Vec::with_capacity(chunk.len());
                let mut patches: Vec<(usize, usize, PatchSet)> = Vec::new();
                for (pi, (p, t)) in chunk.iter().zip(&traces).enumerate() {
                    let end = p.labels.end;
                    let h = t.resid_pre(self.site_layer, end);
                    let features = self.sae.encode(h);
                    let ld = end_logit_diff(self.weights, t.final_resid(), p, d);
                    for (si, set) in sets.iter().enumerate() {
                        if !set.is_empty() {
                            let value = Tensor::vector(self.ablate_vector(h, &features, set));
                            let ps = PatchSet::new().with(HookSite::resid_pre(self.site_layer, Position::At(end)), value)?;
                            patches.push((pi, si, ps));
                        }
                    }
                    evals.push(PromptEval { logit_diff: ld, features, ablated: vec![ld; sets.len()] });
                }
                let jobs: Vec<(&RunTrace, &PatchSet)> = patches.iter().map(|(pi, _, ps)| (&traces[*pi], ps)).collect();
                for ((pi, si, _), fin) in patches.iter().zip(self.weights.retrace_final_batch(&jobs)?) {
                    evals[*pi].ablated[*si] = end_logit_diff(self.weights, &fin, &chunk[*pi], d);
                }
                Ok(evals)
            })
            .collect::<Result<_, AnalysisError>>()?;
        Ok(chunks.concat())
    }
}

fn end_logit_diff(weights: &ModelWeights, final_resid: &[f32], p: &IoiPrompt, d: usize) -> f32 {
    let end = p.labels.end;
    let l = weights.logits_for_resid(&final_resid[end * d..(end + 1) * d], &[p.io_token_id, p.s_token_id]);
    l[0] - l[1]
}

fn mean(values: &[f32]) -> f64 {
    ordered_mean(values).unwrap_or(0.0)
}

// ---------------------------------------------------------------------------
// Selectivity
// ---------------------------------------------------------------------------

/// A name's most IO-selective feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopFeature {
    pub name: String,
    pub feature: usize,
    pub mean_io: f32,
    pub mean_s: f32,
    /// `mean_io − mean_s`.
    pub gap: f32,
}

impl TopFeature {
    /// `mean_io / max(mean_s, SELECTIVITY_EPS)`.
    pub fn selectivity_ratio(&self) -> f32 {
        self.mean_io / self.mean_s.max(SELECTIVITY_EPS)
    }

    /// `mean_io / mean_s` without the floor (may be infinite).
    pub fn raw_ratio(&self) -> f32 {
        self.mean_io / self.mean_s
    }
}

/// Conditional mean activations of every feature, per name and role.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectivityTable {
    pub names: Vec<String>,
    pub d_sae: usize,
    /// `[names × d_sae]`, mean activation when the name is IO.
    pub mean_io: Vec<f32>,
    /// `[names × d_sae]`, mean activation when the name is S.
    pub mean_s: Vec<f32>,
    pub n_io: Vec<usize>,
    pub n_s: Vec<usize>,
    /// One entry per name, in `names` order.
    pub top: Vec<TopFeature>,
}

impl SelectivityTable {
    pub fn gap(&self, name: usize, feature: usize) -> f32 {
        let i = name * self.d_sae + feature;
        self.mean_io[i] - self.mean_s[i]
    }

    /// Names' top features by descending gap (ties by name order), first `k`.
    pub fn ranked(&self, k: usize) -> Vec<TopFeature> {
        let mut order: Vec<usize> = (0..self.top.len()).collect();
        order.sort_by(|&a, &b| self.top[b].gap.total_cmp(&self.top[a].gap).then(a.cmp(&b)));
        order.into_iter().take(k).map(|i| self.top[i].clone()).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,feature,mean_io,mean_s,gap,selectivity_ratio,n_io,n_s\n");
        for (i, t) in self.top.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6},{},{}\n",
                t.name,
                t.feature,
                t.mean_io,
                t.mean_s,
                t.gap,
                t.selectivity_ratio(),
                self.n_io[i],
                self.n_s[i]
            ));
        }
        out
    }
}

/// Selectivity from precomputed features (`[prompts × d_sae]`).
pub fn selectivity_from_features(
    names: &[String],
    prompts: &[IoiPrompt],
    features: &[f32],
    d_sae: usize,
) -> Result<SelectivityTable, AnalysisError> {
    let n = names.len();
    let (mut mean_io, mut mean_s) = (vec![0.0f32; n * d_sae], vec![0.0f32; n * d_sae]);
    let (mut n_io, mut n_s) = (vec![0; n], vec![0; n]);
    let mut top = Vec::with_capacity(n);
    for (ni, name) in names.iter().enumerate() {
        let io_rows: Vec<&[f32]> = prompts
            .iter()
            .zip(features.chunks_exact(d_sae))
            .filter(|(p, _)| &p.io_name == name)
            .map(|(_, f)| f)
            .collect();
        let s_rows: Vec<&[f32]> = prompts
            .iter()
            .zip(features.chunks_exact(d_sae))
            .filter(|(p, _)| &p.s_name == name)
            .map(|(_, f)| f)
            .collect();
        if io_rows.is_empty() {
            return Err(AnalysisError::EmptyCondition { name: name.clone(), role: "IO" });
        }
        if s_rows.is_empty() {
            return Err(AnalysisError::EmptyCondition { name: name.clone(), role: "S" });
        }
        n_io[ni] = io_rows.len();
        n_s[ni] = s_rows.len();
        let mut best = (0usize, f32::NEG_INFINITY);
        for j in 0..d_sae {
            let io: Vec<f32> = io_rows.iter().map(|r| r[j]).collect();
            let s: Vec<f32> = s_rows.iter().map(|r| r[j]).collect();
            let (mi, ms) = (mean(&io) as f32, mean(&s) as f32);
            mean_io[ni * d_sae + j] = mi;
            mean_s[ni * d_sae + j] = ms;
            if mi - ms > best.1 {
                best = (j, mi - ms);
            }
        }
        let j = best.0;
        top.push(TopFeature {
            name: name.clone(),
            feature: j,
            mean_io: mean_io[ni * d_sae + j],
            mean_s: mean_s[ni * d_sae + j],
            gap: best.1,
        });
    }
    Ok(SelectivityTable { names: names.to_vec(), d_sae, mean_io, mean_s, n_io, n_s, top })
}

/// Balanced IO/S-role prompts per name, encoded and tabulated.
#[allow(clippy::too_many_arguments)]
pub fn selectivity_table(
    probe: &FeatureProbe<'_>,
    vocab: &BpeVocab,
    names: &[String],
    places: &[String],
    objects: &[String],
    seed: u64,
    per_name: usize,
    frame: Frame,
) -> Result<SelectivityTable, AnalysisError> {
    let prompts = balanced_role_prompts(vocab, names, places, objects, seed, per_name, frame)?;
    let features = probe.end_features(&prompts)?;
    selectivity_from_features(names, &prompts, &features, probe.d_sae())
}

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

/// Effect of ablating one name's top feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingleAblationRow {
    pub name: String,
    pub feature: usize,
    /// Mean `Δ_clean − Δ_ablated` on prompts whose IO is `name`.
    pub preferred_drop: f64,
    /// Mean `Δ_ablated − Δ_clean` on all other prompts.
    pub other_change: f64,
    pub n_preferred: usize,
    pub n_other: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingleAblationReport {
    pub rows: Vec<SingleAblationRow>,
    pub mean_preferred_drop: f64,
    /// Mean over features of `|other_change|`.
    pub mean_abs_other_change: f64,
    /// Every feature's `|other_change|` is below its `preferred_drop`.
    pub specific: bool,
}

/// Behaviour with the top `k` features ablated together.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CumulativeRow {
    pub k: usize,
    pub features: Vec<usize>,
    pub mean_logit_diff: f64,
    pub frac_correct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CumulativeReport {
    /// `k = 0` (no ablation) through `k = top.len()`.
    pub rows: Vec<CumulativeRow>,
    /// `k` values whose mean rose by more than the tolerance over `k − 1`.
    pub monotonicity_violations: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationStudy {
    pub n_prompts: usize,
    pub baseline_mean_logit_diff: f64,
    pub single: SingleAblationReport,
    pub cumulative: CumulativeReport,
}

impl AblationStudy {
    pub fn single_csv(&self) -> String {
        let mut out = String::from("name,feature,preferred_drop,other_change,n_preferred,n_other\n");
        for r in &self.single.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{},{}\n",
                r.name, r.feature, r.preferred_drop, r.other_change, r.n_preferred, r.n_other
            ));
        }
        out
    }

    pub fn cumulative_csv(&self) -> String {
        let mut out = String::from("k,mean_logit_diff,frac_correct\n");
        for r in &self.cumulative.rows {
            out.push_str(&format!("{},{:.6},{:.6}\n", r.k, r.mean_logit_diff, r.frac_correct));
        }
        out
    }
}

/// Mean `clean − ablated` for one set index over a prompt subset.
fn mean_drop(evals: &[&PromptEval], set: usize) -> f64 {
    let drops: Vec<f32> = evals.iter().map(|e| e.logit_diff - e.ablated[set]).collect();
    mean(&drops)
}

/// Single-feature ablation of each entry of `top`, then cumulative ablation of
/// the first `k` entries for every `k`, all on the same prompts.
pub fn ablation_study(
    probe: &FeatureProbe<'_>,
    prompts: &[IoiPrompt],
    top: &[TopFeature],
) -> Result<AblationStudy, AnalysisError> {
    if prompts.is_empty() {
        return Err(AnalysisError::NoPrompts);
    }
    let mut sets: Vec<Vec<usize>> = top.iter().map(|t| vec![t.feature]).collect();
    sets.extend((1..=top.len()).map(|k| top[..k].iter().map(|t| t.feature).collect()));
    let evals = probe.evaluate(prompts, &sets)?;

    let mut rows = Vec::with_capacity(top.len());
    for (i, t) in top.iter().enumerate() {
        let (mut pref, mut other): (Vec<&PromptEval>, Vec<&PromptEval>) = (Vec::new(), Vec::new());
        for (p, e) in prompts.iter().zip(&evals) {
            if p.io_name == t.name {
                pref.push(e);
            } else {
                other.push(e);
            }
        }
        if pref.is_empty() {
            return Err(AnalysisError::EmptyCondition { name: t.name.clone(), role: "IO" });
        }
        rows.push(SingleAblationRow {
            name: t.name.clone(),
            feature: t.feature,
            preferred_drop: mean_drop(&pref, i),
            other_change: if other.is_empty() { 0.0 } else { -mean_drop(&other, i) },
            n_preferred: pref.len(),
            n_other: other.len(),
        });
    }
    let drops: Vec<f32> = rows.iter().map(|r| r.preferred_drop as f32).collect();
    let others: Vec<f32> = rows.iter().map(|r| r.other_change.abs() as f32).collect();
    let single = SingleAblationReport {
        mean_preferred_drop: mean(&drops),
        mean_abs_other_change: mean(&others),
        specific: rows.iter().all(|r| r.other_change.abs() < r.preferred_drop),
        rows,
    };

    let clean: Vec<f32> = evals.iter().map(|e| e.logit_diff).collect();
    let summarize = |k: usize, lds: &[f32]| CumulativeRow {
        k,
        features: top[..k].iter().map(|t| t.feature).collect(),
        mean_logit_diff: mean(lds),
        frac_correct: lds.iter().filter(|&&x| x > 0.0).count() as f64 / lds.len() as f64,
    };
    let mut cum_rows = vec![summarize(0, &clean)];
    for k in 1..=top.len() {
        let lds: Vec<f32> = evals.iter().map(|e| e.ablated[top.len() + k - 1]).collect();
        cum_rows.push(summarize(k, &lds));
    }
    let monotonicity_violations = cum_rows
        .windows(2)
        .filter(|w| w[1].mean_logit_diff > w[0].mean_logit_diff + CUMULATIVE_TOLERANCE)
        .map(|w| w[1].k)
        .collect();
    Ok(AblationStudy {
        n_prompts: prompts.len(),
        baseline_mean_logit_diff: mean(&clean),
        single,
        cumulative: CumulativeReport { rows: cum_rows, monotonicity_violations },
    })
}

// ---------------------------------------------------------------------------
// Fidelity stratification
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FveMode {
    /// Per input, keep the `K` largest activations.
    ByMagnitude,
    /// Keep only the first `K` features of this ordered list.
    SelectiveOnly(Vec<usize>),
}

/// Zero all but the kept features of one activation row.
fn truncate_row(row: &mut [f32], k: usize, mode: &FveMode) {
    match mode {
        FveMode::ByMagnitude => {
            if k >= row.len() {
                return;
            }
            let mut idx: Vec<usize> = (0..row.len()).collect();
            // Descending magnitude, ties by index: a deterministic top-K.
            idx.sort_by(|&a, &b| row[b].abs().total_cmp(&row[a].abs()).then(a.cmp(&b)));
            for &i in &idx[k..] {
                row[i] = 0.0;
            }
        }
        FveMode::SelectiveOnly(list) => {
            let keep: BTreeSet<usize> = list.iter().take(k).copied().collect();
            for (i, v) in row.iter_mut().enumerate() {
                if !keep.contains(&i) {
                    *v = 0.0;
                }
            }
        }
    }
}

/// `(K, FVE)` for each `K`, reconstructing from truncated feature vectors.
pub fn fve_curve(sae: &SaeParams, rows: &[f32], k_values: &[usize], mode: &FveMode) -> Result<Vec<(usize, f64)>, AnalysisError> {
    let (d, f) = (sae.d_model(), sae.d_sae());
    if let FveMode::SelectiveOnly(list) = mode {
        if let Some(&feature) = list.iter().find(|&&i| i >= f) {
            return Err(AnalysisError::FeatureOutOfRange { feature, d_sae: f });
        }
    }
    if let Some(&k) = k_values.iter().find(|&&k| k > f) {
        return Err(AnalysisError::KOutOfRange { k, d_sae: f });
    }
    let feats = sae.encode_batch(rows);
    k_values
        .iter()
        .map(|&k| {
            let mut t = feats.clone();
            t.par_chunks_mut(f).for_each(|row| truncate_row(row, k, mode));
            let recon = sae.decode_batch(&t);
            Ok((k, fraction_variance_explained(rows, &recon, d)?))
        })
        .collect()
}

/// Both FVE curves on a common K grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FveReport {
    pub n_inputs: usize,
    pub full: f64,
    pub k_values: Vec<usize>,
    pub by_magnitude: Vec<f64>,
    /// Selective-only FVE; `K` beyond the list length keeps the whole list.
    pub selective: Vec<f64>,
    pub selective_features: Vec<usize>,
    pub selective_all: f64,
    pub magnitude_monotone: bool,
    pub selective_below_magnitude: bool,
}

impl FveReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,fve_magnitude,fve_selective\n");
        for ((k, m), s) in self.k_values.iter().zip(&self.by_magnitude).zip(&self.selective) {
            out.push_str(&format!("{k},{m:.6},{s:.6}\n"));
        }
        out
    }

    /// By-magnitude FVE at `k`, if on the grid.
    pub fn magnitude_at(&self, k: usize) -> Option<f64> {
        self.k_values.iter().position(|&x| x == k).map(|i| self.by_magnitude[i])
    }
}

pub fn fve_report(sae: &SaeParams, rows: &[f32], k_values: &[usize], selective: &[usize]) -> Result<FveReport, AnalysisError> {
    let d = sae.d_model();
    let full = fve_curve(sae, rows, &[sae.d_sae()], &FveMode::ByMagnitude)?[0].1;
    let mag: Vec<f64> = fve_curve(sae, rows, k_values, &FveMode::ByMagnitude)?.into_iter().map(|x| x.1).collect();
    let sel_mode = FveMode::SelectiveOnly(selective.to_vec());
    let sel: Vec<f64> = fve_curve(sae, rows, k_values, &sel_mode)?.into_iter().map(|x| x.1).collect();
    let selective_all = fve_curve(sae, rows, &[selective.len()], &sel_mode)?[0].1;
    Ok(FveReport {
        n_inputs: rows.len() / d,
        full,
        k_values: k_values.to_vec(),
        magnitude_monotone: mag.windows(2).all(|w| w[1] >= w[0]),
        selective_below_magnitude: sel.iter().zip(&mag).all(|(s, m)| s <= m),
        by_magnitude: mag,
        selective: sel,
        selective_features: selective.to_vec(),
        selective_all,
    })
}

// ---------------------------------------------------------------------------
// Reliability stratification
// ---------------------------------------------------------------------------

/// Observable properties and causal force of one feature under paraphrase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratificationRow {
    pub name: String,
    pub feature: usize,
    pub firing_rate: f64,
    pub mean_activation: f64,
    /// Population `σ/μ` of the activation.
    pub cv: f64,
    /// `mean_io / max(mean_s, 0.1)` from the selectivity table.
    pub selectivity_ratio: f64,
    /// Unfloored `mean_io / mean_s`; `None` when undefined or infinite
    /// (`mean_s = 0`).
    pub raw_selectivity_ratio: Option<f64>,
    pub peak_to_mean: f64,
    /// Mean `Δ_clean − Δ_ablated` on the paraphrase prompts.
    pub causal_drop: f64,
    pub n_prompts: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratificationReport {
    pub rows: Vec<StratificationRow>,
    /// Pearson r between selectivity ratio and causal drop; `None` when
    /// either has zero variance.
    pub pearson_r: Option<f64>,
    pub firing_threshold: f32,
}

impl StratificationReport {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("name,feature,firing_rate,mean_activation,cv,selectivity_ratio,raw_selectivity_ratio,peak_to_mean,causal_drop,n_prompts\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6},{},{:.6},{:.6},{}\n",
                r.name,
                r.feature,
                r.firing_rate,
                r.mean_activation,
                r.cv,
                r.selectivity_ratio,
                r.raw_selectivity_ratio.map_or(String::new(), |v| format!("{v:.6}")),
                r.peak_to_mean,
                r.causal_drop,
                r.n_prompts
            ));
        }
        out
    }
}

/// Observables of one feature over a set of IO-role evaluations.
pub fn feature_observables(acts: &[f32]) -> (f64, f64, f64, f64) {
    let m = mean(acts);
    let sd = population_std(acts).unwrap_or(0.0);
    let firing = acts.iter().filter(|&&a| a > FIRING_THRESHOLD).count() as f64 / acts.len().max(1) as f64;
    let peak = acts.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let guard = |x: f64| if m > 0.0 { x / m } else { 0.0 };
    (firing, m, guard(sd), guard(peak))
}

/// Paraphrase-varied IO-role prompts per top feature's name; observables,
/// single-feature causal drop, and their correlation.
#[allow(clippy::too_many_arguments)]
pub fn stratify(
    probe: &FeatureProbe<'_>,
    vocab: &BpeVocab,
    names: &[String],
    places: &[String],
    objects: &[String],
    top: &[TopFeature],
    n_distractors: usize,
    per_name: usize,
    seed: u64,
    frame: Frame,
) -> Result<StratificationReport, AnalysisError> {
    let mut rows = Vec::with_capacity(top.len());
    for (i, t) in top.iter().enumerate() {
        let prompts = paraphrase_prompts(
            vocab,
            &t.name,
            names,
            places,
            objects,
            n_distractors,
            per_name,
            crate::rng::derive_seed(seed, &format!("paraphrase-{i}")),
            frame,
        )?;
        if prompts.is_empty() {
            return Err(AnalysisError::EmptyCondition { name: t.name.clone(), role: "IO" });
        }
        let evals = probe.evaluate(&prompts, &[vec![t.feature]])?;
        let acts: Vec<f32> = evals.iter().map(|e| e.features[t.feature]).collect();
        let drops: Vec<f32> = evals.iter().map(|e| e.logit_diff - e.ablated[0]).collect();
        let (firing_rate, mean_activation, cv, peak_to_mean) = feature_observables(&acts);
        rows.push(StratificationRow {
            name: t.name.clone(),
            feature: t.feature,
            firing_rate,
            mean_activation,
            cv,
            selectivity_ratio: t.selectivity_ratio() as f64,
            raw_selectivity_ratio: Some(t.raw_ratio() as f64).filter(|r| r.is_finite()),
            peak_to_mean,
            causal_drop: mean(&drops),
            n_prompts: prompts.len(),
        });
    }
    let x: Vec<f64> = rows.iter().map(|r| r.selectivity_ratio).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.causal_drop).collect();
    Ok(StratificationReport {
        pearson_r: if rows.len() >= 3 { pearson(&x, &y) } else { None },
        rows,
        firing_threshold: FIRING_THRESHOLD,
    })
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_modes() {
        let mut r = vec![0.5, 3.0, 0.0, 2.0, 1.0];
        truncate_row(&mut r, 2, &FveMode::ByMagnitude);
        assert_eq!(r, vec![0.0, 3.0, 0.0, 2.0, 0.0]);
        let mut r = vec![0.5, 3.0, 0.0, 2.0, 1.0];
        truncate_row(&mut r, 2, &FveMode::SelectiveOnly(vec![4, 0, 1]));
        assert_eq!(r, vec![0.5, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn observables_of_constant_and_spread_activations() {
        let (fr, m, cv, ptm) = feature_observables(&[2.0, 2.0, 2.0]);
        assert_eq!((fr, m, cv, ptm), (1.0, 2.0, 0.0, 1.0));
        let (fr, _, cv, ptm) = feature_observables(&[0.5, 1.5, 4.0]);
        assert!((fr - 2.0 / 3.0).abs() < 1e-12);
        assert!(cv > 0.0 && ptm > 1.0);
    }

    #[test]
    fn top_feature_ratios() {
        let t = TopFeature { name: "A".into(), feature: 0, mean_io: 30.0, mean_s: 0.0, gap: 30.0 };
        assert_eq!(t.selectivity_ratio(), 300.0);
        assert!(t.raw_ratio().is_infinite());
    }
}
