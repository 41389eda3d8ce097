// SPDX-License-Identifier: MIT OR Apache-2.0

//! SAE features as deployment monitors: ROC/AUC, a template-aware heuristic
//! monitor, independence composition, the expected-cost model, threshold
//! sweeps, error-rate sensitivity and break-even analysis.
//!
//! Cost analytics consume only (TPR, FPR) pairs: error events are abstract,
//! and monitor rates come from measured activations on per-condition test
//! sets (positives: the feature's name is the IO; negatives: the name is
//! absent). The heuristic monitor's intrinsic failure is a symmetric verdict
//! flip with the configured noise rate.

use std::collections::BTreeSet;

use fancy_regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{AnalysisError, FeatureProbe, TopFeature};
use crate::ioi::{balanced_role_prompts, DatasetError, IoiPrompt, WordPools};
use crate::rng::{derive_seed, SeededRng};
use crate::robustness::{ShiftKind, ShiftSpec};
use crate::tokenizer::BpeVocab;

#[derive(Debug, Error)]
pub enum DeploymentError {
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("ROC needs both classes (positives: {positives}, negatives: {negatives})")]
    SingleClass { positives: usize, negatives: usize },
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("cannot compose rates measured under {a:?} and {b:?}")]
    ConditionMismatch { a: Option<Condition>, b: Option<Condition> },
    #[error("invalid cost model: {0}")]
    InvalidCostModel(String),
    #[error("not enough {what} prompts for {name}: need {needed}, have {found}")]
    TooFewPrompts {
        what: &'static str,
        name: String,
        needed: usize,
        found: usize,
    },
    #[error("empty {0}")]
    Empty(&'static str),
}

// ---------------------------------------------------------------------------
// ROC
// ---------------------------------------------------------------------------

/// One operating point: flag iff `score ≥ threshold`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// `+∞` for the all-negative starting point; serialized as `null`.
    #[serde(with = "infinite_as_null")]
    pub threshold: f32,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// From `(0, 0)` at `+∞` to `(1, 1)`, one point per distinct score.
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// JSON has no infinity: `+∞` round-trips through `null`.
mod infinite_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f32, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f32(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f32, D::Error> {
        Ok(Option::<f32>::deserialize(d)?.unwrap_or(f32::INFINITY))
    }
}

/// ROC over the distinct scores; equal scores form a single threshold, and
/// the area is the trapezoid sum.
pub fn roc(scores: &[f32], labels: &[bool]) -> Result<RocCurve, DeploymentError> {
    if scores.len() != labels.len() {
        return Err(DeploymentError::LengthMismatch { scores: scores.len(), labels: labels.len() });
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(DeploymentError::SingleClass { positives, negatives });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint { threshold: f32::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / negatives as f64,
            tpr: tp as f64 / positives as f64,
        });
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum();
    Ok(RocCurve { points, auc })
}

// ---------------------------------------------------------------------------
// Rates and composition
// ---------------------------------------------------------------------------

/// Traffic condition a rate was measured under.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    InDist,
    OodContent,
    NewFrame,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::InDist, Condition::OodContent, Condition::NewFrame];

    pub fn shift(self) -> ShiftKind {
        match self {
            Condition::InDist => ShiftKind::None,
            Condition::OodContent => ShiftKind::OodContent,
            Condition::NewFrame => ShiftKind::ReformulatedFrame,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Condition::InDist => "in_dist",
            Condition::OodContent => "ood_content",
            Condition::NewFrame => "new_frame",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonitorRates {
    pub tpr: f64,
    pub fpr: f64,
    /// `None` for traffic-mixed rates.
    pub condition: Option<Condition>,
    /// SAE activation threshold, when one applies.
    pub threshold: Option<f32>,
}

impl MonitorRates {
    pub fn new(tpr: f64, fpr: f64, condition: Option<Condition>) -> Self {
        Self { tpr, fpr, condition, threshold: None }
    }

    /// F1 at a given positive/negative test-set split.
    pub fn f1(&self, positives: usize, negatives: usize) -> f64 {
        let tp = self.tpr * positives as f64;
        let fp = self.fpr * negatives as f64;
        if tp == 0.0 {
            return 0.0;
        }
        let precision = tp / (tp + fp);
        2.0 * precision * self.tpr / (precision + self.tpr)
    }

    /// Symmetric verdict flip with probability `noise`.
    pub fn with_flip_noise(&self, noise: f64) -> Self {
        Self {
            tpr: self.tpr * (1.0 - noise) + (1.0 - self.tpr) * noise,
            fpr: self.fpr * (1.0 - noise) + (1.0 - self.fpr) * noise,
            ..*self
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComposeOp {
    And,
    Or,
}

/// Composition of two monitors assuming independent errors.
pub fn compose(a: &MonitorRates, b: &MonitorRates, op: ComposeOp) -> Result<MonitorRates, DeploymentError> {
    if a.condition != b.condition {
        return Err(DeploymentError::ConditionMismatch { a: a.condition, b: b.condition });
    }
    let (tpr, fpr) = match op {
        ComposeOp::And => (a.tpr * b.tpr, a.fpr * b.fpr),
        ComposeOp::Or => (1.0 - (1.0 - a.tpr) * (1.0 - b.tpr), 1.0 - (1.0 - a.fpr) * (1.0 - b.fpr)),
    };
    Ok(MonitorRates { tpr, fpr, condition: a.condition, threshold: a.threshold.or(b.threshold) })
}

// ---------------------------------------------------------------------------
// Heuristic monitor
// ---------------------------------------------------------------------------

/// Template-aware parser: of the two introduced names, the one not repeated
/// as the giver is the IO.
pub struct HeuristicMonitor {
    patterns: Vec<Regex>,
}

impl Default for HeuristicMonitor {
    fn default() -> Self {
        let patterns = [
            r"^When (\w+) and (\w+) went to the \w+, (\w+) gave an? \w+ to$",
            r"^After (\w+) and (\w+) arrived at the \w+, it was (\w+) who handed an? \w+ to$",
        ];
        Self { patterns: patterns.iter().map(|p| Regex::new(p).expect("static pattern")).collect() }
    }
}

impl HeuristicMonitor {
    /// The parsed IO name, or `None` (abstain) when the text does not match
    /// a known frame or its names are inconsistent.
    pub fn parse_io(&self, text: &str) -> Option<String> {
        let caps = self.patterns.iter().find_map(|re| re.captures(text).ok().flatten())?;
        let (n1, n2, n3) = (&caps[1], &caps[2], &caps[3]);
        if n1 == n2 {
            return None;
        }
        if n3 == n1 {
            Some(n2.to_string())
        } else if n3 == n2 {
            Some(n1.to_string())
        } else {
            None
        }
    }

    /// Noiseless verdict: flag iff the parsed IO is `name`.
    pub fn verdict(&self, text: &str, name: &str) -> bool {
        self.parse_io(text).is_some_and(|io| io == name)
    }

    /// Verdict flipped with probability `noise_rate`, seeded per query id.
    /// Abstentions stay unflagged.
    pub fn noisy_verdict(&self, text: &str, name: &str, noise_seed: u64, query_id: &str, noise_rate: f64) -> bool {
        match self.parse_io(text) {
            None => false,
            Some(io) => {
                let flip = SeededRng::new(derive_seed(noise_seed, query_id)).bernoulli(noise_rate);
                (io == name) != flip
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Measurement
// ---------------------------------------------------------------------------

/// One feature-monitor's test set under one condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureTestSet {
    pub name: String,
    pub feature: usize,
    pub condition: Condition,
    pub positive_scores: Vec<f32>,
    pub negative_scores: Vec<f32>,
    /// Noiseless heuristic verdicts on the same prompts.
    pub heuristic_positive: Vec<bool>,
    pub heuristic_negative: Vec<bool>,
    /// Heuristic verdicts with per-query flip noise.
    pub noisy_heuristic_positive: Vec<bool>,
    pub noisy_heuristic_negative: Vec<bool>,
}

impl FeatureTestSet {
    pub fn roc(&self) -> Result<RocCurve, DeploymentError> {
        let scores: Vec<f32> = self.positive_scores.iter().chain(&self.negative_scores).copied().collect();
        let labels: Vec<bool> = (0..scores.len()).map(|i| i < self.positive_scores.len()).collect();
        roc(&scores, &labels)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonitorConfig {
    pub n_positive: usize,
    pub n_negative: usize,
    /// IO-role prompts per name in each condition's shared pool.
    pub pool_per_name: usize,
    /// Features whose ROC curves are reported.
    pub roc_features: usize,
    /// Features pooled into the SAE monitor's rates (table and sweep).
    pub monitor_features: usize,
    /// SAE threshold for the composition table.
    pub table_threshold: f32,
    pub theta_min: f32,
    pub theta_max: f32,
    pub theta_step: f32,
    pub noise_seed: u64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            n_positive: 50,
            n_negative: 200,
            pool_per_name: 50,
            roc_features: 10,
            monitor_features: 5,
            table_threshold: 15.0,
            theta_min: 0.0,
            theta_max: 40.0,
            theta_step: 1.0,
            noise_seed: 0,
        }
    }
}

impl MonitorConfig {
    pub fn theta_grid(&self) -> Vec<f32> {
        let steps = ((self.theta_max - self.theta_min) / self.theta_step).round().max(0.0) as usize;
        (0..=steps).map(|i| self.theta_min + i as f32 * self.theta_step).collect()
    }
}

/// Scores and heuristic verdicts for every (condition, feature).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonitorMeasurements {
    pub features: Vec<TopFeature>,
    pub sets: Vec<FeatureTestSet>,
    pub heuristic_noise: f64,
}

impl MonitorMeasurements {
    pub fn sets_for(&self, condition: Condition) -> impl Iterator<Item = &FeatureTestSet> {
        self.sets.iter().filter(move |s| s.condition == condition)
    }

    /// SAE monitor rates at `theta` (flag iff activation > θ), pooled over the
    /// first `n_features` features.
    pub fn sae_rates(&self, condition: Condition, theta: f32, n_features: usize) -> MonitorRates {
        let (mut tp, mut np, mut fp, mut nn) = (0usize, 0usize, 0usize, 0usize);
        for s in self.sets_for(condition).take(n_features) {
            tp += s.positive_scores.iter().filter(|&&x| x > theta).count();
            fp += s.negative_scores.iter().filter(|&&x| x > theta).count();
            np += s.positive_scores.len();
            nn += s.negative_scores.len();
        }
        MonitorRates {
            tpr: tp as f64 / np.max(1) as f64,
            fpr: fp as f64 / nn.max(1) as f64,
            condition: Some(condition),
            threshold: Some(theta),
        }
    }

    fn verdict_rates(&self, condition: Condition, n_features: usize, noisy: bool) -> MonitorRates {
        let (mut tp, mut np, mut fp, mut nn) = (0usize, 0usize, 0usize, 0usize);
        for s in self.sets_for(condition).take(n_features) {
            let (pos, neg) = if noisy {
                (&s.noisy_heuristic_positive, &s.noisy_heuristic_negative)
            } else {
                (&s.heuristic_positive, &s.heuristic_negative)
            };
            tp += pos.iter().filter(|&&v| v).count();
            fp += neg.iter().filter(|&&v| v).count();
            np += pos.len();
            nn += neg.len();
        }
        MonitorRates::new(tp as f64 / np.max(1) as f64, fp as f64 / nn.max(1) as f64, Some(condition))
    }

    /// Noiseless heuristic rates measured on the test sets.
    pub fn heuristic_rates(&self, condition: Condition, n_features: usize) -> MonitorRates {
        self.verdict_rates(condition, n_features, false)
    }

    /// Heuristic rates measured with per-query flip noise.
    pub fn noisy_heuristic_rates(&self, condition: Condition, n_features: usize) -> MonitorRates {
        self.verdict_rates(condition, n_features, true)
    }
}

/// Pick `n` items with a seeded shuffle, keeping the pool order among them.
fn seeded_subset(items: Vec<&IoiPrompt>, n: usize, seed: u64) -> Vec<&IoiPrompt> {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    SeededRng::new(seed).shuffle(&mut idx);
    let keep: BTreeSet<usize> = idx.into_iter().take(n).collect();
    keep.into_iter().map(|i| items[i]).collect()
}

/// Build each condition's shared prompt pool, encode it once, and cut every
/// feature's positive/negative test set from it.
pub fn measure_monitors(
    probe: &FeatureProbe<'_>,
    vocab: &BpeVocab,
    pools: &WordPools,
    features: &[TopFeature],
    config: &MonitorConfig,
    heuristic_noise: f64,
    seed: u64,
) -> Result<MonitorMeasurements, DeploymentError> {
    if features.is_empty() {
        return Err(DeploymentError::Empty("feature list"));
    }
    let heuristic = HeuristicMonitor::default();
    let d_sae = probe.d_sae();
    let mut sets = Vec::new();
    for condition in Condition::ALL {
        let spec = ShiftSpec::new(condition.shift());
        let (names, places, objects) = pools.select(spec.pools);
        let cond_seed = derive_seed(seed, &format!("monitor/{}", condition.label()));
        let pool = balanced_role_prompts(vocab, names, places, objects, cond_seed, config.pool_per_name, spec.frame)?;
        let feats = probe.end_features(&pool)?;
        for (fi, t) in features.iter().enumerate() {
            let pos: Vec<&IoiPrompt> = pool.iter().filter(|p| p.io_name == t.name).collect();
            let neg: Vec<&IoiPrompt> = pool.iter().filter(|p| p.io_name != t.name && p.s_name != t.name).collect();
            for (what, have, need) in [("positive", pos.len(), config.n_positive), ("negative", neg.len(), config.n_negative)] {
                if have < need {
                    return Err(DeploymentError::TooFewPrompts { what, name: t.name.clone(), needed: need, found: have });
                }
            }
            let pos = seeded_subset(pos, config.n_positive, derive_seed(cond_seed, &format!("pos/{fi}")));
            let neg = seeded_subset(neg, config.n_negative, derive_seed(cond_seed, &format!("neg/{fi}")));
            let index_of = |p: &IoiPrompt| pool.iter().position(|q| std::ptr::eq(q, p)).expect("from pool");
            let score = |p: &IoiPrompt| feats[index_of(p) * d_sae + t.feature];
            let noisy = |p: &IoiPrompt| {
                let id = format!("{}/{}/{}", condition.label(), fi, index_of(p));
                heuristic.noisy_verdict(&p.text, &t.name, config.noise_seed, &id, heuristic_noise)
            };
            sets.push(FeatureTestSet {
                name: t.name.clone(),
                feature: t.feature,
                condition,
                positive_scores: pos.iter().map(|p| score(p)).collect(),
                negative_scores: neg.iter().map(|p| score(p)).collect(),
                heuristic_positive: pos.iter().map(|p| heuristic.verdict(&p.text, &t.name)).collect(),
                heuristic_negative: neg.iter().map(|p| heuristic.verdict(&p.text, &t.name)).collect(),
                noisy_heuristic_positive: pos.iter().map(|p| noisy(p)).collect(),
                noisy_heuristic_negative: neg.iter().map(|p| noisy(p)).collect(),
            });
        }
    }
    Ok(MonitorMeasurements { features: features.to_vec(), sets, heuristic_noise })
}

// ---------------------------------------------------------------------------
// ROC and composition tables
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocRow {
    pub name: String,
    pub feature: usize,
    pub condition: Condition,
    pub auc: f64,
}

/// AUC for the first `n_features` features under every condition.
pub fn roc_table(m: &MonitorMeasurements, n_features: usize) -> Result<Vec<RocRow>, DeploymentError> {
    Condition::ALL
        .iter()
        .flat_map(|&c| m.sets_for(c).take(n_features))
        .map(|s| {
            Ok(RocRow {
                name: s.name.clone(),
                feature: s.feature,
                condition: s.condition,
                auc: s.roc()?.auc,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MonitorKind {
    SaeOnly,
    HeuristicOnly,
    SaeAndHeur,
    SaeOrHeur,
    NoMonitor,
}

impl MonitorKind {
    pub const ALL: [MonitorKind; 5] = [
        MonitorKind::SaeOnly,
        MonitorKind::HeuristicOnly,
        MonitorKind::SaeAndHeur,
        MonitorKind::SaeOrHeur,
        MonitorKind::NoMonitor,
    ];

    pub fn label(self) -> &'static str {
        match self {
            MonitorKind::SaeOnly => "sae_only",
            MonitorKind::HeuristicOnly => "heuristic_only",
            MonitorKind::SaeAndHeur => "sae_and_heur",
            MonitorKind::SaeOrHeur => "sae_or_heur",
            MonitorKind::NoMonitor => "no_monitor",
        }
    }

    /// Rates of this configuration from its components' rates.
    pub fn rates(self, sae: &MonitorRates, heur: &MonitorRates) -> MonitorRates {
        match self {
            MonitorKind::SaeOnly => *sae,
            MonitorKind::HeuristicOnly => MonitorRates { threshold: None, ..*heur },
            MonitorKind::SaeAndHeur => compose(sae, heur, ComposeOp::And).expect("same condition"),
            MonitorKind::SaeOrHeur => compose(sae, heur, ComposeOp::Or).expect("same condition"),
            MonitorKind::NoMonitor => MonitorRates::new(0.0, 0.0, sae.condition),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositionRow {
    pub monitor: MonitorKind,
    pub condition: Condition,
    pub tpr: f64,
    pub fpr: f64,
    pub f1: f64,
    /// Per-prompt conjunction/disjunction on the same test sets (for
    /// checking the independence assumption); equals the composed values for
    /// single monitors.
    pub empirical_tpr: f64,
    pub empirical_fpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositionTable {
    pub threshold: f32,
    pub n_features: usize,
    /// Composition rows assume independent monitor errors.
    pub assumption: String,
    pub rows: Vec<CompositionRow>,
}

impl CompositionTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("monitor,condition,tpr,fpr,f1,empirical_tpr,empirical_fpr\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                r.monitor.label(),
                r.condition.label(),
                r.tpr,
                r.fpr,
                r.f1,
                r.empirical_tpr,
                r.empirical_fpr
            ));
        }
        out
    }

    pub fn get(&self, monitor: MonitorKind, condition: Condition) -> Option<&CompositionRow> {
        self.rows.iter().find(|r| r.monitor == monitor && r.condition == condition)
    }
}

/// SAE-only, heuristic-only (noiseless), AND and OR per condition.
pub fn composition_table(m: &MonitorMeasurements, config: &MonitorConfig) -> CompositionTable {
    let n = config.monitor_features;
    let theta = config.table_threshold;
    let mut rows = Vec::new();
    for condition in Condition::ALL {
        let sae = m.sae_rates(condition, theta, n);
        let heur = m.heuristic_rates(condition, n);
        for monitor in &MonitorKind::ALL[..4] {
            let r = monitor.rates(&sae, &heur);
            let joint = |f: &dyn Fn(bool, bool) -> bool| {
                let (mut tp, mut np, mut fp, mut nn) = (0usize, 0usize, 0usize, 0usize);
                for s in m.sets_for(condition).take(n) {
                    for (x, &h) in s.positive_scores.iter().zip(&s.heuristic_positive) {
                        tp += f(*x > theta, h) as usize;
                        np += 1;
                    }
                    for (x, &h) in s.negative_scores.iter().zip(&s.heuristic_negative) {
                        fp += f(*x > theta, h) as usize;
                        nn += 1;
                    }
                }
                (tp as f64 / np.max(1) as f64, fp as f64 / nn.max(1) as f64)
            };
            let (et, ef) = match monitor {
                MonitorKind::SaeOnly => joint(&|s, _| s),
                MonitorKind::HeuristicOnly => joint(&|_, h| h),
                MonitorKind::SaeAndHeur => joint(&|s, h| s && h),
                _ => joint(&|s, h| s || h),
            };
            rows.push(CompositionRow {
                monitor: *monitor,
                condition,
                tpr: r.tpr,
                fpr: r.fpr,
                f1: r.f1(config.n_positive, config.n_negative),
                empirical_tpr: et,
                empirical_fpr: ef,
            });
        }
    }
    CompositionTable {
        threshold: theta,
        n_features: n,
        assumption: "AND/OR rows compose measured rates assuming independent monitor errors".into(),
        rows,
    }
}

// ---------------------------------------------------------------------------
// Cost model
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficMix {
    pub in_dist: f64,
    pub ood: f64,
    pub frame: f64,
}

impl TrafficMix {
    pub fn weight(&self, c: Condition) -> f64 {
        match c {
            Condition::InDist => self.in_dist,
            Condition::OodContent => self.ood,
            Condition::NewFrame => self.frame,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModel {
    pub c_fn: f64,
    pub c_fp: f64,
    pub p_err: f64,
    pub traffic_mix: TrafficMix,
    pub heuristic_noise: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            c_fn: 50.0,
            c_fp: 0.42,
            p_err: 0.02,
            traffic_mix: TrafficMix { in_dist: 0.70, ood: 0.15, frame: 0.15 },
            heuristic_noise: 0.05,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), DeploymentError> {
        let bad = |m: String| Err(DeploymentError::InvalidCostModel(m));
        let prob = |x: f64| (0.0..=1.0).contains(&x);
        if !(self.c_fn >= 0.0 && self.c_fn.is_finite()) {
            return bad(format!("c_fn = {} must be finite and ≥ 0", self.c_fn));
        }
        if !(self.c_fp >= 0.0 && self.c_fp.is_finite()) {
            return bad(format!("c_fp = {} must be finite and ≥ 0", self.c_fp));
        }
        if !prob(self.p_err) {
            return bad(format!("p_err = {} outside [0, 1]", self.p_err));
        }
        if !prob(self.heuristic_noise) {
            return bad(format!("heuristic_noise = {} outside [0, 1]", self.heuristic_noise));
        }
        let m = self.traffic_mix;
        if ![m.in_dist, m.ood, m.frame].into_iter().all(prob) || ((m.in_dist + m.ood + m.frame) - 1.0).abs() > 1e-9 {
            return bad(format!("traffic_mix {m:?} must be probabilities summing to 1"));
        }
        Ok(())
    }

    /// Expected cost in dollars per 1000 queries.
    pub fn expected_cost(&self, rates: &MonitorRates) -> f64 {
        1000.0 * (self.p_err * (1.0 - rates.tpr) * self.c_fn + (1.0 - self.p_err) * rates.fpr * self.c_fp)
    }

    /// Cost of deploying no monitor.
    pub fn baseline_cost(&self) -> f64 {
        self.expected_cost(&MonitorRates::new(0.0, 0.0, None))
    }

    /// Traffic-weighted average of per-condition rates.
    pub fn mix(&self, per_condition: &[MonitorRates]) -> MonitorRates {
        let (mut tpr, mut fpr) = (0.0, 0.0);
        for r in per_condition {
            let w = r.condition.map_or(0.0, |c| self.traffic_mix.weight(c));
            tpr += w * r.tpr;
            fpr += w * r.fpr;
        }
        MonitorRates { tpr, fpr, condition: None, threshold: per_condition.first().and_then(|r| r.threshold) }
    }
}

/// Smallest false-negative cost at which a monitor beats no monitor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum BreakEven {
    /// Any positive FN cost suffices (the monitor raises no false alarms).
    ZeroPlus,
    /// Beats no monitor for every `c_fn` strictly above this value.
    Above(f64),
    /// Never beats no monitor (it catches nothing).
    Never,
}

/// Closed form: the monitor wins iff `c_fn > (1−p)·FPR·c_fp / (p·TPR)`.
pub fn break_even(model: &CostModel, rates: &MonitorRates) -> BreakEven {
    if rates.tpr <= 0.0 || model.p_err <= 0.0 {
        return BreakEven::Never;
    }
    if rates.fpr <= 0.0 || model.c_fp <= 0.0 {
        return BreakEven::ZeroPlus;
    }
    BreakEven::Above((1.0 - model.p_err) * rates.fpr * model.c_fp / (model.p_err * rates.tpr))
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub monitor: MonitorKind,
    pub theta: f32,
    pub tpr: f64,
    pub fpr: f64,
    pub cost_per_1000: f64,
}

/// Machine-readable deployment recommendation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub config: MonitorKind,
    pub theta: f32,
    pub tpr: f64,
    pub fpr: f64,
    pub cost_per_1000: f64,
    pub savings_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostSweep {
    pub model: CostModel,
    pub baseline_cost: f64,
    /// Every (config, θ), in config then θ order.
    pub rows: Vec<SweepRow>,
    pub optimum: Recommendation,
    pub break_even: BreakEven,
}

impl CostSweep {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("monitor,theta,tpr,fpr,cost_per_1000\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6}\n",
                r.monitor.label(),
                r.theta,
                r.tpr,
                r.fpr,
                r.cost_per_1000
            ));
        }
        out
    }

    /// Rows sorted by cost (ties keep config then θ order).
    pub fn ranked(&self) -> Vec<&SweepRow> {
        let mut v: Vec<&SweepRow> = self.rows.iter().collect();
        v.sort_by(|a, b| a.cost_per_1000.total_cmp(&b.cost_per_1000));
        v
    }
}

/// Traffic-mixed rates of every configuration at every θ; the optimum is the
/// cheapest row (ties: config order, then lower θ).
pub fn cost_sweep(m: &MonitorMeasurements, model: &CostModel, config: &MonitorConfig) -> Result<CostSweep, DeploymentError> {
    model.validate()?;
    let grid = config.theta_grid();
    if grid.is_empty() {
        return Err(DeploymentError::Empty("threshold grid"));
    }
    let n = config.monitor_features;
    let heur: Vec<MonitorRates> = Condition::ALL
        .iter()
        .map(|&c| m.heuristic_rates(c, n).with_flip_noise(model.heuristic_noise))
        .collect();
    let mut rows = Vec::new();
    for monitor in MonitorKind::ALL {
        for &theta in &grid {
            let per: Vec<MonitorRates> = Condition::ALL
                .iter()
                .zip(&heur)
                .map(|(&c, h)| monitor.rates(&m.sae_rates(c, theta, n), h))
                .collect();
            let mixed = model.mix(&per);
            rows.push(SweepRow {
                monitor,
                theta,
                tpr: mixed.tpr,
                fpr: mixed.fpr,
                cost_per_1000: model.expected_cost(&mixed),
            });
        }
    }
    let best = rows
        .iter()
        .min_by(|a, b| a.cost_per_1000.total_cmp(&b.cost_per_1000))
        .expect("non-empty grid");
    let baseline_cost = model.baseline_cost();
    let savings_pct = if baseline_cost > 0.0 { 100.0 * (baseline_cost - best.cost_per_1000) / baseline_cost } else { 0.0 };
    let optimum = Recommendation {
        config: best.monitor,
        theta: best.theta,
        tpr: best.tpr,
        fpr: best.fpr,
        cost_per_1000: best.cost_per_1000,
        savings_pct,
    };
    let rates = MonitorRates::new(optimum.tpr, optimum.fpr, None);
    Ok(CostSweep { model: *model, baseline_cost, break_even: break_even(model, &rates), rows, optimum })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub p_err: f64,
    pub optimum: Recommendation,
    pub baseline_cost: f64,
    /// Cheapest row per configuration at this error rate.
    pub best_per_config: Vec<(MonitorKind, f32, f64)>,
}

/// Re-run the sweep at each base error rate.
pub fn sensitivity(
    m: &MonitorMeasurements,
    model: &CostModel,
    config: &MonitorConfig,
    p_err_grid: &[f64],
) -> Result<Vec<SensitivityRow>, DeploymentError> {
    p_err_grid
        .iter()
        .map(|&p| {
            let sweep = cost_sweep(m, &CostModel { p_err: p, ..*model }, config)?;
            let best_per_config = MonitorKind::ALL
                .iter()
                .map(|&k| {
                    let best = sweep
                        .rows
                        .iter()
                        .filter(|r| r.monitor == k)
                        .min_by(|a, b| a.cost_per_1000.total_cmp(&b.cost_per_1000))
                        .expect("grid non-empty");
                    (k, best.theta, best.cost_per_1000)
                })
                .collect();
            Ok(SensitivityRow { p_err: p, optimum: sweep.optimum, baseline_cost: sweep.baseline_cost, best_per_config })
        })
        .collect()
}

pub fn sensitivity_csv(rows: &[SensitivityRow]) -> String {
    let mut out = String::from("p_err,optimum,theta,cost_per_1000,baseline_cost");
    for k in MonitorKind::ALL {
        out.push_str(&format!(",{}", k.label()));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6}",
            r.p_err,
            r.optimum.config.label(),
            r.optimum.theta,
            r.optimum.cost_per_1000,
            r.baseline_cost
        ));
        for (_, _, c) in &r.best_per_config {
            out.push_str(&format!(",{c:.6}"));
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roc_examples() {
        let labels = [true, true, false, false];
        assert_eq!(roc(&[0.9, 0.8, 0.2, 0.1], &labels).unwrap().auc, 1.0);
        assert_eq!(roc(&[0.5; 4], &labels).unwrap().auc, 0.5);
        assert_eq!(roc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap().auc, 0.0);
        assert!(matches!(roc(&[1.0], &[true]), Err(DeploymentError::SingleClass { .. })));
    }

    #[test]
    fn cost_examples() {
        let m = CostModel::default();
        assert!((m.baseline_cost() - 1000.0).abs() < 1e-9);
        assert_eq!(m.expected_cost(&MonitorRates::new(1.0, 0.0, None)), 0.0);
        assert!((m.expected_cost(&MonitorRates::new(0.99, 0.0, None)) - 10.0).abs() < 1e-9);
    }

    #[test]
    fn compose_examples() {
        let c = Some(Condition::InDist);
        let and = compose(&MonitorRates::new(1.0, 0.0, c), &MonitorRates::new(1.0, 0.0, c), ComposeOp::And).unwrap();
        assert_eq!((and.tpr, and.fpr), (1.0, 0.0));
        let and = compose(&MonitorRates::new(0.99, 0.2, c), &MonitorRates::new(0.95, 0.05, c), ComposeOp::And).unwrap();
        assert!((and.tpr - 0.9405).abs() < 1e-12);
        let or = compose(&MonitorRates::new(0.0, 0.0, c), &MonitorRates::new(0.3, 0.2, c), ComposeOp::Or).unwrap();
        assert!((or.tpr - 0.3).abs() < 1e-12 && (or.fpr - 0.2).abs() < 1e-12);
        assert!(compose(&MonitorRates::new(0.0, 0.0, c), &MonitorRates::new(0.0, 0.0, None), ComposeOp::Or).is_err());
    }

    #[test]
    fn break_even_cases() {
        let m = CostModel::default();
        assert_eq!(break_even(&m, &MonitorRates::new(1.0, 0.0, None)), BreakEven::ZeroPlus);
        assert_eq!(break_even(&m, &MonitorRates::new(0.0, 0.1, None)), BreakEven::Never);
        match break_even(&m, &MonitorRates::new(0.5, 0.01, None)) {
            BreakEven::Above(c) => {
                assert!((c - 0.98 * 0.01 * 0.42 / (0.02 * 0.5)).abs() < 1e-12);
                // Just above break-even the monitor wins; just below it loses.
                let rates = MonitorRates::new(0.5, 0.01, None);
                let win = CostModel { c_fn: c * 1.001, ..m };
                let lose = CostModel { c_fn: c * 0.999, ..m };
                assert!(win.expected_cost(&rates) < win.baseline_cost());
                assert!(lose.expected_cost(&rates) > lose.baseline_cost());
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn heuristic_parses_both_frames() {
        let h = HeuristicMonitor::default();
        assert_eq!(h.parse_io("When Mary and John went to the store, John gave a drink to").as_deref(), Some("Mary"));
        assert_eq!(h.parse_io("When Mary and John went to the store, Mary gave a drink to").as_deref(), Some("John"));
        assert_eq!(
            h.parse_io("After Tom and Amy arrived at the park, it was Tom who handed a ball to").as_deref(),
            Some("Amy")
        );
        assert_eq!(h.parse_io("When Mary and John went to the store, Sid gave a drink to"), None);
        assert_eq!(h.parse_io("Mary gave John a drink."), None);
        assert!(!h.noisy_verdict("garbled", "Mary", 0, "q", 1.0));
    }

    #[test]
    fn flip_noise_of_a_perfect_monitor() {
        let r = MonitorRates::new(1.0, 0.0, None).with_flip_noise(0.05);
        assert!((r.tpr - 0.95).abs() < 1e-12 && (r.fpr - 0.05).abs() < 1e-12);
    }

    #[test]
    fn cost_model_validation() {
        assert!(CostModel::default().validate().is_ok());
        let bad_mix = CostModel { traffic_mix: TrafficMix { in_dist: 0.7, ood: 0.2, frame: 0.2 }, ..Default::default() };
        assert!(bad_mix.validate().is_err());
        assert!(CostModel { p_err: 1.5, ..Default::default() }.validate().is_err());
        assert!(CostModel { c_fp: -1.0, ..Default::default() }.validate().is_err());
    }
}
