// SPDX-License-Identifier: MIT OR Apache-2.0

//! Logit difference, recovery normalization and the two activation-patching
//! sweeps (residual stream by layer × position, attention heads by layer ×
//! head).
//!
//! Every patched quantity is measured with the *clean* prompt's IO and S token
//! ids at the END position. A pair whose clean-to-corrupt gap is below
//! [`DEGENERATE_GAP`] is excluded from every mean and counted in the grid.
//!
//! The per-pair work (two traced runs plus one batched resume per layer) runs
//! in parallel across pairs; cells are merged by indexed writes and averaged
//! with [`ordered_mean`], so grids are independent of pair order and thread
//! scheduling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ioi::{IoiPrompt, MinimalPair};
use crate::model::{HookSite, ModelError, ModelWeights, PatchSet, Position, RunTrace};
use crate::stats::ordered_mean;
use crate::tensor::Tensor;

/// Pairs whose `|Δ_clean − Δ_corrupt|` falls below this are degenerate.
pub const DEGENERATE_GAP: f32 = 1e-6;

/// Prompts per batched forward in [`baseline`].
const BASELINE_CHUNK: usize = 16;

#[derive(Debug, Error)]
pub enum PatchingError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("token id {id} out of range for a logits row of {len}")]
    TokenOutOfRange { id: u32, len: usize },
    #[error("no prompts or pairs supplied")]
    Empty,
    #[error("pair {index}: length {found} differs from {expected}")]
    LengthMismatch { index: usize, expected: usize, found: usize },
    #[error("pair {index}: clean and corrupt prompts have different role positions")]
    Misaligned { index: usize },
    #[error("layer {layer} out of range for a {n_layers}-layer model")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("head {head} out of range for {n_heads} heads")]
    HeadOutOfRange { head: usize, n_heads: usize },
    #[error("every pair is degenerate (clean-to-corrupt gap below {DEGENERATE_GAP})")]
    AllDegenerate,
}

// ---------------------------------------------------------------------------
// Metric
// ---------------------------------------------------------------------------

/// `logits[io] − logits[s]` for one END-position logits row.
pub fn logit_diff(logits: &[f32], io_token: u32, s_token: u32) -> Result<f32, PatchingError> {
    let get = |id: u32| {
        logits
            .get(id as usize)
            .copied()
            .ok_or(PatchingError::TokenOutOfRange { id, len: logits.len() })
    };
    Ok(get(io_token)? - get(s_token)?)
}

/// `(Δ_patched − Δ_corrupt) / (Δ_clean − Δ_corrupt)`, or `None` when the gap
/// is degenerate. The value is unclamped: it may be negative or exceed one.
pub fn recovery(patched: f32, clean: f32, corrupt: f32) -> Option<f32> {
    let gap = clean as f64 - corrupt as f64;
    if !gap.is_finite() || gap.abs() < DEGENERATE_GAP as f64 {
        return None;
    }
    Some(((patched as f64 - corrupt as f64) / gap) as f32)
}

/// Logit difference at END computed straight from a final residual stream.
fn end_logit_diff(weights: &ModelWeights, final_resid: &[f32], prompt: &IoiPrompt) -> f32 {
    let d = weights.config().d_model;
    let end = prompt.labels.end;
    let l = weights.logits_for_resid(&final_resid[end * d..(end + 1) * d], &[prompt.io_token_id, prompt.s_token_id]);
    l[0] - l[1]
}

// ---------------------------------------------------------------------------
// Baseline
// ---------------------------------------------------------------------------

/// Unpatched behaviour on a prompt batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub n_prompts: usize,
    pub mean_logit_diff: f64,
    /// Fraction of prompts with a strictly positive logit difference.
    pub frac_correct: f64,
    pub logit_diffs: Vec<f32>,
}

/// Per-prompt logit differences (prompt order preserved).
pub fn logit_diffs(weights: &ModelWeights, prompts: &[IoiPrompt]) -> Result<Vec<f32>, PatchingError> {
    let n_layers = weights.config().n_layers;
    let chunks: Vec<Vec<f32>> = prompts
        .par_chunks(BASELINE_CHUNK)
        .map(|chunk| {
            let tokens: Vec<&[u32]> = chunk.iter().map(|p| p.token_ids.as_slice()).collect();
            let finals = weights.resid_pre_batch(&tokens, n_layers)?;
            Ok(chunk.iter().zip(&finals).map(|(p, r)| end_logit_diff(weights, r, p)).collect())
        })
        .collect::<Result<_, ModelError>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

pub fn baseline(weights: &ModelWeights, prompts: &[IoiPrompt]) -> Result<BaselineReport, PatchingError> {
    if prompts.is_empty() {
        return Err(PatchingError::Empty);
    }
    let lds = logit_diffs(weights, prompts)?;
    let correct = lds.iter().filter(|&&x| x > 0.0).count();
    Ok(BaselineReport {
        n_prompts: lds.len(),
        mean_logit_diff: ordered_mean(&lds).unwrap_or(0.0),
        frac_correct: correct as f64 / lds.len() as f64,
        logit_diffs: lds,
    })
}

// ---------------------------------------------------------------------------
// Grids
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    /// Layer × absolute token position.
    Resid,
    /// Layer × role-aligned position (IO, S1, S2, END), resolved per pair.
    ResidRole,
    /// Layer × attention head.
    Head,
}

/// Mean recovery per cell over the non-degenerate pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub kind: GridKind,
    pub rows: usize,
    pub cols: usize,
    pub col_labels: Vec<String>,
    /// Row-major `[rows × cols]`.
    pub cells: Vec<f32>,
    /// Pairs contributing to every cell.
    pub n_pairs: usize,
    /// Pairs excluded for a degenerate clean-to-corrupt gap.
    pub n_degenerate: usize,
}

impl SweepGrid {
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.cells[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.cells[row * self.cols..(row + 1) * self.cols]
    }

    pub fn col(&self, col: usize) -> Vec<f32> {
        (0..self.rows).map(|r| self.get(r, col)).collect()
    }

    /// Cells sorted by descending value (ties by row, then column).
    pub fn ranked(&self) -> Vec<(usize, usize, f32)> {
        let mut all: Vec<(usize, usize, f32)> = (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |c| (r, c)))
            .map(|(r, c)| (r, c, self.get(r, c)))
            .collect();
        all.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
        all
    }

    /// CSV with one row per layer and labelled columns.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer");
        for l in &self.col_labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for r in 0..self.rows {
            out.push_str(&r.to_string());
            for v in self.row(r) {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push('\n');
        }
        out
    }

    /// Average per-pair matrices (`None` = degenerate pair) into a grid.
    fn from_pairs(
        kind: GridKind,
        rows: usize,
        col_labels: Vec<String>,
        per_pair: &[Option<Vec<f32>>],
    ) -> Result<Self, PatchingError> {
        let cols = col_labels.len();
        let valid: Vec<&Vec<f32>> = per_pair.iter().flatten().collect();
        if valid.is_empty() {
            return Err(PatchingError::AllDegenerate);
        }
        let cells = (0..rows * cols)
            .map(|i| {
                let vals: Vec<f32> = valid.iter().map(|m| m[i]).collect();
                ordered_mean(&vals).unwrap_or(0.0) as f32
            })
            .collect();
        Ok(Self {
            kind,
            rows,
            cols,
            col_labels,
            cells,
            n_pairs: valid.len(),
            n_degenerate: per_pair.len() - valid.len(),
        })
    }
}

// ---------------------------------------------------------------------------
// Pair preparation
// ---------------------------------------------------------------------------

/// Traced clean and corrupt runs of one pair plus their logit differences.
struct PreparedPair<'a> {
    pair: &'a MinimalPair,
    clean: RunTrace,
    corrupt: RunTrace,
    clean_ld: f32,
    corrupt_ld: f32,
}

impl PreparedPair<'_> {
    fn recovery(&self, weights: &ModelWeights, final_resid: &[f32]) -> f32 {
        let ld = end_logit_diff(weights, final_resid, &self.pair.clean);
        // Only called for non-degenerate pairs.
        recovery(ld, self.clean_ld, self.corrupt_ld).unwrap_or(f32::NAN)
    }

    fn is_degenerate(&self) -> bool {
        recovery(self.clean_ld, self.clean_ld, self.corrupt_ld).is_none()
    }
}

fn check_pairs(pairs: &[MinimalPair], same_length: bool) -> Result<(), PatchingError> {
    let first = pairs.first().ok_or(PatchingError::Empty)?;
    let expected = first.clean.len();
    for (index, p) in pairs.iter().enumerate() {
        if p.clean.len() != p.corrupt.len() || p.clean.labels != p.corrupt.labels {
            return Err(PatchingError::Misaligned { index });
        }
        if same_length && p.clean.len() != expected {
            return Err(PatchingError::LengthMismatch { index, expected, found: p.clean.len() });
        }
    }
    Ok(())
}

fn prepare<'a>(weights: &ModelWeights, pair: &'a MinimalPair) -> Result<PreparedPair<'a>, ModelError> {
    let mut runs = weights.trace_batch(&[&pair.clean.token_ids, &pair.corrupt.token_ids])?;
    let corrupt = runs.pop().expect("two runs");
    let clean = runs.pop().expect("two runs");
    let clean_ld = end_logit_diff(weights, clean.final_resid(), &pair.clean);
    let corrupt_ld = end_logit_diff(weights, corrupt.final_resid(), &pair.clean);
    Ok(PreparedPair { pair, clean, corrupt, clean_ld, corrupt_ld })
}

/// Mean clean and corrupt logit differences over all pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairBaselines {
    pub mean_clean_logit_diff: f64,
    pub mean_corrupt_logit_diff: f64,
}

fn pair_baselines(lds: &[(f32, f32)]) -> PairBaselines {
    let clean: Vec<f32> = lds.iter().map(|x| x.0).collect();
    let corrupt: Vec<f32> = lds.iter().map(|x| x.1).collect();
    PairBaselines {
        mean_clean_logit_diff: ordered_mean(&clean).unwrap_or(0.0),
        mean_corrupt_logit_diff: ordered_mean(&corrupt).unwrap_or(0.0),
    }
}

// ---------------------------------------------------------------------------
// Residual sweep
// ---------------------------------------------------------------------------

/// Role-aligned column labels of [`ResidSweep::roles`].
pub const ROLE_COLUMNS: [&str; 4] = ["IO", "S1", "S2", "END"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidSweep {
    /// Layer × absolute position.
    pub positional: SweepGrid,
    /// Layer × {IO, S1, S2, END}: each pair contributes the cell at its own
    /// role position, so ABBA and BABA pairs are aligned by role.
    pub roles: SweepGrid,
    pub baselines: PairBaselines,
}

/// Patch clean `resid_pre` into the corrupt run at every (layer, position).
pub fn resid_sweep(weights: &ModelWeights, pairs: &[MinimalPair]) -> Result<ResidSweep, PatchingError> {
    check_pairs(pairs, true)?;
    let n_layers = weights.config().n_layers;
    let seq = pairs[0].clean.len();

    type PairOut = (Option<(Vec<f32>, Vec<f32>)>, (f32, f32));
    let outs: Vec<PairOut> = pairs
        .par_iter()
        .map(|pair| {
            let prep = prepare(weights, pair)?;
            let lds = (prep.clean_ld, prep.corrupt_ld);
            if prep.is_degenerate() {
                return Ok((None, lds));
            }
            let mut grid = vec![0.0f32; n_layers * seq];
            for layer in 0..n_layers {
                let patches = (0..seq)
                    .map(|p| {
                        let value = Tensor::vector(prep.clean.resid_pre(layer, p).to_vec());
                        PatchSet::new().with(HookSite::resid_pre(layer, Position::At(p)), value)
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let jobs: Vec<(&RunTrace, &PatchSet)> = patches.iter().map(|ps| (&prep.corrupt, ps)).collect();
                for (p, fin) in weights.retrace_final_batch(&jobs)?.iter().enumerate() {
                    grid[layer * seq + p] = prep.recovery(weights, fin);
                }
            }
            let l = &pair.clean.labels;
            let role_pos = [l.io, l.s, l.n3, l.end];
            let roles = (0..n_layers)
                .flat_map(|layer| role_pos.map(|p| grid[layer * seq + p]))
                .collect();
            Ok((Some((grid, roles)), lds))
        })
        .collect::<Result<_, ModelError>>()?;

    let positional: Vec<Option<Vec<f32>>> = outs.iter().map(|o| o.0.as_ref().map(|g| g.0.clone())).collect();
    let roles: Vec<Option<Vec<f32>>> = outs.iter().map(|o| o.0.as_ref().map(|g| g.1.clone())).collect();
    let lds: Vec<(f32, f32)> = outs.iter().map(|o| o.1).collect();
    let col_labels = (0..seq).map(|p| format!("p{p}")).collect();
    Ok(ResidSweep {
        positional: SweepGrid::from_pairs(GridKind::Resid, n_layers, col_labels, &positional)?,
        roles: SweepGrid::from_pairs(
            GridKind::ResidRole,
            n_layers,
            ROLE_COLUMNS.iter().map(|s| s.to_string()).collect(),
            &roles,
        )?,
        baselines: pair_baselines(&lds),
    })
}

// ---------------------------------------------------------------------------
// Head sweep
// ---------------------------------------------------------------------------

/// Patching every head of one layer at once versus the best single head.
/// Shipped as a report: the inequality is expected, not guaranteed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SumCheck {
    pub layer: usize,
    pub all_heads_recovery: f32,
    pub max_single_head_recovery: f32,
    pub argmax_head: usize,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSweep {
    pub grid: SweepGrid,
    pub sum_check: SumCheck,
    pub baselines: PairBaselines,
}

fn z_patch(prep: &PreparedPair<'_>, layer: usize, head: usize, d_head: usize, patches: &mut PatchSet) -> Result<(), ModelError> {
    let end = prep.pair.clean.labels.end;
    let value = Tensor::vector(prep.clean.z_head(layer, head, end, d_head).to_vec());
    patches.push(HookSite::attn_z(layer, head, Position::At(end)), value)
}

/// One pair's per-group recoveries (`None` if degenerate) and its clean and
/// corrupt logit differences.
type PairRecoveries = (Option<Vec<f32>>, (f32, f32));

/// Per-pair recoveries for arbitrary head groups; each group is patched at
/// END simultaneously. `None` marks a degenerate pair.
fn group_recoveries(
    weights: &ModelWeights,
    pairs: &[MinimalPair],
    groups: &[Vec<(usize, usize)>],
) -> Result<Vec<PairRecoveries>, PatchingError> {
    let c = weights.config();
    for &(layer, head) in groups.iter().flatten() {
        if layer >= c.n_layers {
            return Err(PatchingError::LayerOutOfRange { layer, n_layers: c.n_layers });
        }
        if head >= c.n_heads {
            return Err(PatchingError::HeadOutOfRange { head, n_heads: c.n_heads });
        }
    }
    check_pairs(pairs, false)?;
    let d_head = c.d_head();
    Ok(pairs
        .par_iter()
        .map(|pair| {
            let prep = prepare(weights, pair)?;
            let lds = (prep.clean_ld, prep.corrupt_ld);
            if prep.is_degenerate() {
                return Ok((None, lds));
            }
            let patches = groups
                .iter()
                .map(|g| {
                    let mut ps = PatchSet::new();
                    for &(layer, head) in g {
                        z_patch(&prep, layer, head, d_head, &mut ps)?;
                    }
                    Ok(ps)
                })
                .collect::<Result<Vec<_>, ModelError>>()?;
            // Jobs sharing a frontier layer resume together.
            let mut out = vec![0.0f32; groups.len()];
            let mut order: Vec<usize> = (0..groups.len()).collect();
            order.sort_by_key(|&i| patches[i].frontier());
            for chunk in order.chunk_by(|&a, &b| patches[a].frontier() == patches[b].frontier()) {
                let jobs: Vec<(&RunTrace, &PatchSet)> = chunk.iter().map(|&i| (&prep.corrupt, &patches[i])).collect();
                for (&i, fin) in chunk.iter().zip(weights.retrace_final_batch(&jobs)?) {
                    out[i] = prep.recovery(weights, &fin);
                }
            }
            Ok((Some(out), lds))
        })
        .collect::<Result<_, ModelError>>()?)
}

/// Patch clean `attn_z` at END into the corrupt run for every (layer, head),
/// plus every head of `sum_check_layer` at once.
pub fn head_sweep(weights: &ModelWeights, pairs: &[MinimalPair], sum_check_layer: usize) -> Result<HeadSweep, PatchingError> {
    let c = weights.config();
    let (n_layers, n_heads) = (c.n_layers, c.n_heads);
    if sum_check_layer >= n_layers {
        return Err(PatchingError::LayerOutOfRange { layer: sum_check_layer, n_layers });
    }
    check_pairs(pairs, true)?;
    let mut groups: Vec<Vec<(usize, usize)>> = (0..n_layers)
        .flat_map(|l| (0..n_heads).map(move |h| vec![(l, h)]))
        .collect();
    groups.push((0..n_heads).map(|h| (sum_check_layer, h)).collect());
    let outs = group_recoveries(weights, pairs, &groups)?;

    let singles: Vec<Option<Vec<f32>>> = outs
        .iter()
        .map(|o| o.0.as_ref().map(|v| v[..n_layers * n_heads].to_vec()))
        .collect();
    let all_heads: Vec<f32> = outs.iter().filter_map(|o| o.0.as_ref().map(|v| v[n_layers * n_heads])).collect();
    let lds: Vec<(f32, f32)> = outs.iter().map(|o| o.1).collect();
    let grid = SweepGrid::from_pairs(GridKind::Head, n_layers, (0..n_heads).map(|h| format!("H{h}")).collect(), &singles)?;

    let row = grid.row(sum_check_layer);
    let argmax_head = (0..n_heads).fold(0, |best, h| if row[h] > row[best] { h } else { best });
    let all_heads_recovery = ordered_mean(&all_heads).unwrap_or(0.0) as f32;
    let sum_check = SumCheck {
        layer: sum_check_layer,
        all_heads_recovery,
        max_single_head_recovery: row[argmax_head],
        argmax_head,
        holds: all_heads_recovery >= row[argmax_head],
    };
    Ok(HeadSweep { grid, sum_check, baselines: pair_baselines(&lds) })
}

/// Mean recovery at selected heads (END patch); used under distribution shift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadRecoveries {
    pub heads: Vec<(usize, usize)>,
    pub recoveries: Vec<f32>,
    pub n_pairs: usize,
    pub n_degenerate: usize,
    pub baselines: PairBaselines,
}

pub fn head_recoveries(
    weights: &ModelWeights,
    pairs: &[MinimalPair],
    heads: &[(usize, usize)],
) -> Result<HeadRecoveries, PatchingError> {
    let groups: Vec<Vec<(usize, usize)>> = heads.iter().map(|&h| vec![h]).collect();
    let outs = group_recoveries(weights, pairs, &groups)?;
    let per_pair: Vec<Option<Vec<f32>>> = outs.iter().map(|o| o.0.clone()).collect();
    let lds: Vec<(f32, f32)> = outs.iter().map(|o| o.1).collect();
    let grid = SweepGrid::from_pairs(GridKind::Head, 1, heads.iter().map(|(l, h)| format!("L{l}H{h}")).collect(), &per_pair)?;
    Ok(HeadRecoveries {
        heads: heads.to_vec(),
        recoveries: grid.cells,
        n_pairs: grid.n_pairs,
        n_degenerate: grid.n_degenerate,
        baselines: pair_baselines(&lds),
    })
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logit_diff_examples() {
        let mut row = vec![0.0f32; 10];
        row[3] = 5.0;
        row[7] = 1.3;
        assert!((logit_diff(&row, 3, 7).unwrap() - 3.7).abs() < 1e-6);
        row[7] = 5.0;
        assert_eq!(logit_diff(&row, 3, 7).unwrap(), 0.0);
        assert!(matches!(logit_diff(&row, 10, 3), Err(PatchingError::TokenOutOfRange { id: 10, len: 10 })));
    }

    #[test]
    fn recovery_definition() {
        assert_eq!(recovery(3.0, 3.0, -1.0), Some(1.0));
        assert_eq!(recovery(-1.0, 3.0, -1.0), Some(0.0));
        assert_eq!(recovery(-3.0, 3.0, -1.0), Some(-0.5));
        assert_eq!(recovery(9.0, 3.0, -1.0), Some(2.5));
        assert_eq!(recovery(1.0, 2.0, 2.0), None);
        assert_eq!(recovery(1.0, 2.0, 2.0 + 5e-7), None);
    }

    #[test]
    fn grid_excludes_degenerate_pairs_and_ranks() {
        let per_pair = vec![Some(vec![1.0, -2.0]), None, Some(vec![3.0, 0.0])];
        let g = SweepGrid::from_pairs(GridKind::Head, 1, vec!["H0".into(), "H1".into()], &per_pair).unwrap();
        assert_eq!((g.n_pairs, g.n_degenerate), (2, 1));
        assert_eq!(g.cells, vec![2.0, -1.0]);
        assert_eq!(g.ranked()[0], (0, 0, 2.0));
        assert_eq!(g.to_csv(), "layer,H0,H1\n0,2.000000,-1.000000\n");
        assert!(matches!(
            SweepGrid::from_pairs(GridKind::Head, 1, vec!["H0".into()], &[None]),
            Err(PatchingError::AllDegenerate)
        ));
    }
}
