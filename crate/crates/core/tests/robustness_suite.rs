// SPDX-License-Identifier: MIT OR Apache-2.0

//! Distribution-shift suite on a small random model with a random SAE.

mod common;

use circuitbench_core::analysis::{selectivity_table, FeatureProbe};
use circuitbench_core::ioi::{Frame, WordPools};
use circuitbench_core::robustness::*;
use circuitbench_core::sae::SaeParams;
use common::{small_model, vocab};

fn sae() -> SaeParams {
    let mut p = SaeParams::init(32, 40, &[0.0; 32], 3).unwrap();
    p.w_enc.data_mut().iter_mut().for_each(|w| *w *= 4.0);
    p.b_enc.data_mut().iter_mut().for_each(|b| *b = 0.1);
    p
}

fn config() -> RobustnessConfig {
    RobustnessConfig { n_baseline: 6, n_pairs: 3, canonical_heads: vec![(2, 1), (1, 0)], per_name: 2 }
}

#[test]
fn suite_covers_every_shift_and_is_deterministic() {
    let s = sae();
    let probe = FeatureProbe::new(small_model(), &s, 2).unwrap();
    let pools = WordPools::default();
    let table = selectivity_table(&probe, vocab(), &pools.names, &pools.places, &pools.objects, 1, 2, Frame::Canonical).unwrap();
    let top = table.ranked(4);
    let report = run_suite(&probe, vocab(), &pools, &table, &top, &config(), 17).unwrap();

    assert_eq!(report.reference.spec.kind, ShiftKind::None);
    assert_eq!(report.shifts.len(), 3);
    assert_eq!(report.gaps.len(), 2);
    for s in std::iter::once(&report.reference).chain(&report.shifts) {
        assert_eq!(s.head_recoveries.len(), 2);
        assert_eq!(s.n_pairs + s.n_degenerate_pairs, 3);
        assert!((0.0..=1.0).contains(&s.baseline_frac_correct));
        assert!(s.run_id.ends_with(s.spec.kind.label()));
    }
    let held = report.shift(ShiftKind::HeldoutNames).unwrap();
    assert!(held.features.is_empty());
    assert_eq!(held.dominant.len(), 8);
    assert_eq!(held.excluded_names, pools.multi_token_probe_names);
    assert_eq!(held.dominant_agreement, None);
    let refr = &report.reference;
    assert_eq!(refr.features.len(), 4);
    assert_eq!(refr.dominant.len(), 16);
    assert!(refr.dominant_agreement.unwrap() <= 16);
    assert!(refr.excluded_names.is_empty());
    for f in &refr.features {
        assert_eq!(f.n_prompts, 2);
    }

    let again = run_suite(&probe, vocab(), &pools, &table, &top, &config(), 17).unwrap();
    assert_eq!(report, again);
    assert!(report.heads_csv().lines().count() == 5);
    assert!(report.features_csv().starts_with("condition,name,feature"));
}

#[test]
fn self_comparison_retains_everything() {
    let s = sae();
    let probe = FeatureProbe::new(small_model(), &s, 2).unwrap();
    let pools = WordPools::default();
    let table = selectivity_table(&probe, vocab(), &pools.names, &pools.places, &pools.objects, 2, 2, Frame::Canonical).unwrap();
    let top = table.ranked(3);
    let mut r = run_shift(&probe, vocab(), &pools, &table, &top, ShiftSpec::new(ShiftKind::None), &config(), 1).unwrap();
    // Give every feature a usable reference drop so no retention is flagged.
    for f in &mut r.features {
        f.ablation_drop = f.ablation_drop.abs() + 0.1;
        f.mean_activation = f.mean_activation.abs() + 0.1;
    }
    let gap = detection_vs_causal_gap(&r, &r).unwrap();
    assert!(gap.flagged.is_empty());
    for f in &gap.features {
        assert_eq!(f.firing_retention, Some(1.0));
        assert_eq!(f.causal_retention, Some(1.0));
    }
    assert_eq!(gap.mean_firing_retention, Some(1.0));
    assert_eq!(gap.mean_causal_retention, Some(1.0));

    let mut weak = r.clone();
    weak.features[0].ablation_drop = 0.01;
    let g = detection_vs_causal_gap(&weak, &r).unwrap();
    assert_eq!(g.flagged, vec![weak.features[0].name.clone()]);
    assert_eq!(g.features[0].causal_retention, None);

    let held = run_shift(&probe, vocab(), &pools, &table, &top, ShiftSpec::new(ShiftKind::HeldoutNames), &config(), 1).unwrap();
    assert!(matches!(detection_vs_causal_gap(&r, &held), Err(RobustnessError::FeatureMismatch { .. })));
}
