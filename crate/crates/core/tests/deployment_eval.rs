// SPDX-License-Identifier: MIT OR Apache-2.0

//! Monitor measurement, composition, cost sweep and sensitivity on a small
//! random model, plus the analytic properties of ROC and the cost model.

mod common;

use circuitbench_core::analysis::{selectivity_table, FeatureProbe, TopFeature};
use circuitbench_core::deployment::*;
use circuitbench_core::ioi::{balanced_role_prompts, Frame, WordPools};
use circuitbench_core::sae::SaeParams;
use common::{small_model, vocab};
use proptest::prelude::*;

fn sae() -> SaeParams {
    let mut p = SaeParams::init(32, 40, &[0.0; 32], 3).unwrap();
    p.w_enc.data_mut().iter_mut().for_each(|w| *w *= 4.0);
    p.b_enc.data_mut().iter_mut().for_each(|b| *b = 0.1);
    p
}

fn config() -> MonitorConfig {
    MonitorConfig {
        n_positive: 4,
        n_negative: 12,
        pool_per_name: 4,
        roc_features: 3,
        monitor_features: 2,
        table_threshold: 0.5,
        theta_min: 0.0,
        theta_max: 2.0,
        theta_step: 0.5,
        noise_seed: 9,
    }
}

fn measurements(seed: u64) -> (MonitorMeasurements, Vec<TopFeature>) {
    let s = sae();
    let probe = FeatureProbe::new(small_model(), &s, 2).unwrap();
    let pools = WordPools::default();
    let table = selectivity_table(&probe, vocab(), &pools.names, &pools.places, &pools.objects, 1, 2, Frame::Canonical).unwrap();
    let top = table.ranked(3);
    let m = measure_monitors(&probe, vocab(), &pools, &top, &config(), 0.05, seed).unwrap();
    (m, top)
}

#[test]
fn measurement_shapes_and_determinism() {
    let (m, top) = measurements(5);
    assert_eq!(m.sets.len(), 3 * top.len());
    for s in &m.sets {
        assert_eq!(s.positive_scores.len(), 4);
        assert_eq!(s.negative_scores.len(), 12);
        assert_eq!(s.noisy_heuristic_negative.len(), 12);
        // The template parser is exact on every frame the generator emits.
        assert!(s.heuristic_positive.iter().all(|&v| v));
        assert!(s.heuristic_negative.iter().all(|&v| !v));
    }
    let (again, _) = measurements(5);
    assert_eq!(m, again);

    let rocs = roc_table(&m, 3).unwrap();
    assert_eq!(rocs.len(), 9);
    assert!(rocs.iter().all(|r| (0.0..=1.0).contains(&r.auc)));
}

#[test]
fn heuristic_parses_generated_prompts_in_both_frames() {
    let h = HeuristicMonitor::default();
    let pools = WordPools::default();
    for frame in [Frame::Canonical, Frame::Cleft] {
        let prompts = balanced_role_prompts(vocab(), &pools.names, &pools.places, &pools.objects, 3, 2, frame).unwrap();
        for p in &prompts {
            assert_eq!(h.parse_io(&p.text).as_deref(), Some(p.io_name.as_str()), "{}", p.text);
        }
    }
}

#[test]
fn heuristic_noise_rate_is_as_configured() {
    let h = HeuristicMonitor::default();
    let text = "When Mary and John went to the store, John gave a drink to";
    let flips = (0..10_000)
        .filter(|i| !h.noisy_verdict(text, "Mary", 42, &format!("q{i}"), 0.05))
        .count();
    let rate = flips as f64 / 10_000.0;
    assert!((rate - 0.05).abs() <= 0.01, "{rate}");
}

#[test]
fn composition_table_obeys_and_or_bounds() {
    let (m, _) = measurements(2);
    let table = composition_table(&m, &config());
    assert_eq!(table.rows.len(), 12);
    for c in Condition::ALL {
        let sae = table.get(MonitorKind::SaeOnly, c).unwrap();
        let heur = table.get(MonitorKind::HeuristicOnly, c).unwrap();
        let and = table.get(MonitorKind::SaeAndHeur, c).unwrap();
        let or = table.get(MonitorKind::SaeOrHeur, c).unwrap();
        assert!(and.tpr <= sae.tpr.min(heur.tpr) + 1e-12);
        assert!(and.fpr <= sae.fpr.min(heur.fpr) + 1e-12);
        assert!(or.tpr + 1e-12 >= sae.tpr.max(heur.tpr));
        assert!(or.fpr + 1e-12 >= sae.fpr.max(heur.fpr));
        assert_eq!((sae.tpr, sae.fpr), (sae.empirical_tpr, sae.empirical_fpr));
    }
    assert!(table.to_csv().starts_with("monitor,condition,tpr,fpr,f1"));
}

#[test]
fn sweep_optimum_is_the_cheapest_row_and_never_worse_than_no_monitor() {
    let (m, _) = measurements(4);
    let model = CostModel::default();
    let sweep = cost_sweep(&m, &model, &config()).unwrap();
    assert_eq!(sweep.rows.len(), 5 * 5);
    assert!((sweep.baseline_cost - 1000.0).abs() < 1e-9);
    let min = sweep.rows.iter().map(|r| r.cost_per_1000).fold(f64::INFINITY, f64::min);
    assert_eq!(sweep.optimum.cost_per_1000, min);
    assert!(sweep.optimum.cost_per_1000 <= sweep.baseline_cost);
    assert!(sweep
        .rows
        .iter()
        .filter(|r| r.monitor == MonitorKind::NoMonitor)
        .all(|r| (r.cost_per_1000 - 1000.0).abs() < 1e-9));

    let rows = sensitivity(&m, &model, &config(), &[0.005, 0.02, 0.05, 0.10, 0.20]).unwrap();
    assert_eq!(rows.len(), 5);
    let at = rows.iter().find(|r| r.p_err == 0.02).unwrap();
    assert_eq!(at.optimum, sweep.optimum);
    assert_eq!(sensitivity_csv(&rows).lines().count(), 6);

    let bad = CostModel { p_err: -0.1, ..model };
    assert!(matches!(cost_sweep(&m, &bad, &config()), Err(DeploymentError::InvalidCostModel(_))));
}

// ---------------------------------------------------------------------------
// Properties
// ---------------------------------------------------------------------------

fn scored() -> impl Strategy<Value = Vec<(f32, bool)>> {
    prop::collection::vec((-50.0f32..50.0, any::<bool>()), 2..60)
        .prop_filter("both classes", |v| v.iter().any(|x| x.1) && v.iter().any(|x| !x.1))
}

proptest! {
    #[test]
    fn auc_is_invariant_under_monotone_transforms(v in scored()) {
        let (scores, labels): (Vec<f32>, Vec<bool>) = v.into_iter().unzip();
        let base = roc(&scores, &labels).unwrap().auc;
        let mapped: Vec<f32> = scores.iter().map(|s| 3.0 * s + 7.0).collect();
        let again = roc(&mapped, &labels).unwrap().auc;
        prop_assert!((0.0..=1.0).contains(&base));
        prop_assert!((base - again).abs() < 1e-12);
        // Negating scores reflects the curve.
        let neg: Vec<f32> = scores.iter().map(|s| -s).collect();
        prop_assert!((roc(&neg, &labels).unwrap().auc - (1.0 - base)).abs() < 1e-9);
    }

    #[test]
    fn composition_bounds(a in 0.0f64..=1.0, b in 0.0f64..=1.0, c in 0.0f64..=1.0, d in 0.0f64..=1.0) {
        let x = MonitorRates::new(a, b, None);
        let y = MonitorRates::new(c, d, None);
        let and = compose(&x, &y, ComposeOp::And).unwrap();
        let or = compose(&x, &y, ComposeOp::Or).unwrap();
        prop_assert!(and.tpr <= a.min(c) + 1e-12 && and.fpr <= b.min(d) + 1e-12);
        prop_assert!(or.tpr + 1e-12 >= a.max(c) && or.fpr + 1e-12 >= b.max(d));
    }

    #[test]
    fn cost_is_monotone_in_the_rates(tpr in 0.0f64..=1.0, fpr in 0.0f64..=1.0, dt in 0.0f64..0.5, df in 0.0f64..0.5) {
        let m = CostModel::default();
        let base = m.expected_cost(&MonitorRates::new(tpr, fpr, None));
        let better = m.expected_cost(&MonitorRates::new((tpr + dt).min(1.0), fpr, None));
        let worse = m.expected_cost(&MonitorRates::new(tpr, (fpr + df).min(1.0), None));
        prop_assert!(better <= base + 1e-9);
        prop_assert!(worse + 1e-9 >= base);
    }
}
