// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria about GPT-2 small need its converted checkpoint, looked up in
//! `CIRCUITBENCH_WEIGHTS` and then `assets/gpt2/model.bin`. When it is
//! present the full default pipeline runs into `target/acceptance-run`
//! (resumable) and every criterion is scored from its outputs. When it is
//! absent those criteria are reported as FAIL with the reason, together with
//! any weight-independent sub-checks; this does not fail the binary, but a
//! criterion that is measured and missed does.

mod common;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use serde::de::DeserializeOwned;

use circuitbench_core::analysis::{AblationStudy, FveReport, SelectivityTable, StratificationReport};
use circuitbench_core::deployment::{
    compose, BreakEven, ComposeOp, Condition, CostModel, CostSweep, MonitorKind, MonitorRates, SensitivityRow,
};
use circuitbench_core::ioi::WordPools;
use circuitbench_core::patching::{BaselineReport, HeadSweep, ResidSweep};
use circuitbench_core::pipeline::{files, ExperimentConfig, RocEntry, SaeSummary};
use circuitbench_core::rng::SeededRng;
use circuitbench_core::robustness::{RobustnessReport, ShiftKind};
use circuitbench_core::sae::{loss_and_grads, SaeParams};

use common::*;

// ---------------------------------------------------------------------------
// Verdicts
// ---------------------------------------------------------------------------

enum Status {
    Pass,
    Fail,
    /// Not measurable here; reported as FAIL without failing the binary.
    Unavailable,
}

struct Verdict {
    id: &'static str,
    status: Status,
    detail: String,
}

/// A list of named sub-checks; the criterion passes iff all of them do.
#[derive(Default)]
struct Checks(Vec<(String, bool)>);

impl Checks {
    fn check(&mut self, what: impl Into<String>, ok: bool) -> &mut Self {
        self.0.push((what.into(), ok));
        self
    }

    fn passed(&self) -> bool {
        self.0.iter().all(|c| c.1)
    }

    fn summary(&self) -> String {
        self.0.iter().map(|(w, ok)| format!("{w} [{}]", if *ok { "ok" } else { "MISS" })).collect::<Vec<_>>().join("; ")
    }

    fn verdict(&self, id: &'static str) -> Verdict {
        Verdict { id, status: if self.passed() { Status::Pass } else { Status::Fail }, detail: self.summary() }
    }
}

fn within(x: f64, centre: f64, tol: f64) -> bool {
    (x - centre).abs() <= tol
}

fn load<T: DeserializeOwned>(out: &Path, name: &str) -> Result<T, String> {
    let path = out.join(name);
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

// ---------------------------------------------------------------------------
// Weight-independent checks
// ---------------------------------------------------------------------------

/// Independent f64 loss `mean_b(‖h − ĥ‖² + λ‖f‖₁)`.
#[allow(clippy::too_many_arguments)]
fn loss_f64(p: &[Vec<f64>; 4], batch: &[f64], d: usize, f: usize, lambda: f64) -> f64 {
    let [we, be, wd, bd] = p;
    let mut total = 0.0;
    for h in batch.chunks(d) {
        let feats: Vec<f64> =
            (0..f).map(|j| ((0..d).map(|i| (h[i] - bd[i]) * we[i * f + j]).sum::<f64>() + be[j]).max(0.0)).collect();
        for i in 0..d {
            let r: f64 = (0..f).map(|j| feats[j] * wd[j * d + i]).sum::<f64>() + bd[i];
            total += (h[i] - r).powi(2);
        }
        total += lambda * feats.iter().sum::<f64>();
    }
    total / (batch.len() / d) as f64
}

/// Largest relative error of the analytic SAE gradients against central
/// finite differences on a tiny instance.
fn gradient_check() -> f64 {
    let (d, f, lambda) = (6, 8, 0.5f32);
    let mut rng = SeededRng::new(17);
    let mean: Vec<f32> = (0..d).map(|_| rng.uniform_range(-0.5, 0.5)).collect();
    let mut p = SaeParams::init(d, f, &mean, 17).unwrap();
    p.b_enc.data_mut().iter_mut().for_each(|b| *b = rng.uniform_range(-0.2, 0.2));
    let batch: Vec<f32> = (0..4 * d).map(|_| rng.uniform_range(-1.5, 1.5)).collect();
    let (_, grads) = loss_and_grads(&p, &batch, lambda).unwrap();
    let to64 = |t: &[f32]| t.iter().map(|&x| x as f64).collect::<Vec<f64>>();
    let base = [to64(p.w_enc.data()), to64(p.b_enc.data()), to64(p.w_dec.data()), to64(p.b_dec.data())];
    let batch64 = to64(&batch);
    let analytic = [&grads.w_enc, &grads.b_enc, &grads.w_dec, &grads.b_dec];
    let h = 1e-6;
    let mut worst = 0.0f64;
    for t in 0..4 {
        for i in 0..base[t].len() {
            let (mut plus, mut minus) = (base.clone(), base.clone());
            plus[t][i] += h;
            minus[t][i] -= h;
            let fd = (loss_f64(&plus, &batch64, d, f, lambda as f64) - loss_f64(&minus, &batch64, d, f, lambda as f64)) / (2.0 * h);
            // Relative error with an absolute floor for near-zero gradients.
            worst = worst.max((analytic[t][i] as f64 - fd).abs() / fd.abs().max(1e-2));
        }
    }
    worst
}

fn and_composition_tpr() -> f64 {
    let sae = MonitorRates::new(0.99, 0.003, Some(Condition::InDist));
    let heur = MonitorRates::new(1.0, 0.0, Some(Condition::InDist)).with_flip_noise(0.05);
    compose(&sae, &heur, ComposeOp::And).unwrap().tpr
}

// ---------------------------------------------------------------------------
// Weight-dependent criteria
// ---------------------------------------------------------------------------

fn baseline(out: &Path) -> Result<Checks, String> {
    let b: BaselineReport = load(out, files::BASELINE_JSON)?;
    let mut c = Checks::default();
    c.check(format!("mean logit diff {:+.3} within 3.73 ± 0.30", b.mean_logit_diff), within(b.mean_logit_diff, 3.73, 0.30))
        .check(format!("fraction preferring IO {:.3} = 1.00", b.frac_correct), b.frac_correct == 1.0);
    Ok(c)
}

fn head_sweep(out: &Path) -> Result<Checks, String> {
    let s: HeadSweep = load(out, files::HEADS_JSON)?;
    let g = &s.grid;
    let r = |l: usize, h: usize| if l < g.rows && h < g.cols { g.get(l, h) as f64 } else { f64::NAN };
    let mut cells: Vec<(f32, (usize, usize))> = (0..g.rows).flat_map(|l| (0..g.cols).map(move |h| (g.get(l, h), (l, h)))).collect();
    cells.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut top3: Vec<(usize, usize)> = cells.iter().take(3).filter(|c| c.0 > 0.0).map(|c| c.1).collect();
    top3.sort();
    let most_negative = cells.last().map(|c| c.1);
    let mut c = Checks::default();
    c.check(format!("(9,9) {:+.3} within 1.02 ± 0.15", r(9, 9)), within(r(9, 9), 1.02, 0.15))
        .check(format!("(9,6) {:+.3} within 0.32 ± 0.10", r(9, 6)), within(r(9, 6), 0.32, 0.10))
        .check(format!("(10,0) {:+.3} within 0.11 ± 0.08", r(10, 0)), within(r(10, 0), 0.11, 0.08))
        .check(format!("(10,7) {:+.3} within −0.54 ± 0.15", r(10, 7)), within(r(10, 7), -0.54, 0.15))
        .check(format!("top-3 positive {top3:?} = {{(9,6),(9,9),(10,0)}}"), top3 == [(9, 6), (9, 9), (10, 0)])
        .check(format!("most negative {most_negative:?} = (10,7)"), most_negative == Some((10, 7)));
    Ok(c)
}

fn resid_sweep(out: &Path) -> Result<Checks, String> {
    let s: ResidSweep = load(out, files::RESID_JSON)?;
    let g = &s.roles;
    let col = |name: &str| g.col_labels.iter().position(|l| l == name).ok_or(format!("no {name} column"));
    let (io, s1, s2, end) = (col("IO")?, col("S1")?, col("S2")?, col("END")?);
    let io_positive = (0..g.rows).filter(|&l| g.get(l, io) > 0.0).count();
    let early = g.rows / 2;
    let s_negative = (0..early).filter(|&l| g.get(l, s1).min(g.get(l, s2)) < -0.1).count();
    let late: Vec<f32> = (g.rows.saturating_sub(2)..g.rows).map(|l| g.get(l, end)).collect();
    let mut c = Checks::default();
    c.check(format!("IO recovery > 0 at {io_positive}/{} layers", g.rows), io_positive == g.rows)
        .check(format!("S recovery < −0.1 at {s_negative} of the first {early} layers (need ≥ 3)"), s_negative >= 3)
        .check(format!("END recovery at the last two layers {late:.3?} > 0.5"), late.iter().all(|&v| v > 0.5));
    Ok(c)
}

fn sae_training(out: &Path, grad_err: f64) -> Result<Checks, String> {
    let s: SaeSummary = load(out, files::SAE_METRICS_JSON)?;
    let mut c = Checks::default();
    c.check(format!("variance explained {:.4} ≥ 0.99", s.variance_explained), s.variance_explained >= 0.99)
        .check(format!("L0 {:.1} in [40, 150]", s.l0), (40.0..=150.0).contains(&s.l0))
        .check(format!("finite-difference gradient error {grad_err:.2e} ≤ 1e-3"), grad_err <= 1e-3);
    Ok(c)
}

fn selectivity(out: &Path) -> Result<Checks, String> {
    let t: SelectivityTable = load(out, files::SELECTIVITY_JSON)?;
    let min = t.top.iter().min_by(|a, b| a.gap.total_cmp(&b.gap)).ok_or("empty table")?;
    let mut c = Checks::default();
    c.check(format!("smallest top-feature IO−S gap {:.2} ({}) ≥ 20", min.gap, min.name), min.gap >= 20.0);
    Ok(c)
}

fn single_ablation(out: &Path) -> Result<Checks, String> {
    let a: AblationStudy = load(out, files::ABLATION_JSON)?;
    let (drop, other) = (a.single.mean_preferred_drop, a.single.mean_abs_other_change);
    let mut c = Checks::default();
    c.check(format!("mean preferred-name drop {drop:.3} in [0.3, 1.3]"), (0.3..=1.3).contains(&drop))
        .check(format!("mean |change| on other prompts {other:.3} < 0.15"), other < 0.15);
    Ok(c)
}

fn cumulative_ablation(out: &Path) -> Result<Checks, String> {
    let a: AblationStudy = load(out, files::ABLATION_JSON)?;
    let k15 = a.cumulative.rows.iter().find(|r| r.k == 15);
    let frac = k15.map_or(f64::NAN, |r| r.frac_correct);
    let delta = k15.map_or(f64::NAN, |r| a.cumulative.rows[0].mean_logit_diff - r.mean_logit_diff);
    let mut c = Checks::default();
    c.check(format!("fraction correct at k=15 {frac:.3} ≥ 0.95"), frac >= 0.95)
        .check(format!("mean Δ at k=15 {delta:+.3} ≥ 3.0"), delta >= 3.0);
    Ok(c)
}

fn fve(out: &Path) -> Result<Checks, String> {
    let f: FveReport = load(out, files::FVE_JSON)?;
    let k10 = f.k_values.iter().position(|&k| k == 10).map_or(f64::NAN, |i| f.by_magnitude[i]);
    let sel15 = f.k_values.iter().position(|&k| k == 15).map_or(f.selective_all, |i| f.selective[i]);
    let mut c = Checks::default();
    c.check(format!("full-SAE ceiling {:.4} ≥ 0.99", f.full), f.full >= 0.99)
        .check(format!("by-magnitude K=10 {k10:.3} ≥ 0.70"), k10 >= 0.70)
        .check(format!("selective-15 {sel15:.3} in [0.15, 0.45]"), (0.15..=0.45).contains(&sel15))
        .check("monotone in K", f.magnitude_monotone && f.selective.windows(2).all(|w| w[1] >= w[0] - 1e-9));
    Ok(c)
}

fn stratification(out: &Path) -> Result<Checks, String> {
    let s: StratificationReport = load(out, files::STRATIFY_JSON)?;
    let min_rate = s.rows.iter().map(|r| r.firing_rate).fold(f64::INFINITY, f64::min);
    let mut c = Checks::default();
    c.check(format!("{} features, lowest firing rate {min_rate:.3} = 1.00 at threshold {}", s.rows.len(), s.firing_threshold), s.rows.len() == 10 && min_rate == 1.0)
        .check(format!("Pearson r {:?} < 0", s.pearson_r), s.pearson_r.is_some_and(|r| r < 0.0));
    Ok(c)
}

fn robustness(out: &Path, probe_names: &[String]) -> Result<Checks, String> {
    let r: RobustnessReport = load(out, files::ROBUSTNESS_JSON)?;
    let shift = |k: ShiftKind| r.shift(k).ok_or(format!("no {} shift", k.label()));
    let (ood, heldout, reform) = (shift(ShiftKind::OodContent)?, shift(ShiftKind::HeldoutNames)?, shift(ShiftKind::ReformulatedFrame)?);
    let h99 = |s: &circuitbench_core::robustness::ShiftReport| s.head_recovery((9, 9)).map_or(f64::NAN, |v| v as f64);
    let gap = r.gap(ShiftKind::ReformulatedFrame).ok_or("no reformulated retention gap")?;
    let causal = gap.mean_causal_retention.unwrap_or(f64::NAN);
    let firing = gap.mean_firing_retention.unwrap_or(f64::NAN);
    let excluded = probe_names.iter().all(|n| heldout.excluded_names.contains(n));
    let mut c = Checks::default();
    c.check(format!("OOD baseline {:+.3} within 3.47 ± 0.40", ood.baseline_mean_logit_diff), within(ood.baseline_mean_logit_diff, 3.47, 0.40))
        .check(format!("OOD L9H9 {:+.3} in [0.8, 1.3]", h99(ood)), (0.8..=1.3).contains(&h99(ood)))
        .check(format!("reformulated baseline {:+.3} within 3.22 ± 0.40", reform.baseline_mean_logit_diff), within(reform.baseline_mean_logit_diff, 3.22, 0.40))
        .check(format!("reformulated L9H9 {:+.3} in [0.75, 1.25]", h99(reform)), (0.75..=1.25).contains(&h99(reform)))
        .check(format!("reformulated causal retention {causal:.3} ≤ 0.65"), causal <= 0.65)
        .check(format!("reformulated firing retention {firing:.3} ≥ 0.75"), firing >= 0.75)
        .check(format!("held-out baseline {:+.3} within 3.83 ± 0.40", heldout.baseline_mean_logit_diff), within(heldout.baseline_mean_logit_diff, 3.83, 0.40))
        .check(format!("multi-token probe names excluded {:?}", heldout.excluded_names), excluded);
    Ok(c)
}

fn deployment(out: &Path, independent: &mut Checks) -> Result<Checks, String> {
    let curves: Vec<RocEntry> = load(out, files::ROC_JSON)?;
    let sweep: CostSweep = load(out, files::SWEEP_JSON)?;
    let sens: Vec<SensitivityRow> = load(out, files::SENSITIVITY_JSON)?;
    let in_dist: Vec<&RocEntry> = curves.iter().filter(|c| c.condition == Condition::InDist).collect();
    let min_auc = in_dist.iter().map(|c| c.curve.auc).fold(f64::INFINITY, f64::min);
    let opt = &sweep.optimum;
    let sens_ok = sens.iter().all(|row| {
        let want = if row.p_err >= 0.2 - 1e-12 { MonitorKind::SaeOrHeur } else { MonitorKind::SaeOnly };
        row.optimum.config == want
    });
    let sens_desc: Vec<String> = sens.iter().map(|r| format!("{}→{}", r.p_err, r.optimum.config.label())).collect();
    let break_even_ok = match sweep.break_even {
        BreakEven::ZeroPlus => true,
        BreakEven::Above(x) => x <= 1.0,
        BreakEven::Never => false,
    };
    let mut c = Checks::default();
    c.check(format!("in-dist AUC min {min_auc:.4} = 1.0 over {} features", in_dist.len()), !in_dist.is_empty() && min_auc == 1.0);
    c.0.append(&mut independent.0);
    c.check(format!("optimum {} θ={} at ${:.2} in [$5, $20]", opt.config.label(), opt.theta, opt.cost_per_1000), opt.config == MonitorKind::SaeOnly && (5.0..=20.0).contains(&opt.cost_per_1000))
        .check(format!("savings {:.1}% ≥ 97%", opt.savings_pct), opt.savings_pct >= 97.0)
        .check(format!("sensitivity optima {}", sens_desc.join(", ")), sens_ok && sens.len() == 5)
        .check(format!("break-even c_fn {:?} ≤ $1", sweep.break_even), break_even_ok);
    Ok(c)
}

// ---------------------------------------------------------------------------
// Determinism
// ---------------------------------------------------------------------------

fn outputs(out: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![out.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if matches!(p.extension().and_then(|e| e.to_str()), Some("csv" | "json")) {
                files.push((p.strip_prefix(out).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

/// Two cold `report-all --deterministic` runs on the synthetic checkpoint.
fn determinism(dir: &Path, weights: &Path) -> (Checks, PathBuf) {
    let mut runs = Vec::new();
    for i in 0..2 {
        let out = dir.join(format!("cold{i}"));
        let cfg = write_config(&small_config(weights, &out), &dir.join(format!("cold{i}.json")));
        let o = circuitbench(&["report-all", "--config", cfg.to_str().unwrap(), "--deterministic"]);
        assert!(o.status.success(), "report-all failed: {}", stderr(&o));
        runs.push(outputs(&out));
    }
    let differing: Vec<String> =
        runs[0].iter().zip(&runs[1]).filter(|(a, b)| a != b).map(|(a, _)| a.0.display().to_string()).collect();
    let same_set = runs[0].iter().map(|f| &f.0).eq(runs[1].iter().map(|f| &f.0));
    let mut c = Checks::default();
    c.check(
        format!("{} CSV/JSON files byte-identical across two cold runs (synthetic checkpoint, scaled-down config); differing: {differing:?}", runs[0].len()),
        same_set && differing.is_empty() && !runs[0].is_empty(),
    );
    (c, dir.join("cold0"))
}

// ---------------------------------------------------------------------------
// Driver
// ---------------------------------------------------------------------------

fn find_weights() -> Option<PathBuf> {
    std::env::var_os("CIRCUITBENCH_WEIGHTS")
        .map(PathBuf::from)
        .or_else(|| Some(workspace_root().join("assets/gpt2/model.bin")))
        .filter(|p| p.is_file())
}

type Criterion<'a> = (&'static str, Box<dyn Fn(&Path) -> Result<Checks, String> + 'a>);

fn main() -> ExitCode {
    let grad_err = gradient_check();
    let and_tpr = and_composition_tpr();
    let no_monitor = CostModel::default().baseline_cost();
    let pools = WordPools::load(&workspace_root().join("assets/pools.json")).expect("pools load");
    let probe_names = pools.multi_token_probe_names.clone();

    let independent = || {
        let mut c = Checks::default();
        c.check(format!("AND composition TPR {and_tpr:.12} = 0.9405"), (and_tpr - 0.9405).abs() < 1e-12)
            .check(format!("no-monitor cost ${no_monitor:.2} = $1000.00"), no_monitor == 1000.0);
        c
    };
    let criteria: Vec<Criterion> = vec![
        ("baseline", Box::new(baseline)),
        ("head-sweep", Box::new(head_sweep)),
        ("resid-sweep", Box::new(resid_sweep)),
        ("sae-training", Box::new(move |o: &Path| sae_training(o, grad_err))),
        ("selectivity", Box::new(selectivity)),
        ("single-ablation", Box::new(single_ablation)),
        ("cumulative-ablation", Box::new(cumulative_ablation)),
        ("fve", Box::new(fve)),
        ("stratification", Box::new(stratification)),
        ("robustness", Box::new(|o: &Path| robustness(o, &probe_names))),
        ("deployment", Box::new(|o: &Path| deployment(o, &mut independent()))),
    ];

    let scratch = tempfile::tempdir().expect("tempdir");
    let synthetic = write_checkpoint(scratch.path());
    let (det, synthetic_run) = determinism(scratch.path(), &synthetic);

    let mut verdicts = Vec::new();
    match find_weights() {
        Some(weights) => {
            let out = workspace_root().join("target/acceptance-run");
            let config = ExperimentConfig {
                weights: weights.clone(),
                output_dir: out.clone(),
                vocab: workspace_root().join("assets/gpt2/vocab.json"),
                merges: workspace_root().join("assets/gpt2/merges.txt"),
                pools: workspace_root().join("assets/pools.json"),
                ..Default::default()
            };
            std::fs::create_dir_all(&out).expect("output dir");
            let cfg = write_config(&config, &out.join("acceptance-config.json"));
            let run = circuitbench(&["report-all", "--config", cfg.to_str().unwrap(), "--deterministic"]);
            for (id, eval) in &criteria {
                verdicts.push(match (run.status.success(), eval(&out)) {
                    (true, Ok(c)) => c.verdict(id),
                    (true, Err(e)) => Verdict { id, status: Status::Fail, detail: e },
                    (false, _) => Verdict { id, status: Status::Fail, detail: format!("pipeline failed: {}", stderr(&run).trim()) },
                });
            }
        }
        None => {
            // The evaluators must at least read a real run's outputs.
            for (id, eval) in &criteria {
                if let Err(e) = eval(&synthetic_run) {
                    eprintln!("evaluator {id} cannot read pipeline outputs: {e}");
                    return ExitCode::FAILURE;
                }
            }
            for (id, _) in &criteria {
                let partial = match *id {
                    "sae-training" => format!("; weight-independent: finite-difference gradient error {grad_err:.2e} ≤ 1e-3 [{}]", if grad_err <= 1e-3 { "ok" } else { "MISS" }),
                    "deployment" => format!("; weight-independent: {}", independent().summary()),
                    _ => String::new(),
                };
                verdicts.push(Verdict {
                    id,
                    status: Status::Unavailable,
                    detail: format!("GPT-2 small weights unavailable (set CIRCUITBENCH_WEIGHTS or add assets/gpt2/model.bin){partial}"),
                });
            }
        }
    }
    verdicts.push(det.verdict("determinism"));

    let mut genuine = 0;
    for v in &verdicts {
        let tag = match v.status {
            Status::Pass => "PASS",
            Status::Fail => {
                genuine += 1;
                "FAIL"
            }
            Status::Unavailable => "FAIL",
        };
        println!("{tag} {}: {}", v.id, v.detail);
    }
    // Weight-independent sub-checks must hold regardless of weights.
    let independent_ok = grad_err <= 1e-3 && independent().passed();
    let passed = verdicts.iter().filter(|v| matches!(v.status, Status::Pass)).count();
    println!("acceptance: {passed}/{} passed", verdicts.len());
    if genuine > 0 || !independent_ok {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
