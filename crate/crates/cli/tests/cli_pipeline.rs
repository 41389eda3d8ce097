// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end command-line behaviour on a synthetic checkpoint: dependency
//! errors, config errors, locking, a full `report-all`, and determinism.

mod common;

use std::path::Path;

use common::*;

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn report_all_produces_figures_and_complete_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let weights = write_checkpoint(dir.path());
    let out = dir.path().join("run");
    let cfg = write_config(&small_config(&weights, &out), &dir.path().join("cfg.json"));
    let o = circuitbench(&["report-all", "--config", path_str(&cfg), "--deterministic"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let files = manifest["files"].as_array().unwrap();
    for f in circuitbench_core::pipeline::files::FIGURES {
        assert!(out.join(f).is_file(), "missing {f}");
        assert!(files.iter().any(|e| e["path"] == f), "{f} not in manifest");
    }
    for e in files {
        let p = out.join(e["path"].as_str().unwrap());
        let sha = circuitbench_core::report::sha256_file(&p).unwrap();
        assert_eq!(e["sha256"].as_str().unwrap(), sha, "{}", p.display());
    }
}

/// Every CSV/JSON output (records included) of a deterministic run.
fn snapshot(out: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![out.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if matches!(p.extension().and_then(|e| e.to_str()), Some("csv" | "json" | "svg")) {
                files.push((p.strip_prefix(out).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn deterministic_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let weights = write_checkpoint(dir.path());
    let mut runs = Vec::new();
    for (i, threads) in ["1", "4"].into_iter().enumerate() {
        let out = dir.path().join(format!("run{i}"));
        let cfg = write_config(&small_config(&weights, &out), &dir.path().join(format!("cfg{i}.json")));
        let o = circuitbench(&["report-all", "--config", path_str(&cfg), "--deterministic", "--threads", threads]);
        assert!(o.status.success(), "{}", stderr(&o));
        runs.push(snapshot(&out));
    }
    assert!(runs[0].len() > 40, "{} files", runs[0].len());
    let names = |r: &Vec<(String, Vec<u8>)>| r.iter().map(|f| f.0.clone()).collect::<Vec<_>>();
    assert_eq!(names(&runs[0]), names(&runs[1]));
    for (a, b) in runs[0].iter().zip(&runs[1]) {
        assert!(a.1 == b.1, "{} differs between runs", a.0);
    }
}

#[test]
fn seed_changes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let weights = write_checkpoint(dir.path());
    let mut baselines = Vec::new();
    for seed in ["1", "2"] {
        let out = dir.path().join(seed);
        let cfg = write_config(&small_config(&weights, &out), &dir.path().join("cfg.json"));
        let o = circuitbench(&["baseline", "--config", path_str(&cfg), "--seed", seed, "--deterministic"]);
        assert!(o.status.success(), "{}", stderr(&o));
        baselines.push(std::fs::read(out.join("baseline.csv")).unwrap());
    }
    assert_ne!(baselines[0], baselines[1]);
}

#[test]
fn report_all_resumes_and_reruns_only_stale_stages() {
    let dir = tempfile::tempdir().unwrap();
    let weights = write_checkpoint(dir.path());
    let out = dir.path().join("run");
    let mut config = small_config(&weights, &out);
    let cfg = write_config(&config, &dir.path().join("cfg.json"));
    assert!(circuitbench(&["report-all", "--config", path_str(&cfg), "--deterministic"]).status.success());
    config.cost.c_fp = 1.0;
    write_config(&config, &cfg);
    let o = circuitbench(&["report-all", "--config", path_str(&cfg), "--deterministic"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = stderr(&o);
    for skipped in ["baseline", "train-sae", "monitor-roc", "compose-table"] {
        assert!(log.contains(&format!("[{skipped}] up to date, skipped")), "{skipped} re-ran:\n{log}");
    }
    for rerun in ["deploy-sweep", "sensitivity"] {
        assert!(log.contains(&format!("[{rerun}] running")), "{rerun} skipped:\n{log}");
    }
}

#[test]
fn stage_before_its_producer_exits_3_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let weights = write_checkpoint(dir.path());
    let out = dir.path().join("run");
    let cfg = write_config(&small_config(&weights, &out), &dir.path().join("cfg.json"));
    let o = circuitbench(&["ablate", "--config", path_str(&cfg)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("circuitbench train-sae"), "{}", stderr(&o));
    // Producing the SAE is not enough: selectivity is still missing.
    assert!(circuitbench(&["gen-activations", "--config", path_str(&cfg)]).status.success());
    assert!(circuitbench(&["train-sae", "--config", path_str(&cfg)]).status.success());
    let o = circuitbench(&["ablate", "--config", path_str(&cfg)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("circuitbench selectivity"), "{}", stderr(&o));
    // A tampered artifact makes its producer stale.
    std::fs::write(out.join("sae.bin"), b"tampered").unwrap();
    let o = circuitbench(&["selectivity", "--config", path_str(&cfg)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("stale"), "{}", stderr(&o));
}

#[test]
fn invalid_config_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"sae": {"d_sea": 64}}"#).unwrap();
    let o = circuitbench(&["baseline", "--config", path_str(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("d_sea"), "{}", stderr(&o));

    std::fs::write(&cfg, r#"{"activations": {"site_layer": 40}}"#).unwrap();
    let o = circuitbench(&["baseline", "--config", path_str(&cfg), "--out", path_str(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("activations.site_layer"), "{}", stderr(&o));

    let o = circuitbench(&["baseline", "--weights", "/nonexistent/model.bin", "--out", path_str(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("weights"), "{}", stderr(&o));

    let o = circuitbench(&["no-such-stage"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn concurrent_invocation_on_same_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join(circuitbench_core::report::record::LOCK_FILE), b"").unwrap();
    let o = circuitbench(&["compose-table", "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("in use"), "{}", stderr(&o));
}
