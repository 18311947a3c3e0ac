use std::collections::BTreeMap;
use std::path::Path;

use casal_runner::config::{parse_config, RunConfig};
use casal_runner::manifest::{hash_tree, RunManifest, MANIFEST_FILE};
use casal_runner::pipeline::{run, run_single};

const TINY: &str = include_str!("tiny.toml");

fn tiny(out: &Path) -> RunConfig {
    let (mut cfg, _) = parse_config(TINY, &[]).unwrap();
    cfg.out = out.to_path_buf();
    cfg
}

fn artifacts(dir: &Path) -> BTreeMap<String, String> {
    RunManifest::read(dir).unwrap().unwrap().artifacts
}

#[test]
fn identical_runs_produce_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run(&tiny(&a), &[], false).unwrap();
    run(&tiny(&b), &[], false).unwrap();
    let (ha, hb) = (artifacts(&a), artifacts(&b));
    assert_eq!(ha, hb);
    for dir in ["corpus/", "checkpoints/", "splits/", "packs/", "caches/", "completions/", "metrics/", "report/"] {
        assert!(ha.keys().any(|k| k.starts_with(dir)), "nothing under {dir}");
    }
    // every file is in the manifest
    let on_disk: Vec<String> = hash_tree(&a, &a).unwrap().into_keys().filter(|k| k != MANIFEST_FILE).collect();
    assert_eq!(on_disk, ha.keys().cloned().collect::<Vec<_>>());
    let csv = std::fs::read_to_string(a.join("metrics/metrics.csv")).unwrap();
    let runs: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(runs, ["baseline", "casal", "caa", "sft"]);
}

#[test]
fn resume_skips_unchanged_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("r");
    let cfg = tiny(&dir);
    let first = run(&cfg, &[], false).unwrap();
    assert!(first.skipped.is_empty());
    assert!(run(&cfg, &[], false).is_err(), "non-empty directory without resume");

    let report = std::fs::read(dir.join("report/summary.json")).unwrap();
    let again = run(&cfg, &[], true).unwrap();
    assert!(again.ran.is_empty());
    assert_eq!(again.skipped.len(), first.ran.len());

    std::fs::remove_file(dir.join("packs/layer_0.pack")).unwrap();
    let redo = run(&cfg, &[], true).unwrap();
    assert_eq!(redo.ran, ["steer"]);

    run_single(&cfg, "report", &[]).unwrap();
    std::fs::remove_file(dir.join("report/summary.json")).unwrap();
    let r = run_single(&cfg, "report", &[]).unwrap();
    assert_eq!(r.ran, ["report"]);
    assert_eq!(std::fs::read(dir.join("report/summary.json")).unwrap(), report);

    // a config change invalidates everything downstream of the config
    let mut changed = cfg.clone();
    changed.casal.lr = 2e-3;
    let out = run(&changed, &[], true).unwrap();
    assert!(out.ran.contains(&"train".to_string()));
}

#[test]
fn stage_filter_writes_only_the_ledger() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("f");
    let mut cfg = tiny(&dir);
    cfg.stages = vec!["flops".into()];
    run(&cfg, &[], false).unwrap();
    let files: Vec<String> = hash_tree(&dir, &dir).unwrap().into_keys().collect();
    assert_eq!(files, ["config.toml", "flops/ledger.csv", "flops/ledger.json", MANIFEST_FILE]);
    let m = RunManifest::read(&dir).unwrap().unwrap();
    assert_eq!(m.stages.keys().collect::<Vec<_>>(), ["flops"]);
    assert_eq!(m.config["casal"]["lr"], 1e-3);
}

#[test]
fn failing_stage_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("x");
    let mut cfg = tiny(&dir);
    cfg.stages = vec!["train".into()];
    let err = format!("{:#}", run(&cfg, &[], false).unwrap_err());
    assert!(err.contains("stage train"), "{err}");
    assert!(err.contains("missing input"), "{err}");
}

#[test]
fn env_overrides_are_recorded_and_one_layer_sweeps_one_row() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("e");
    let env = vec![
        ("CASAL_STEERING__LAYERS".to_string(), "[1]".to_string()),
        ("CASAL_STAGES".to_string(), r#"["corpus", "pretrain", "probe", "steer", "select", "caa"]"#.to_string()),
    ];
    let (mut cfg, applied) = parse_config(TINY, &env).unwrap();
    cfg.out = dir.clone();
    run(&cfg, &applied, false).unwrap();
    let m = RunManifest::read(&dir).unwrap().unwrap();
    assert_eq!(m.env_overrides, applied);
    let csv = std::fs::read_to_string(dir.join("metrics/caa_layers.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(dir.join("packs/layer_1.pack").exists());
    assert!(!dir.join("packs/layer_0.pack").exists());
}
