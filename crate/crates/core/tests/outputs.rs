//! Emitted files: layout, round trips and byte-for-byte reproducibility.

use std::fs;

use rankope::harness::{
    emit_outputs, run_sweep, ExperimentConfig, OutputFormat, SweepReport, CSV_HEADER,
};
use sha2::{Digest, Sha256};

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_json(
        r#"{
            "name": "small",
            "environment": {"kind": "synthetic", "action_count": 3, "K": 2, "d_x": 3},
            "data": {"seeds": 4, "evaluation_contexts": 300},
            "sweep": {"axis": "n", "values": [50, 100]},
            "output": {"timings": false}
        }"#,
    )
    .unwrap();
    cfg.pipeline.click_model.epochs = 20;
    cfg
}

fn hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[test]
fn csv_has_fixed_header_and_one_row_per_estimator_and_value() {
    let cfg = small_config();
    let report = run_sweep(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_outputs(&report, dir.path(), OutputFormat::Csv).unwrap();
    let text = fs::read_to_string(dir.path().join("results.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    assert_eq!(lines.count(), 2 * cfg.estimators.len());
    assert!(!dir.path().join("results.json").exists());
}

#[test]
fn json_round_trips_and_manifest_digests_match_files() {
    let report = run_sweep(&small_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = emit_outputs(&report, dir.path(), OutputFormat::All).unwrap();
    let back: SweepReport =
        serde_json::from_slice(&fs::read(dir.path().join("results.json")).unwrap()).unwrap();
    assert_eq!(back, report);
    let names: Vec<&str> = manifest.output_digests.keys().map(String::as_str).collect();
    assert_eq!(
        names,
        [
            "bias2.svg",
            "mse.svg",
            "results.csv",
            "results.json",
            "var.svg"
        ]
    );
    for (name, digest) in &manifest.output_digests {
        assert_eq!(
            &hex(&fs::read(dir.path().join(name)).unwrap()),
            digest,
            "{name}"
        );
    }
    let on_disk: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(on_disk["master_seed"], 12345);
}

#[test]
fn svg_has_one_polyline_per_estimator() {
    let cfg = small_config();
    let report = run_sweep(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_outputs(&report, dir.path(), OutputFormat::Svg).unwrap();
    for metric in ["mse", "bias2", "var"] {
        let svg = fs::read_to_string(dir.path().join(format!("{metric}.svg"))).unwrap();
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<polyline").count(), cfg.estimators.len());
    }
}

#[test]
fn reruns_without_timings_are_byte_identical() {
    let cfg = small_config();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = emit_outputs(&run_sweep(&cfg).unwrap(), a.path(), OutputFormat::All).unwrap();
    let mb = emit_outputs(&run_sweep(&cfg).unwrap(), b.path(), OutputFormat::All).unwrap();
    assert_eq!(ma.output_digests, mb.output_digests);
    assert_eq!(
        fs::read(a.path().join("manifest.json")).unwrap(),
        fs::read(b.path().join("manifest.json")).unwrap()
    );
}

#[test]
fn a_different_master_seed_changes_results() {
    let cfg = small_config();
    let mut other = cfg.clone();
    other.data.master_seed += 1;
    let (a, b) = (run_sweep(&cfg).unwrap(), run_sweep(&other).unwrap());
    assert_ne!(a.rows, b.rows);
}

#[test]
fn empty_reports_are_rejected() {
    let mut report = run_sweep(&small_config()).unwrap();
    report.rows.clear();
    let dir = tempfile::tempdir().unwrap();
    assert!(emit_outputs(&report, dir.path(), OutputFormat::All).is_err());
}
