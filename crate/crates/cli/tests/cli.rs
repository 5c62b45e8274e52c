use std::path::Path;
use std::process::{Command, Output};

fn octangle(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_octangle")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = octangle(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_writes_images_and_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--n", "6", "--seed", "4", "--out", p(&data)]);
    let manifest = std::fs::read_to_string(data.join("manifest.jsonl")).unwrap();
    let records: Vec<serde_json::Value> =
        manifest.lines().filter(|l| !l.starts_with('#')).map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 6);
    for r in &records {
        assert!(data.join(r["image_path"].as_str().unwrap()).is_file());
    }
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("manifest.jsonl.json")).unwrap()).unwrap();
    assert_eq!(sidecar["command"], "synth");
}

#[test]
fn usage_errors_exit_with_status_two() {
    assert_eq!(octangle(&["synth", "--bogus"]).status.code(), Some(2));
    assert_eq!(octangle(&["synth"]).status.code(), Some(2)); // --out is required
    assert_eq!(octangle(&["--threads", "0", "synth", "--out", "x"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.jsonl");
    assert_eq!(octangle(&["detect-boundary", "--manifest", p(&missing)]).status.code(), Some(1));
}

#[test]
fn config_file_values_fill_in_missing_flags() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, format!(r#"{{"synth": {{"n": 4, "out": {:?}}}}}"#, p(&data))).unwrap();
    ok(&["--config", p(&cfg), "synth", "--seed", "1"]);
    let manifest = std::fs::read_to_string(data.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().filter(|l| !l.starts_with('#')).count(), 4);
}

#[test]
fn full_pipeline_produces_an_evaluation_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    let manifest = data.join("manifest.jsonl");
    let (svr, mldn, preds, report, roc) =
        (d.join("m.osvr"), d.join("m.omld"), d.join("preds.jsonl"), d.join("report.json"), d.join("roc.csv"));

    ok(&["--threads", "1", "synth", "--n", "12", "--seed", "2", "--out", p(&data)]);
    let bounds = ok(&["detect-boundary", "--manifest", p(&manifest)]);
    assert_eq!(String::from_utf8(bounds.stdout).unwrap().lines().count(), 12);
    ok(&["train-svr", "--manifest", p(&manifest), "--out", p(&svr), "--max-images", "6"]);
    let spurs = ok(&["detect-aca", "--manifest", p(&manifest), "--svr-model", p(&svr)]);
    let first: serde_json::Value = serde_json::from_str(String::from_utf8(spurs.stdout).unwrap().lines().next().unwrap()).unwrap();
    assert!(first["ss_v"].as_u64().is_some(), "{first}");
    ok(&[
        "train-mldn", "--manifest", p(&manifest), "--svr-model", p(&svr), "--out", p(&mldn),
        "--input-size", "32", "--epochs", "1", "--batch", "4", "--augment", "off",
    ]);
    ok(&[
        "infer", "--manifest", p(&manifest), "--svr-model", p(&svr), "--mldn-model", p(&mldn), "--out", p(&preds),
    ]);
    ok(&[
        "eval", "--predictions", p(&preds), "--manifest", p(&manifest), "--out", p(&report), "--roc-csv", p(&roc),
        "--resamples", "100",
    ]);

    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let auc = r["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    assert_eq!(r["n_pos"].as_u64().unwrap() + r["n_neg"].as_u64().unwrap(), 12);
    assert!(std::fs::read_to_string(&roc).unwrap().lines().count() >= 2);
    for artifact in [&svr, &mldn, &preds, &report] {
        let mut sidecar = artifact.as_os_str().to_owned();
        sidecar.push(".json");
        assert!(Path::new(&sidecar).is_file(), "{}", artifact.display());
    }
}
