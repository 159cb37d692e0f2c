use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn pmdg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pmdg")).args(args).output().unwrap()
}

fn synthetic() -> Value {
    json!({
        "num_classes": 2, "image_size": 16, "samples_per_domain": 40, "seed": 1,
        "domains": [
            {"name": "source", "hue_palette": [0.0, 0.5], "background": "flat", "rotation_range": 20.0, "color_class_correlation": 0.9},
            {"name": "target", "hue_palette": [0.0, 0.5], "background": "flat", "rotation_range": 20.0, "color_class_correlation": 0.1},
            {"name": "third", "hue_palette": [0.0, 0.5], "background": "noise", "rotation_range": 20.0, "color_class_correlation": 0.5}
        ]
    })
}

fn config() -> Value {
    json!({
        "dataset": {"synthetic": synthetic()},
        "source": "source",
        "targets": ["target"],
        "transforms": ["org", "rand_conv"],
        "trials": 2,
        "train": {"epochs": 1, "batch_size": 8, "eval_every": 2,
                  "model": {"kind": "mlp", "widths": [4], "norm": "none"}}
    })
}

fn write(path: &Path, v: &Value) {
    std::fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

fn lines(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn without_wall_time(mut v: Value) -> Value {
    v.as_object_mut().unwrap().remove("wall_time_secs");
    v
}

#[test]
fn run_is_deterministic_and_echoes_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    write(&cfg, &config());
    let out = dir.path().join("out");
    let mut recs = Vec::new();
    for name in ["a.jsonl", "b.jsonl"] {
        let r = dir.path().join(name);
        let o = pmdg(&[
            "run", "--config", cfg.to_str().unwrap(), "--seed", "7", "--out", out.to_str().unwrap(),
            "--records", r.to_str().unwrap(), "--override", "hparams.lr=0.05",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        recs.push(lines(&r));
    }
    assert_eq!(recs[0].len(), 2);
    let strip = |v: &Vec<Value>| -> Vec<String> { v.iter().map(|r| without_wall_time(r.clone()).to_string()).collect() };
    assert_eq!(strip(&recs[0]), strip(&recs[1]));
    let r0 = &recs[0][0];
    assert_eq!(r0["seed"], 7);
    assert_eq!(recs[0][1]["seed"], 8);
    assert_eq!(r0["config"]["hparams"]["lr"], 0.05);
    assert_eq!(r0["config"]["train"]["seed"], 7);
    assert_eq!(r0["k"], 2);
    assert!(Path::new(r0["log_ref"].as_str().unwrap()).exists());

    // a second run into the same records file skips every cell
    let o = pmdg(&[
        "run", "--config", cfg.to_str().unwrap(), "--seed", "7", "--out", out.to_str().unwrap(),
        "--records", dir.path().join("a.jsonl").to_str().unwrap(), "--override", "hparams.lr=0.05",
    ]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("0 written, 2 skipped"));
}

#[test]
fn validation_errors_exit_one_with_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    let mut c = config();
    c["trials"] = json!(0);
    write(&cfg, &c);
    let o = pmdg(&["run", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("offending key: trials"));

    let o = pmdg(&[
        "--json-errors", "run", "--config", cfg.to_str().unwrap(), "--override", "train.epochz=3",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["key"], "train.epochz");

    let mut c = config();
    c["train"]["bogus"] = json!(1);
    write(&cfg, &c);
    let o = pmdg(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("offending key: bogus"));

    assert_eq!(pmdg(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(pmdg(&["run", "--nope"]).status.code(), Some(1));
    assert_eq!(pmdg(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    let mut c = config();
    c["dataset"] = json!({"folder": {"root": dir.path().join("missing"), "image_size": 16}});
    write(&cfg, &c);
    let o = pmdg(&["run", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_then_reports() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("grid.json");
    let mut base = config();
    base["trials"] = json!(1);
    write(
        &grid,
        &json!({"base": base, "grid": {"algorithm": ["erm", "sd", "groupdro"], "transforms": [["org"], ["org", "edge"]]}}),
    );
    let records = dir.path().join("r.jsonl");
    let o = pmdg(&[
        "sweep", "--config", grid.to_str().unwrap(), "--records", records.to_str().unwrap(),
        "--out", dir.path().to_str().unwrap(), "--jobs", "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(lines(&records).len(), 6);

    let rep = dir.path().join("rep");
    for kind in ["gains", "table"] {
        let o = pmdg(&["report", kind, "--records", records.to_str().unwrap(), "--out", rep.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(rep.join(format!("{kind}.csv")).exists());
        assert!(rep.join(format!("{kind}.md")).exists());
    }
    let gains = std::fs::read_to_string(rep.join("gains.csv")).unwrap();
    assert!(gains.starts_with("transform,erm,groupdro,sd\norg,0.0,"));
    let o = pmdg(&["report", "scatter", "--records", records.to_str().unwrap(), "--out", rep.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gen_data_and_previews() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("synth.json");
    write(&spec, &synthetic());
    let data = dir.path().join("data");
    let o = pmdg(&["gen-data", "--config", spec.to_str().unwrap(), "--out", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(data.join("source").join("0").is_dir() || data.join("source").read_dir().unwrap().count() == 2);

    let prev = dir.path().join("prev");
    let o = pmdg(&["preview-transforms", "--dataset", spec.to_str().unwrap(), "--out", prev.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(prev.read_dir().unwrap().count(), 10);
    assert!(prev.join("style_stats.png").exists());
}
