use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::process::{Command, Output};

use landuse_core::evaluation::mapping_metrics;
use landuse_core::geodata::{assignments_from_jsonl, parse_parcels};
use landuse_core::{Level, MappingOptions, Taxonomy};
use serde_json::Value;

const SMALL: &str = "seed = 11
synth.train_per_class = 40
synth.val_per_class = 10
synth.noise = 0.3
train.epochs = 3
train.batch_size = 32
finetune.epochs = 2
finetune.batch_size = 32
";

fn landuse(args: &[&str], config: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_landuse"))
        .args(args)
        .arg("--config")
        .arg(config)
        .env_remove("LANDUSE_OUT_DIR")
        .output()
        .unwrap()
}

fn ok(args: &[&str], config: &Path) {
    let out = landuse(args, config);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn last_error(out: &Output) -> Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    let last = stderr.lines().last().expect("stderr is empty");
    serde_json::from_str(last).unwrap_or_else(|e| panic!("last stderr line is not JSON ({e}): {last}"))
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

fn setup(extra: &str) -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    std::fs::write(&conf, format!("{SMALL}{extra}")).unwrap();
    (dir, conf)
}

#[test]
fn errors_end_with_a_json_line() {
    let (dir, conf) = setup("");
    let err = last_error(&landuse(&["synth", "bogus.key=1"], &conf));
    assert_eq!(err["error"]["kind"], "config");
    assert!(err["error"]["message"].as_str().unwrap().contains("bogus.key"));

    let err = last_error(&landuse(&["filter"], &conf));
    assert_eq!(err["error"]["kind"], "load");

    let err = last_error(&landuse(&["frobnicate"], &conf));
    assert_eq!(err["error"]["kind"], "usage");

    std::fs::write(dir.path().join("noseed.conf"), "level = top\n").unwrap();
    let err = last_error(&landuse(&["synth"], &dir.path().join("noseed.conf")));
    assert_eq!(err["error"]["kind"], "config");
}

#[test]
fn synth_is_reproducible() {
    let (dir, conf) = setup("");
    ok(&["synth", "out_dir=a"], &conf);
    ok(&["synth", "out_dir=b"], &conf);
    let a = snapshot(&dir.path().join("a"));
    assert_eq!(a, snapshot(&dir.path().join("b")));
    assert!(a.contains_key("train.jsonl") && a.contains_key("parcels.geojson"));

    ok(&["synth", "out_dir=c", "seed=12"], &conf);
    assert_ne!(a["train.jsonl"], snapshot(&dir.path().join("c"))["train.jsonl"]);
}

#[test]
fn all_matches_individual_stages() {
    let (dir, conf) = setup("");
    for out in ["chain", "steps"] {
        ok(&["synth", &format!("out_dir={out}")], &conf);
    }
    ok(&["all", "out_dir=chain"], &conf);
    for stage in ["filter", "train", "adapt", "predict", "map", "eval"] {
        ok(&[stage, "out_dir=steps"], &conf);
    }
    let chain = snapshot(&dir.path().join("chain"));
    assert_eq!(chain, snapshot(&dir.path().join("steps")));

    let report: Value = serde_json::from_slice(&chain["report.json"]).unwrap();
    assert_eq!(report["level"], "fine");
    assert!(report["provenance"]["config_hash"].as_str().unwrap().len() == 64);
    assert_eq!(report["provenance"]["seed"], 11);
    let map: Value = serde_json::from_slice(&chain["map.geojson"]).unwrap();
    assert_eq!(map["type"], "FeatureCollection");
    assert_eq!(map["provenance"], report["provenance"]);
}

#[test]
fn out_dir_env_override() {
    let (dir, conf) = setup("");
    let target = dir.path().join("elsewhere");
    let out = Command::new(env!("CARGO_BIN_EXE_landuse"))
        .args(["synth", "--config"])
        .arg(&conf)
        .env("LANDUSE_OUT_DIR", &target)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(target.join("parcels.geojson").exists());
    assert!(!dir.path().join("out").exists());
}

#[test]
fn top_level_eval_rolls_up_fine_predictions() {
    let (dir, conf) = setup("");
    ok(&["synth"], &conf);
    ok(&["all"], &conf);
    ok(&["eval", "level=top"], &conf);
    let out = dir.path().join("out");
    let report: Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["level"], "top");

    // Relabel by hand, then score top-level predictions at the top level.
    let tax = Taxonomy::builtin();
    let parcels = parse_parcels(&std::fs::read_to_string(out.join("parcels.geojson")).unwrap(), &tax).unwrap();
    let assignments = assignments_from_jsonl(&std::fs::read_to_string(out.join("assignments.jsonl")).unwrap()).unwrap();
    let preds: HashMap<String, usize> = std::fs::read_to_string(out.join("predictions.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let v: Value = serde_json::from_str(l).unwrap();
            let fine = v["index"].as_u64().unwrap() as usize;
            (v["image"].as_str().unwrap().to_string(), tax.roll_up(fine, Level::Top).unwrap())
        })
        .collect();
    let manual =
        mapping_metrics(&assignments, &preds, Level::Top, &parcels, &tax, Level::Top, MappingOptions::default()).unwrap();
    assert_eq!(report["correct"], manual.correct);
    assert_eq!(report["predictions"], manual.predictions);
    assert_eq!(report["recalled"], manual.recalled);
    assert_eq!(report["precision"].as_f64().unwrap(), manual.precision);
    assert_eq!(report["recall"].as_f64().unwrap(), manual.recall);

    let csv = std::fs::read_to_string(out.join("per_class.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
}
