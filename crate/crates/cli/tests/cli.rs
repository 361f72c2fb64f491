use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "synth": {"n_entities": 500, "n_snapshots": 4},
  "pipeline": {"bootstrap_resamples": 200, "train": {"rounds": 20}}
}"#;

fn fortress(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fortress"))
        .args(args)
        .current_dir(dir)
        .env_remove("FORTRESS_SEED")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = fortress(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.json"), SMALL).unwrap();
    ok(dir.path(), &["gen", "--config", "small.json", "--out", "gen"]);
    dir
}

#[test]
fn split_twice_gives_identical_files() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["split", "--config", "small.json", "--data", "gen/data.csv", "--out", "a"]);
    ok(d, &["split", "--config", "small.json", "--data", "gen/data.csv", "--out", "b"]);
    assert_eq!(fs::read(d.join("a/partition.json")).unwrap(), fs::read(d.join("b/partition.json")).unwrap());
}

#[test]
fn experiment_prints_four_row_table() {
    let dir = setup();
    let md = ok(dir.path(), &["experiment", "--config", "small.json", "--data", "gen/data.csv", "--out", "exp"]);
    let rows: Vec<&str> = md
        .lines()
        .skip_while(|l| !l.starts_with("| Model"))
        .skip(2)
        .take_while(|l| l.starts_with('|'))
        .collect();
    assert_eq!(rows.len(), 4, "{md}");
    assert!(md.contains("PR-AUC (95% CI)") && md.contains("Mean entity CV (95% CI)"));
    assert!(rows[3].starts_with("| Fortress |"));
}

#[test]
fn report_renders_one_row_per_iteration() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["prune", "--config", "small.json", "--data", "gen/data.csv", "--mode", "noninferior", "--out", "p"]);
    let trace: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("p/trace.json")).unwrap()).unwrap();
    let n = trace["iterations"].as_array().unwrap().len();
    let md = ok(d, &["report", "p/trace.json"]);
    let decisions = md
        .lines()
        .filter(|l| l.ends_with('|') && (l.contains("| accept |") || l.contains("| reject |")))
        .count();
    assert_eq!(decisions, n);
    ok(d, &["report", "p/trace.json", "--out", "trace.md"]);
    assert_eq!(fs::read_to_string(d.join("trace.md")).unwrap(), md);
}

#[test]
fn commands_are_repeatable_and_leave_inputs_alone() {
    let dir = setup();
    let d = dir.path();
    let data = fs::read(d.join("gen/data.csv")).unwrap();
    ok(d, &["train", "--config", "small.json", "--data", "gen/data.csv", "--out", "t"]);
    let model = fs::read(d.join("t/model.json")).unwrap();
    for run in ["x", "y"] {
        ok(d, &["stability", "--config", "small.json", "--data", "gen/data.csv", "--model", "t/model.json", "--out", run]);
        ok(d, &["eval", "--config", "small.json", "--data", "gen/data.csv", "--model", "t/model.json", "--out", run]);
        ok(
            d,
            &["flipflop", "--config", "small.json", "--data", "gen/data.csv", "--model", "t/model.json", "--base-model", "t/model.json", "--out", run],
        );
    }
    for f in ["stability.json", "eval.json", "flipflop.json"] {
        assert_eq!(fs::read(d.join("x").join(f)).unwrap(), fs::read(d.join("y").join(f)).unwrap(), "{f}");
    }
    assert_eq!(fs::read(d.join("gen/data.csv")).unwrap(), data);
    assert_eq!(fs::read(d.join("t/model.json")).unwrap(), model);
}

#[test]
fn mask_file_restricts_training() {
    let dir = setup();
    let d = dir.path();
    fs::write(d.join("mask.json"), r#"["f_sr_0", "f_eng_3"]"#).unwrap();
    ok(d, &["train", "--config", "small.json", "--data", "gen/data.csv", "--mask", "mask.json", "--out", "t"]);
    let model: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("t/model.json")).unwrap()).unwrap();
    let active = model["mask"].as_array().unwrap().iter().filter(|b| b.as_bool().unwrap()).count();
    assert_eq!(active, 2);
}

#[test]
fn resolved_config_is_persisted_with_explicit_seeds() {
    let dir = setup();
    let cfg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("gen/gen.config.json")).unwrap()).unwrap();
    assert_eq!(cfg["seed"], 42);
    assert_eq!(cfg["synth"]["seed"], 42);
    assert_eq!(cfg["pipeline"]["train"]["seed"], 42);
    let out = Command::new(env!("CARGO_BIN_EXE_fortress"))
        .args(["gen", "--config", "small.json", "--out", "env"])
        .current_dir(dir.path())
        .env("FORTRESS_SEED", "7")
        .output()
        .unwrap();
    assert!(out.status.success());
    let cfg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("env/gen.config.json")).unwrap()).unwrap();
    assert_eq!(cfg["synth"]["seed"], 7);
}

#[test]
fn exit_codes_separate_validation_from_io() {
    let dir = setup();
    let d = dir.path();
    assert_eq!(fortress(d, &["eval", "--data", "missing.csv", "--model", "m.json", "--out", "o"]).status.code(), Some(2));
    fs::write(d.join("typo.json"), r#"{"pipeline": {"epsilom": 0.1}}"#).unwrap();
    assert_eq!(fortress(d, &["gen", "--config", "typo.json", "--out", "o"]).status.code(), Some(1));
    assert_eq!(fortress(d, &["prune", "--data", "gen/data.csv", "--percentile", "0", "--out", "o"]).status.code(), Some(1));
    fs::write(d.join("bad.csv"), "entity_id,snapshot_id,region,label,f_eng_a\na,1,r,MEH,1\n").unwrap();
    let out = fortress(d, &["split", "--data", "bad.csv", "--out", "o"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
    assert_eq!(fortress(d, &["frobnicate"]).status.code(), Some(1));
}
