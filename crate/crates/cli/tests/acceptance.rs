//! Exit criteria on the pinned synthetic benchmark (default `SynthConfig`,
//! seed 42). Runs without the libtest harness and prints one line per
//! criterion; the process fails if any criterion fails.

use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use fortress::data::{assign_partition, Fractions, Partition};
use fortress::metrics::{cv, pr_auc, CvMode};
use fortress::model::{train, train_with_history, BoostedModel, FeatureMask, TrainConfig, TrainSet};
use fortress::pipeline::{experiment_models, fortress_run, split_dataset, summarize_experiment, FortressConfig, PruneMode};
use fortress::pipeline::{ROW_ALL_MULTI, ROW_ALL_SINGLE, ROW_FORTRESS, ROW_SR_ONLY};
use fortress::rng::seeded;
use fortress::synth::{entity_id, generate, FeatureRole, SynthConfig};
use rand::Rng;

const ORACLE_TOL: f64 = 1e-12;
const ORACLE_BUDGET: Duration = Duration::from_secs(10);
const RECOVERY_BUDGET: Duration = Duration::from_secs(300);
const MIN_NOISE_PRUNED: usize = 6;
const AP_SLACK: f64 = 0.005;
const MIN_FLIPFLOP_REDUCTION: f64 = 0.05;
const MIN_REGIONS_IMPROVED: usize = 4;
const PARTITION_KEYS: usize = 100_000;
const PARTITION_TOL: f64 = 0.01;
const ROUNDTRIP_ROWS: usize = 1000;

type Outcome = (bool, String);

/// Average precision by walking every distinct threshold and recomputing
/// precision and recall from scratch.
fn curve_walk_ap(scores: &[f64], labels: &[bool]) -> f64 {
    let total_pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let (mut tp, mut predicted) = (0.0, 0.0);
        for (s, &l) in scores.iter().zip(labels) {
            if *s >= t {
                predicted += 1.0;
                if l {
                    tp += 1.0;
                }
            }
        }
        let recall = tp / total_pos;
        ap += (recall - prev_recall) * (tp / predicted);
        prev_recall = recall;
    }
    ap
}

fn direct_cv(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt() / m
}

fn c1_metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut gen = seeded(1);
    let mut ap_err = 0.0_f64;
    for _ in 0..1000 {
        let n = gen.random_range(1..=50);
        let levels = gen.random_range(1..=8);
        let scores: Vec<f64> = (0..n).map(|_| gen.random_range(0..levels) as f64 / levels as f64).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| gen.random_bool(0.4)).collect();
        labels[gen.random_range(0..n)] = true;
        ap_err = ap_err.max((pr_auc(&scores, &labels).unwrap() - curve_walk_ap(&scores, &labels)).abs());
    }
    let mut cv_err = 0.0_f64;
    for _ in 0..1000 {
        let n = gen.random_range(2..=30);
        let xs: Vec<f64> = (0..n).map(|_| gen.random_range(0.001..1.0)).collect();
        cv_err = cv_err.max((cv(&xs, CvMode::Mean).unwrap() - direct_cv(&xs)).abs());
    }
    let took = start.elapsed();
    (
        ap_err <= ORACLE_TOL && cv_err <= ORACLE_TOL && took < ORACLE_BUDGET,
        format!("max |AP - curve walk| {ap_err:.1e}, max |CV - formula| {cv_err:.1e}, {took:.2?}"),
    )
}

fn c2_planted_recovery() -> Outcome {
    let start = Instant::now();
    let (ds, truth) = generate(&SynthConfig::default()).unwrap();
    let cfg = FortressConfig {
        mode: PruneMode::NonInferior,
        epsilon: 0.002,
        ..FortressConfig::default()
    };
    let out = fortress_run(&ds, &cfg).unwrap();
    let took = start.elapsed();
    let count = |role: FeatureRole| {
        out.trace
            .pruned_features
            .iter()
            .filter(|f| FeatureRole::from_name(f) == Some(role))
            .count()
    };
    let (noise, sr, info) = (count(FeatureRole::EngNoise), count(FeatureRole::Sr), count(FeatureRole::EngInfo));
    let total_noise = truth.indices_with(FeatureRole::EngNoise).len();
    (
        noise >= MIN_NOISE_PRUNED && sr == 0 && info == 0 && took < RECOVERY_BUDGET,
        format!(
            "pruned noise {noise}/{total_noise}, semantic {sr}, informative {info} ({:?}), {took:.1?}",
            out.trace.pruned_features
        ),
    )
}

fn c3_to_c5_experiment() -> [Outcome; 3] {
    let (ds, _) = generate(&SynthConfig::default()).unwrap();
    let cfg = FortressConfig::default();
    let models = experiment_models(&ds, &cfg).unwrap();
    let result = summarize_experiment(&models, &cfg).unwrap();
    let row = |n| result.row(n).unwrap();
    let (sr, single, multi, fortress) = (row(ROW_SR_ONLY), row(ROW_ALL_SINGLE), row(ROW_ALL_MULTI), row(ROW_FORTRESS));
    let checks = [
        sr.pr_auc.point < single.pr_auc.point,
        sr.mean_entity_cv.point < single.mean_entity_cv.point,
        multi.mean_entity_cv.point < single.mean_entity_cv.point,
        fortress.mean_entity_cv.point <= multi.mean_entity_cv.point,
        fortress.pr_auc.point >= multi.pr_auc.point - AP_SLACK,
    ];
    let c3 = (
        checks.iter().all(|&c| c),
        format!(
            "PR-AUC {:.4}/{:.4}/{:.4}/{:.4}, CV {:.4}/{:.4}/{:.4}/{:.4}, checks {:?}",
            sr.pr_auc.point,
            single.pr_auc.point,
            multi.pr_auc.point,
            fortress.pr_auc.point,
            sr.mean_entity_cv.point,
            single.mean_entity_cv.point,
            multi.mean_entity_cv.point,
            fortress.mean_entity_cv.point,
            checks
        ),
    );

    let red = &result.flip_flop.relative_reduction;
    let global = red.global.unwrap_or(f64::NEG_INFINITY);
    let improved = red.regions_improved();
    let c4 = (
        global >= MIN_FLIPFLOP_REDUCTION && improved >= MIN_REGIONS_IMPROVED,
        format!(
            "global reduction {:.1}% ({:.1}% -> {:.1}%), {improved}/{} regions improved",
            100.0 * global,
            100.0 * result.flip_flop.base.global.rate,
            100.0 * result.flip_flop.improved.global.rate,
            red.per_region.len()
        ),
    );

    let trace = &models.fortress.trace;
    let sound = trace.accepted().all(|it| it.delta_pr_auc.lo > 0.0);
    let c5 = (
        trace.mode == PruneMode::Strict
            && sound
            && trace.final_validation_pr_auc >= trace.initial_validation_pr_auc,
        format!(
            "{} iterations, {} accepted, VAL PR-AUC {:.4} -> {:.4}",
            trace.iterations.len(),
            trace.accepted().count(),
            trace.initial_validation_pr_auc,
            trace.final_validation_pr_auc
        ),
    );
    [c3, c4, c5]
}

fn run_cli(dir: &Path, args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_fortress"))
        .args(args)
        .current_dir(dir)
        .env_remove("FORTRESS_SEED")
        .output()
        .unwrap();
    assert!(status.status.success(), "{args:?}: {}", String::from_utf8_lossy(&status.stderr));
}

fn c6_determinism() -> Outcome {
    let runs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for dir in &runs {
        let d = dir.path();
        run_cli(d, &["gen", "--seed", "42", "--out", "gen"]);
        run_cli(d, &["prune", "--seed", "42", "--data", "gen/data.csv", "--out", "prune"]);
        run_cli(d, &["eval", "--seed", "42", "--data", "gen/data.csv", "--model", "prune/model.json", "--out", "eval"]);
    }
    let files = [
        "gen/data.csv",
        "prune/model.json",
        "prune/trace.json",
        "prune/stability.json",
        "prune/prune.config.json",
        "eval/eval.json",
        "eval/eval.config.json",
    ];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| fs::read(runs[0].path().join(f)).unwrap() != fs::read(runs[1].path().join(f)).unwrap())
        .collect();
    (differing.is_empty(), format!("{} artifacts compared, differing: {differing:?}", files.len()))
}

fn c7_partition_quality() -> Outcome {
    let fractions = Fractions::default();
    let mut counts = [0usize; 3];
    for i in 0..PARTITION_KEYS {
        match assign_partition(&entity_id(i), &fractions, "fortress") {
            Partition::Train => counts[0] += 1,
            Partition::Val => counts[1] += 1,
            Partition::Test => counts[2] += 1,
        }
    }
    let shares: Vec<f64> = counts.iter().map(|&c| c as f64 / PARTITION_KEYS as f64).collect();
    let within = shares
        .iter()
        .zip([fractions.train, fractions.val, fractions.test])
        .all(|(s, f)| (s - f).abs() <= PARTITION_TOL);

    let (ds, _) = generate(&SynthConfig {
        n_entities: PARTITION_KEYS,
        n_snapshots: 2,
        k_sr: 1,
        k_eng_info: 1,
        k_eng_noise: 0,
        ..SynthConfig::default()
    })
    .unwrap();
    let splits = split_dataset(&ds, fractions, "fortress").unwrap();
    let sets: Vec<BTreeSet<&str>> = [&splits.train, &splits.val, &splits.test]
        .iter()
        .map(|p| p.entity_ids().collect())
        .collect();
    let mut violations = 0;
    for e in ds.entity_ids() {
        let homes = sets.iter().filter(|s| s.contains(e)).count();
        let part = splits.assignment.get(e).unwrap();
        let rows_there = match part {
            Partition::Train => splits.train.entity_rows(e),
            Partition::Val => splits.val.entity_rows(e),
            Partition::Test => splits.test.entity_rows(e),
        }
        .map_or(0, <[usize]>::len);
        if homes != 1 || rows_there != ds.entity_rows(e).unwrap().len() {
            violations += 1;
        }
    }
    (
        within && violations == 0,
        format!(
            "shares {:.4}/{:.4}/{:.4} of {PARTITION_KEYS} keys, {violations} disjointness violations over {} entities",
            shares[0],
            shares[1],
            shares[2],
            ds.n_entities()
        ),
    )
}

/// XOR of two binary features with unequal cell counts.
fn xor_data() -> (Vec<String>, Vec<Vec<Option<f64>>>, Vec<bool>) {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (a, b, n) in [(0.0, 0.0, 10), (0.0, 1.0, 14), (1.0, 0.0, 8), (1.0, 1.0, 12)] {
        for _ in 0..n {
            rows.push(vec![Some(a), Some(b)]);
            labels.push((a == 1.0) != (b == 1.0));
        }
    }
    (vec!["f_a".into(), "f_b".into()], rows, labels)
}

fn c8_model_sanity() -> Outcome {
    let (ds, _) = generate(&SynthConfig::default()).unwrap();
    let splits = split_dataset(&ds, Fractions::default(), "fortress").unwrap();
    let outcome = train_with_history(
        &TrainSet::from_dataset(&splits.train),
        &FeatureMask::all(ds.schema().len()),
        &TrainConfig::default(),
    )
    .unwrap();
    let increases = outcome.log_loss.windows(2).filter(|w| w[1] > w[0]).count();

    let (schema, rows, labels) = xor_data();
    let set = TrainSet::new(&schema, rows.iter().map(Vec::as_slice).collect(), labels.clone());
    let xor = train(
        &set,
        &FeatureMask::all(2),
        &TrainConfig {
            rounds: 50,
            max_depth: 2,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let correct = rows
        .iter()
        .zip(&labels)
        .filter(|(r, &l)| (xor.predict(r).unwrap() >= 0.5) == l)
        .count();
    let xor_acc = correct as f64 / rows.len() as f64;

    let model = &outcome.model;
    let back = BoostedModel::from_json(&model.to_json()).unwrap();
    let mut gen = seeded(8);
    let mut mismatches = 0;
    for _ in 0..ROUNDTRIP_ROWS {
        let row: Vec<Option<f64>> = (0..model.n_features())
            .map(|_| gen.random_bool(0.8).then(|| gen.random_range(-3.0..3.0)))
            .collect();
        if model.predict(&row).unwrap().to_bits() != back.predict(&row).unwrap().to_bits() {
            mismatches += 1;
        }
    }
    (
        increases == 0 && xor_acc == 1.0 && mismatches == 0,
        format!(
            "log-loss {:.4} -> {:.4} over {} rounds with {increases} increases, XOR accuracy {xor_acc}, {mismatches}/{ROUNDTRIP_ROWS} round-trip mismatches",
            outcome.log_loss[0],
            outcome.log_loss.last().unwrap(),
            outcome.log_loss.len() - 1
        ),
    )
}

fn guarded<T>(f: impl FnOnce() -> T) -> Result<T, String> {
    catch_unwind(AssertUnwindSafe(f)).map_err(|e| {
        e.downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".to_string())
    })
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |id, name, r: Result<Outcome, String>| {
        let outcome = r.unwrap_or_else(|e| (false, format!("error: {e}")));
        println!("{} [{id}] {name}: {}", if outcome.0 { "PASS" } else { "FAIL" }, outcome.1);
        results.push((id, name, outcome));
    };
    record(1, "metric oracle equivalence", guarded(c1_metric_oracles));
    record(2, "planted-feature recovery (non-inferior)", guarded(c2_planted_recovery));
    match guarded(c3_to_c5_experiment) {
        Ok([c3, c4, c5]) => {
            record(3, "model comparison trends", Ok(c3));
            record(4, "flip-flop reduction", Ok(c4));
            record(5, "strict-mode soundness", Ok(c5));
        }
        Err(e) => {
            record(3, "model comparison trends", Err(e.clone()));
            record(4, "flip-flop reduction", Err(e.clone()));
            record(5, "strict-mode soundness", Err(e));
        }
    }
    record(6, "determinism of gen, prune, eval", guarded(c6_determinism));
    record(7, "partition quality", guarded(c7_partition_quality));
    record(8, "model sanity", guarded(c8_model_sanity));

    let failed: Vec<usize> = results.iter().filter(|r| !r.2 .0).map(|r| r.0).collect();
    println!("acceptance: {}/{} passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
