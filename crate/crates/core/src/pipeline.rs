//! End-to-end procedure: train on all snapshots, find volatile entities on the
//! validation partition, then walk the most volatile features greedily and
//! drop each one whose removal passes the significance gate.
//!
//! The greedy pass is single and ordered by the initial ranking. On
//! acceptance the pruned model becomes the new comparison baseline, so the
//! accepted deltas chain into the overall lift.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{
    feature_group, latest_snapshot_view, partition_entities, FeatureGroup, Fractions, Partition,
    PartitionAssignment, SnapshotDataset,
};
use crate::error::{Error, Result};
use crate::flipflop::{flip_flop_from_scores, FlipFlopComparison, DEFAULT_TAU};
use crate::metrics::{mean_ci, paired_delta_significance, pr_auc, pr_auc_ci, BootstrapConfig, ConfidenceInterval};
use crate::model::{train, BoostedModel, FeatureMask, TrainConfig, TrainSet};
use crate::stability::{
    analyze, entity_cvs, group_scores, mean_entity_cv, prune_candidates, CandidateCount, StabilityReport,
    DEFAULT_PERCENTILE,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMode {
    /// Accept a removal only if the PR-AUC delta CI lies above zero.
    #[default]
    Strict,
    /// Accept if the delta CI lower bound is above `-epsilon` and the mean
    /// validation score CV strictly drops.
    #[serde(alias = "noninferior")]
    NonInferior,
}

impl fmt::Display for PruneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PruneMode::Strict => "strict",
            PruneMode::NonInferior => "non_inferior",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FortressConfig {
    pub train: TrainConfig,
    pub fractions: Fractions,
    pub salt: String,
    pub percentile: f64,
    pub candidates: CandidateCount,
    pub mode: PruneMode,
    pub epsilon: f64,
    pub bootstrap_resamples: usize,
    pub seed: u64,
    /// Admission threshold for the flip-flop comparison in the experiment table.
    pub flipflop_tau: f64,
}

impl Default for FortressConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            fractions: Fractions::default(),
            salt: "fortress".to_string(),
            percentile: DEFAULT_PERCENTILE,
            candidates: CandidateCount::Auto,
            mode: PruneMode::Strict,
            epsilon: 0.002,
            bootstrap_resamples: 1000,
            seed: 42,
            flipflop_tau: DEFAULT_TAU,
        }
    }
}

impl FortressConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.fractions.validate()?;
        if !(self.percentile > 0.0 && self.percentile <= 100.0) {
            return Err(Error::InvalidConfig(format!("percentile {} outside (0, 100]", self.percentile)));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!("epsilon {} must be non-negative", self.epsilon)));
        }
        if self.bootstrap_resamples < BootstrapConfig::MIN_RESAMPLES {
            return Err(Error::InvalidConfig(format!(
                "bootstrap_resamples must be at least {}",
                BootstrapConfig::MIN_RESAMPLES
            )));
        }
        if !(self.flipflop_tau > 0.0 && self.flipflop_tau < 1.0) {
            return Err(Error::InvalidConfig(format!("flipflop_tau {} outside (0, 1)", self.flipflop_tau)));
        }
        Ok(())
    }

    pub fn bootstrap(&self) -> BootstrapConfig {
        BootstrapConfig::new(self.bootstrap_resamples, self.seed)
    }
}

/// Entity-disjoint train/validation/test views of one dataset.
#[derive(Clone, Debug)]
pub struct Splits {
    pub assignment: PartitionAssignment,
    pub train: SnapshotDataset,
    pub val: SnapshotDataset,
    pub test: SnapshotDataset,
}

pub fn split_dataset(dataset: &SnapshotDataset, fractions: Fractions, salt: &str) -> Result<Splits> {
    let assignment = partition_entities(dataset, fractions, salt)?;
    Ok(Splits {
        train: assignment.select(dataset, Partition::Train),
        val: assignment.select(dataset, Partition::Val),
        test: assignment.select(dataset, Partition::Test),
        assignment,
    })
}

fn require_both_classes(ds: &SnapshotDataset, part: Partition) -> Result<()> {
    let pos = ds.samples().iter().filter(|s| s.label.is_positive()).count();
    if pos == 0 || pos == ds.len() {
        return Err(Error::InvalidData(format!(
            "degenerate {part} partition: {} rows, {pos} positive",
            ds.len()
        )));
    }
    Ok(())
}

fn fit(dataset: &SnapshotDataset, mask: &FeatureMask, config: &TrainConfig) -> Result<BoostedModel> {
    train(&TrainSet::from_dataset(dataset), mask, config)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneIteration {
    pub step: usize,
    pub candidate_feature: String,
    /// Aggregated feature CV that put this candidate in the list.
    pub candidate_cv: f64,
    pub baseline_pr_auc: f64,
    pub candidate_pr_auc: f64,
    /// CI of `AP(without candidate) - AP(baseline)` on validation.
    pub delta_pr_auc: ConfidenceInterval,
    pub candidate_validation_cv: f64,
    pub accepted: bool,
    pub feature_set_after: FeatureMask,
    /// Mean validation score CV of the baseline after this decision.
    pub validation_cv_after: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneTrace {
    pub mode: PruneMode,
    pub epsilon: f64,
    pub schema: Vec<String>,
    pub candidates: Vec<String>,
    pub initial_mask: FeatureMask,
    pub initial_validation_pr_auc: f64,
    pub initial_validation_cv: f64,
    pub iterations: Vec<PruneIteration>,
    pub final_mask: FeatureMask,
    pub pruned_features: Vec<String>,
    pub final_validation_pr_auc: f64,
    pub final_validation_cv: f64,
    /// Final minus initial validation PR-AUC (point estimates).
    pub cumulative_delta_pr_auc: f64,
}

impl PruneTrace {
    pub fn accepted(&self) -> impl Iterator<Item = &PruneIteration> {
        self.iterations.iter().filter(|i| i.accepted)
    }
}

#[derive(Clone, Debug)]
pub struct FortressOutcome {
    pub model: BoostedModel,
    pub baseline: BoostedModel,
    pub trace: PruneTrace,
    pub stability: StabilityReport,
}

/// Validation rows prepared once for repeated scoring.
struct Validation<'a> {
    dataset: &'a SnapshotDataset,
    labels: Vec<bool>,
    entity_ids: Vec<&'a str>,
}

impl<'a> Validation<'a> {
    fn new(dataset: &'a SnapshotDataset) -> Self {
        Self {
            dataset,
            labels: dataset.binary_labels(),
            entity_ids: dataset.samples().iter().map(|s| s.entity_id.as_str()).collect(),
        }
    }

    fn score(&self, model: &BoostedModel) -> Result<(Vec<f64>, f64)> {
        let scores = model.predict_dataset(self.dataset)?;
        let cv = mean_entity_cv(&group_scores(self.dataset, &scores))?
            .ok_or_else(|| Error::InvalidData("validation has no multi-snapshot entity".to_string()))?;
        Ok((scores, cv))
    }
}

pub fn fortress_run(dataset: &SnapshotDataset, config: &FortressConfig) -> Result<FortressOutcome> {
    config.validate()?;
    let splits = split_dataset(dataset, config.fractions, &config.salt)?;
    fortress_on_splits(&splits.train, &splits.val, config, None)
}

/// The greedy procedure on explicit partitions. `baseline` may supply an
/// already-trained all-feature model on `train`.
pub fn fortress_on_splits(
    train: &SnapshotDataset,
    val: &SnapshotDataset,
    config: &FortressConfig,
    baseline: Option<BoostedModel>,
) -> Result<FortressOutcome> {
    config.validate()?;
    require_both_classes(train, Partition::Train)?;
    require_both_classes(val, Partition::Val)?;

    let initial_mask = FeatureMask::all(train.schema().len());
    let baseline = match baseline {
        Some(m) => m,
        None => fit(train, &initial_mask, &config.train)?,
    };

    let stability = analyze(&baseline, val, config.percentile)?;
    let candidates = prune_candidates(&stability.feature_cv_ranking, config.candidates)?;
    if candidates.is_empty() {
        return Err(Error::InvalidData("empty candidate list".to_string()));
    }

    let validation = Validation::new(val);
    let bootstrap = config.bootstrap();
    let (mut current_scores, mut current_cv) = validation.score(&baseline)?;
    let mut current_ap = pr_auc(&current_scores, &validation.labels)?;
    let mut current = baseline.clone();
    let initial_validation_pr_auc = current_ap;
    let initial_validation_cv = current_cv;

    let mut iterations = Vec::with_capacity(candidates.len());
    for (step, cand) in candidates.iter().enumerate() {
        if current.mask.active_count() <= 1 {
            // Removing the last feature leaves nothing to train on.
            break;
        }
        let mask = current.mask.without(cand.index);
        let model = fit(train, &mask, &config.train)?;
        let (scores, cv) = validation.score(&model)?;
        let delta = paired_delta_significance(
            &current_scores,
            &scores,
            &validation.labels,
            &validation.entity_ids,
            &bootstrap,
        )?;
        let accepted = match config.mode {
            PruneMode::Strict => delta.ci.lo > 0.0,
            PruneMode::NonInferior => delta.ci.lo > -config.epsilon && cv < current_cv,
        };
        let baseline_pr_auc = current_ap;
        if accepted {
            current = model;
            current_scores = scores;
            current_cv = cv;
            current_ap = delta.pr_auc_b;
        }
        iterations.push(PruneIteration {
            step,
            candidate_feature: cand.feature.clone(),
            candidate_cv: cand.aggregated_cv,
            baseline_pr_auc,
            candidate_pr_auc: delta.pr_auc_b,
            delta_pr_auc: delta.ci,
            candidate_validation_cv: cv,
            accepted,
            feature_set_after: current.mask.clone(),
            validation_cv_after: current_cv,
        });
    }

    let schema = train.schema().to_vec();
    let pruned_features = iterations
        .iter()
        .filter(|i| i.accepted)
        .map(|i| i.candidate_feature.clone())
        .collect();
    let trace = PruneTrace {
        mode: config.mode,
        epsilon: config.epsilon,
        candidates: candidates.iter().map(|c| c.feature.clone()).collect(),
        initial_mask,
        initial_validation_pr_auc,
        initial_validation_cv,
        iterations,
        final_mask: current.mask.clone(),
        pruned_features,
        final_validation_pr_auc: current_ap,
        final_validation_cv: current_cv,
        cumulative_delta_pr_auc: current_ap - initial_validation_pr_auc,
        schema,
    };
    // The last accepted model was trained on `train` with the final mask, so it
    // is the retrained final model.
    Ok(FortressOutcome {
        model: current,
        baseline,
        trace,
        stability,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: usize,
    pub entities: usize,
    pub multi_snapshot_entities: usize,
    pub active_features: Vec<String>,
    /// Pooled-row PR-AUC with an entity bootstrap CI.
    pub pr_auc: ConfidenceInterval,
    /// Mean per-entity score CV with an entity bootstrap CI.
    pub mean_entity_cv: ConfidenceInterval,
}

pub fn evaluate(model: &BoostedModel, dataset: &SnapshotDataset, bootstrap: &BootstrapConfig) -> Result<EvalReport> {
    let scores = model.predict_dataset(dataset)?;
    let labels = dataset.binary_labels();
    let ids: Vec<&str> = dataset.samples().iter().map(|s| s.entity_id.as_str()).collect();
    let pr_auc = pr_auc_ci(&scores, &labels, &ids, bootstrap)?;
    let cvs: Vec<f64> = entity_cvs(&group_scores(dataset, &scores))?.into_values().collect();
    let mean_entity_cv = mean_ci(&cvs, bootstrap)?;
    Ok(EvalReport {
        rows: dataset.len(),
        entities: dataset.n_entities(),
        multi_snapshot_entities: cvs.len(),
        active_features: model.active_features().iter().map(|s| s.to_string()).collect(),
        pr_auc,
        mean_entity_cv,
    })
}

pub const ROW_SR_ONLY: &str = "SR features only";
pub const ROW_ALL_SINGLE: &str = "All features (single snapshot)";
pub const ROW_ALL_MULTI: &str = "Multi-snapshot with all features";
pub const ROW_FORTRESS: &str = "Fortress";

#[derive(Clone, Debug)]
pub struct BaselineModels {
    pub sr_only: BoostedModel,
    pub all_single: BoostedModel,
    pub all_multi: BoostedModel,
}

/// The three comparison models: semantic-only and all-feature models trained
/// on each entity's latest snapshot, and an all-feature model on every snapshot.
pub fn baseline_models(train: &SnapshotDataset, config: &TrainConfig) -> Result<BaselineModels> {
    let schema = train.schema();
    if let Some(name) = schema.iter().find(|n| feature_group(n).is_none()) {
        return Err(Error::InvalidData(format!(
            "feature {name:?} has no group tag (expected f_sr_ or f_eng_ prefix)"
        )));
    }
    let sr_mask = FeatureMask::from_predicate(schema, |n| feature_group(n) == Some(FeatureGroup::Semantic));
    let all = FeatureMask::all(schema.len());
    let latest = latest_snapshot_view(train)?;

    let ((sr_only, all_single), all_multi) = rayon::join(
        || rayon::join(|| fit(&latest, &sr_mask, config), || fit(&latest, &all, config)),
        || fit(train, &all, config),
    );
    Ok(BaselineModels {
        sr_only: sr_only?,
        all_single: all_single?,
        all_multi: all_multi?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub name: String,
    pub training_snapshots: String,
    pub active_features: usize,
    pub pr_auc: ConfidenceInterval,
    pub mean_entity_cv: ConfidenceInterval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub test_rows: usize,
    pub test_entities: usize,
    pub mode: PruneMode,
    pub rows: Vec<ExperimentRow>,
    pub pruned_features: Vec<String>,
    /// Fortress minus multi-snapshot PR-AUC, absolute.
    pub fortress_pr_auc_lift: f64,
    /// Same lift relative to the multi-snapshot PR-AUC, in percent.
    pub fortress_pr_auc_lift_pct: f64,
    /// Relative change of mean entity CV versus multi-snapshot, in percent (negative = more stable).
    pub fortress_cv_change_pct: f64,
    /// Fortress against the all-feature single-snapshot model on test.
    pub flip_flop: FlipFlopComparison,
}

impl ExperimentResult {
    pub fn row(&self, name: &str) -> Option<&ExperimentRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

/// Every model behind an experiment table, for callers that need more than the summary.
#[derive(Clone, Debug)]
pub struct ExperimentModels {
    pub splits: Splits,
    pub baselines: BaselineModels,
    pub fortress: FortressOutcome,
}

pub fn experiment_models(dataset: &SnapshotDataset, config: &FortressConfig) -> Result<ExperimentModels> {
    config.validate()?;
    let splits = split_dataset(dataset, config.fractions, &config.salt)?;
    require_both_classes(&splits.train, Partition::Train)?;
    let baselines = baseline_models(&splits.train, &config.train)?;
    let fortress = fortress_on_splits(&splits.train, &splits.val, config, Some(baselines.all_multi.clone()))?;
    Ok(ExperimentModels {
        splits,
        baselines,
        fortress,
    })
}

pub fn experiment_table(dataset: &SnapshotDataset, config: &FortressConfig) -> Result<ExperimentResult> {
    let models = experiment_models(dataset, config)?;
    summarize_experiment(&models, config)
}

pub fn summarize_experiment(models: &ExperimentModels, config: &FortressConfig) -> Result<ExperimentResult> {
    let test = &models.splits.test;
    require_both_classes(test, Partition::Test)?;
    let bootstrap = config.bootstrap();
    let b = &models.baselines;
    let entries: [(&str, &str, &BoostedModel); 4] = [
        (ROW_SR_ONLY, "latest", &b.sr_only),
        (ROW_ALL_SINGLE, "latest", &b.all_single),
        (ROW_ALL_MULTI, "all", &b.all_multi),
        (ROW_FORTRESS, "all", &models.fortress.model),
    ];
    let mut rows = Vec::with_capacity(4);
    for (name, snaps, model) in entries {
        let report = evaluate(model, test, &bootstrap)?;
        rows.push(ExperimentRow {
            name: name.to_string(),
            training_snapshots: snaps.to_string(),
            active_features: model.mask.active_count(),
            pr_auc: report.pr_auc,
            mean_entity_cv: report.mean_entity_cv,
        });
    }

    let base_scores = group_scores(test, &b.all_single.predict_dataset(test)?);
    let fortress_scores = group_scores(test, &models.fortress.model.predict_dataset(test)?);
    let flip_flop = FlipFlopComparison::new(
        flip_flop_from_scores(test, &base_scores, config.flipflop_tau)?,
        flip_flop_from_scores(test, &fortress_scores, config.flipflop_tau)?,
    )?;

    let multi = &rows[2];
    let fortress = &rows[3];
    let lift = fortress.pr_auc.point - multi.pr_auc.point;
    Ok(ExperimentResult {
        test_rows: test.len(),
        test_entities: test.n_entities(),
        mode: config.mode,
        fortress_pr_auc_lift: lift,
        fortress_pr_auc_lift_pct: 100.0 * lift / multi.pr_auc.point,
        fortress_cv_change_pct: 100.0 * (fortress.mean_entity_cv.point - multi.mean_entity_cv.point)
            / multi.mean_entity_cv.point,
        pruned_features: models.fortress.trace.pruned_features.clone(),
        rows,
        flip_flop,
    })
}
