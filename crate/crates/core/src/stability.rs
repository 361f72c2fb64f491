//! Temporal stability analysis: which entities have volatile scores, and which
//! features vary most on those entities.
//!
//! "Samples" here are entities: a CV across snapshots only exists per entity.
//! Entities observed in a single snapshot are skipped by every CV statistic.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::SnapshotDataset;
use crate::error::{Error, Result};
use crate::metrics::{cv, percentile_nearest_rank, CvMode};
use crate::model::{BoostedModel, FeatureMask};

pub const DEFAULT_PERCENTILE: f64 = 75.0;

/// Scores per entity, in snapshot order. Includes single-snapshot entities.
pub type EntityScores = BTreeMap<String, Vec<f64>>;

pub fn score_entity_series<F>(model: &BoostedModel, dataset: &SnapshotDataset, mut select: F) -> Result<EntityScores>
where
    F: FnMut(&str) -> bool,
{
    model.check_schema(dataset.schema())?;
    let mut out = BTreeMap::new();
    for (entity, rows) in dataset.entity_groups() {
        if !select(entity) {
            continue;
        }
        let scores = rows
            .iter()
            .map(|&i| model.predict(&dataset.samples()[i].features))
            .collect::<Result<Vec<_>>>()?;
        out.insert(entity.to_string(), scores);
    }
    Ok(out)
}

/// Same shape as [`score_entity_series`] but from precomputed row scores.
pub fn group_scores(dataset: &SnapshotDataset, row_scores: &[f64]) -> EntityScores {
    dataset
        .entity_groups()
        .map(|(e, rows)| (e.to_string(), rows.iter().map(|&i| row_scores[i]).collect()))
        .collect()
}

/// Score CV of every entity with at least two snapshots.
pub fn entity_cvs(scores: &EntityScores) -> Result<BTreeMap<String, f64>> {
    scores
        .iter()
        .filter(|(_, s)| s.len() >= 2)
        .map(|(e, s)| cv(s, CvMode::Mean).map(|c| (e.clone(), c)))
        .collect()
}

/// Mean per-entity score CV; `None` if no entity has two snapshots.
pub fn mean_entity_cv(scores: &EntityScores) -> Result<Option<f64>> {
    let cvs = entity_cvs(scores)?;
    if cvs.is_empty() {
        return Ok(None);
    }
    Ok(Some(cvs.values().sum::<f64>() / cvs.len() as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureCv {
    pub feature: String,
    pub index: usize,
    /// Median per-entity CV over contributing high-CV entities.
    pub aggregated_cv: f64,
    /// High-CV entities with at least two present values for this feature.
    pub contributors: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub percentile: f64,
    pub per_entity_cv: BTreeMap<String, f64>,
    pub cv_threshold: f64,
    pub high_cv_entities: BTreeSet<String>,
    /// Descending by aggregated CV; empty until [`per_feature_cv`] has run.
    pub feature_cv_ranking: Vec<FeatureCv>,
}

impl StabilityReport {
    pub fn mean_entity_cv(&self) -> f64 {
        self.per_entity_cv.values().sum::<f64>() / self.per_entity_cv.len() as f64
    }
}

/// Entities whose score CV reaches the `percentile`-th nearest-rank value.
pub fn high_cv_entities(scores: &EntityScores, percentile: f64) -> Result<StabilityReport> {
    let per_entity_cv = entity_cvs(scores)?;
    if per_entity_cv.is_empty() {
        return Err(Error::InvalidData("no entity has two or more snapshots".to_string()));
    }
    let values: Vec<f64> = per_entity_cv.values().copied().collect();
    let cv_threshold = percentile_nearest_rank(&values, percentile)?;
    let high_cv_entities = per_entity_cv
        .iter()
        .filter(|(_, &c)| c >= cv_threshold)
        .map(|(e, _)| e.clone())
        .collect();
    Ok(StabilityReport {
        percentile,
        per_entity_cv,
        cv_threshold,
        high_cv_entities,
        feature_cv_ranking: Vec::new(),
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Rank active features by the median, over `entities`, of each entity's
/// feature CV across its snapshots (present values only).
pub fn per_feature_cv(
    dataset: &SnapshotDataset,
    entities: &BTreeSet<String>,
    mask: &FeatureMask,
) -> Result<Vec<FeatureCv>> {
    if entities.is_empty() {
        return Err(Error::InvalidData("per-feature CV needs at least one entity".to_string()));
    }
    if mask.len() != dataset.schema().len() {
        return Err(Error::SchemaMismatch {
            expected: dataset.schema().len(),
            got: mask.len(),
        });
    }
    let groups: Vec<&[usize]> = entities
        .iter()
        .map(|e| {
            dataset
                .entity_rows(e)
                .ok_or_else(|| Error::UnknownEntity(e.clone()))
        })
        .collect::<Result<_>>()?;

    let mut ranking = Vec::with_capacity(mask.active_count());
    let mut series = Vec::new();
    for j in mask.active_indices() {
        let mut per_entity = Vec::with_capacity(groups.len());
        for rows in &groups {
            series.clear();
            series.extend(rows.iter().filter_map(|&i| dataset.samples()[i].features[j]));
            if series.len() >= 2 {
                per_entity.push(cv(&series, CvMode::AbsMeanEps)?);
            }
        }
        let contributors = per_entity.len();
        let aggregated_cv = if contributors == 0 { 0.0 } else { median(&mut per_entity) };
        ranking.push(FeatureCv {
            feature: dataset.schema()[j].clone(),
            index: j,
            aggregated_cv,
            contributors,
        });
    }
    // Non-contributing features rank last; ties keep schema order.
    ranking.sort_by(|a, b| {
        (b.contributors > 0)
            .cmp(&(a.contributors > 0))
            .then(b.aggregated_cv.total_cmp(&a.aggregated_cv))
            .then(a.index.cmp(&b.index))
    });
    Ok(ranking)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CandidateCount {
    /// Half the active features, rounded up.
    #[default]
    Auto,
    Top(usize),
}

impl fmt::Display for CandidateCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CandidateCount::Auto => f.write_str("auto"),
            CandidateCount::Top(k) => write!(f, "{k}"),
        }
    }
}

impl Serialize for CandidateCount {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            CandidateCount::Auto => s.serialize_str("auto"),
            CandidateCount::Top(k) => s.serialize_u64(*k as u64),
        }
    }
}

impl<'de> Deserialize<'de> for CandidateCount {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(usize),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(k) => Ok(CandidateCount::Top(k)),
            Raw::Word(w) if w.eq_ignore_ascii_case("auto") => Ok(CandidateCount::Auto),
            Raw::Word(w) => Err(serde::de::Error::custom(format!(
                "candidate count must be a positive integer or \"auto\", got {w:?}"
            ))),
        }
    }
}

/// The top of the ranking. `Auto` takes `ceil(d / 2)` of the `d` ranked features.
pub fn prune_candidates(ranking: &[FeatureCv], k: CandidateCount) -> Result<Vec<FeatureCv>> {
    let d = ranking.len();
    let k = match k {
        CandidateCount::Auto => d.div_ceil(2),
        CandidateCount::Top(0) => {
            return Err(Error::InvalidConfig("candidate count must be positive".to_string()))
        }
        CandidateCount::Top(k) if k > d => {
            return Err(Error::InvalidConfig(format!(
                "candidate count {k} exceeds the {d} ranked features"
            )))
        }
        CandidateCount::Top(k) => k,
    };
    Ok(ranking[..k].to_vec())
}

/// Score `dataset` with `model`, find the high-CV entities and rank the
/// model's active features on them.
pub fn analyze(model: &BoostedModel, dataset: &SnapshotDataset, percentile: f64) -> Result<StabilityReport> {
    let scores = score_entity_series(model, dataset, |_| true)?;
    let mut report = high_cv_entities(&scores, percentile)?;
    report.feature_cv_ranking = per_feature_cv(dataset, &report.high_cv_entities, &model.mask)?;
    Ok(report)
}
