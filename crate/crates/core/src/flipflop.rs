//! Downstream churn: an entity flip-flops when a fixed score threshold admits
//! it in some snapshots and rejects it in others.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{fnv1a64, SnapshotDataset};
use crate::error::{Error, Result};
use crate::metrics::percentile_nearest_rank;
use crate::model::BoostedModel;
use crate::stability::{score_entity_series, EntityScores};

pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionRate {
    /// Entities with two or more snapshots.
    pub entities: usize,
    pub flip_flops: usize,
    pub rate: f64,
}

impl RegionRate {
    fn new(entities: usize, flip_flops: usize) -> Self {
        let rate = if entities == 0 {
            0.0
        } else {
            flip_flops as f64 / entities as f64
        };
        Self {
            entities,
            flip_flops,
            rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlipFlopReport {
    pub tau: f64,
    /// Hash of the evaluated `(entity, snapshot)` keys; reports are comparable
    /// only when this matches.
    pub dataset_fingerprint: String,
    pub per_region: BTreeMap<String, RegionRate>,
    pub global: RegionRate,
}

/// Admission is not constant across the series.
pub fn is_flip_flop(scores: &[f64], tau: f64) -> bool {
    let mut admitted = scores.iter().map(|&s| s >= tau);
    match admitted.next() {
        Some(first) => admitted.any(|a| a != first),
        None => false,
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidConfig(format!("threshold {tau} outside (0, 1)")));
    }
    Ok(())
}

/// Flip-flop rates from precomputed entity score series.
///
/// An entity's region is taken from its latest snapshot.
pub fn flip_flop_from_scores(dataset: &SnapshotDataset, scores: &EntityScores, tau: f64) -> Result<FlipFlopReport> {
    check_tau(tau)?;
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut key = Vec::new();
    for (entity, series) in scores {
        let rows = dataset
            .entity_rows(entity)
            .ok_or_else(|| Error::UnknownEntity(entity.clone()))?;
        for &i in rows {
            key.extend_from_slice(entity.as_bytes());
            key.push(0);
            key.extend_from_slice(dataset.samples()[i].snapshot_id.to_string().as_bytes());
            key.push(b'\n');
        }
        if series.len() < 2 {
            continue;
        }
        let region = &dataset.samples()[*rows.last().expect("non-empty")].region;
        let slot = counts.entry(region.clone()).or_insert((0, 0));
        slot.0 += 1;
        if is_flip_flop(series, tau) {
            slot.1 += 1;
        }
    }
    let (n, f) = counts.values().fold((0, 0), |(n, f), (a, b)| (n + a, f + b));
    if n == 0 {
        return Err(Error::InvalidData("no entity has two or more snapshots".to_string()));
    }
    Ok(FlipFlopReport {
        tau,
        dataset_fingerprint: format!("{:016x}", fnv1a64(&key)),
        per_region: counts.into_iter().map(|(r, (n, f))| (r, RegionRate::new(n, f))).collect(),
        global: RegionRate::new(n, f),
    })
}

pub fn flip_flop_rate<F>(model: &BoostedModel, dataset: &SnapshotDataset, select: F, tau: f64) -> Result<FlipFlopReport>
where
    F: FnMut(&str) -> bool,
{
    check_tau(tau)?;
    let scores = score_entity_series(model, dataset, select)?;
    flip_flop_from_scores(dataset, &scores, tau)
}

/// Threshold at the `p`-th nearest-rank percentile of all row scores.
pub fn percentile_threshold(scores: &EntityScores, p: f64) -> Result<f64> {
    let all: Vec<f64> = scores.values().flatten().copied().collect();
    percentile_nearest_rank(&all, p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelativeReduction {
    /// `(base - improved) / base`; `None` where the base rate is zero.
    pub per_region: BTreeMap<String, Option<f64>>,
    pub global: Option<f64>,
}

impl RelativeReduction {
    pub fn regions_improved(&self) -> usize {
        self.per_region.values().filter(|r| matches!(r, Some(x) if *x > 0.0)).count()
    }
}

fn reduction(base: f64, improved: f64) -> Option<f64> {
    (base > 0.0).then(|| (base - improved) / base)
}

pub fn relative_reduction(base: &FlipFlopReport, improved: &FlipFlopReport) -> Result<RelativeReduction> {
    if base.tau != improved.tau {
        return Err(Error::InvalidData(format!(
            "reports use different thresholds: {} vs {}",
            base.tau, improved.tau
        )));
    }
    if base.dataset_fingerprint != improved.dataset_fingerprint {
        return Err(Error::InvalidData("reports were computed on different datasets".to_string()));
    }
    let per_region = base
        .per_region
        .iter()
        .map(|(region, b)| {
            let imp = improved.per_region.get(region).map(|r| r.rate).unwrap_or(0.0);
            (region.clone(), reduction(b.rate, imp))
        })
        .collect();
    Ok(RelativeReduction {
        per_region,
        global: reduction(base.global.rate, improved.global.rate),
    })
}

/// A base/improved pair with their relative reduction, as written by the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlipFlopComparison {
    pub base: FlipFlopReport,
    pub improved: FlipFlopReport,
    pub relative_reduction: RelativeReduction,
}

impl FlipFlopComparison {
    pub fn new(base: FlipFlopReport, improved: FlipFlopReport) -> Result<Self> {
        let relative_reduction = relative_reduction(&base, &improved)?;
        Ok(Self {
            base,
            improved,
            relative_reduction,
        })
    }
}
