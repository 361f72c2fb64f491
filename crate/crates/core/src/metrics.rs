//! Score statistics: coefficient of variation, average precision, nearest-rank
//! percentiles and entity-level (cluster) bootstrap intervals.
//!
//! Bootstrap resamples are represented as per-entity multiplicities rather
//! than materialized row copies. A statistic receives a slice `counts` with
//! one entry per entity (in ascending entity-id order) and weights that
//! entity's rows by `counts[e]`.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Guard added to `|mean|` when the series can be centred on zero.
pub const CV_EPSILON: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CvMode {
    /// sigma / mu, for strictly positive series such as probabilities.
    Mean,
    /// sigma / (|mu| + 1e-12), for raw feature values.
    AbsMeanEps,
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population (1/n) standard deviation.
pub fn population_std(values: &[f64]) -> f64 {
    let mu = mean(values);
    (values.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / values.len() as f64).sqrt()
}

pub fn cv(values: &[f64], mode: CvMode) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::Undefined(format!(
            "coefficient of variation needs at least 2 values, got {}",
            values.len()
        )));
    }
    let mu = mean(values);
    let sigma = population_std(values);
    match mode {
        CvMode::Mean => {
            if mu.is_nan() || mu <= 0.0 {
                return Err(Error::Undefined(format!(
                    "coefficient of variation with non-positive mean {mu}"
                )));
            }
            Ok(sigma / mu)
        }
        CvMode::AbsMeanEps => Ok(sigma / (mu.abs() + CV_EPSILON)),
    }
}

/// Average precision with tied scores grouped into one block.
///
/// Rows are visited in descending score order; each maximal run of equal
/// scores contributes `(recall gained) * (precision at the end of the run)`.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidData(format!(
            "pr_auc: {} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let order = descending_order(scores);
    weighted_average_precision(&order, scores, labels, |_| 1)
        .ok_or_else(|| Error::Undefined("pr_auc: no positive labels".to_string()))
}

/// Row indices sorted by descending score.
pub(crate) fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Average precision where row `i` counts `weight(i)` times. Integer weights
/// make this identical to running the unweighted formula on duplicated rows.
/// Returns `None` when the weighted positive count is zero.
pub(crate) fn weighted_average_precision<W>(
    order: &[usize],
    scores: &[f64],
    labels: &[bool],
    weight: W,
) -> Option<f64>
where
    W: Fn(usize) -> u64,
{
    let total_pos: u64 = order.iter().filter(|&&i| labels[i]).map(|&i| weight(i)).sum();
    if total_pos == 0 {
        return None;
    }
    let total_pos = total_pos as f64;
    let (mut tp, mut seen, mut tp_prev) = (0u64, 0u64, 0u64);
    let mut ap = 0.0;
    let mut k = 0;
    while k < order.len() {
        let block_score = scores[order[k]];
        while k < order.len() && scores[order[k]] == block_score {
            let i = order[k];
            let w = weight(i);
            seen += w;
            if labels[i] {
                tp += w;
            }
            k += 1;
        }
        if tp > tp_prev {
            ap += (tp - tp_prev) as f64 / total_pos * (tp as f64 / seen as f64);
            tp_prev = tp;
        }
    }
    Some(ap)
}

/// Nearest-rank percentile: the element at 1-based rank `ceil(p/100 * n)` of
/// the ascending sort.
pub fn percentile_nearest_rank(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Undefined("percentile of an empty list".to_string()));
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::InvalidConfig(format!("percentile {p} outside (0, 100]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[nearest_rank(sorted.len(), p) - 1])
}

fn nearest_rank(n: usize, p: f64) -> usize {
    // p * n / 100 keeps integral ranks exact (97.5 * 1000 / 100 == 975); the
    // slack absorbs representation error in p itself (e.g. 50 * (1 - 0.95)).
    let rank = (p * n as f64 / 100.0 - 1e-9).ceil();
    (rank.max(1.0) as usize).min(n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
    pub resamples: usize,
    pub seed: u64,
}

impl ConfidenceInterval {
    pub fn half_width(&self) -> f64 {
        (self.hi - self.lo) / 2.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub level: f64,
    pub seed: u64,
}

impl BootstrapConfig {
    pub const MIN_RESAMPLES: usize = 100;

    pub fn new(resamples: usize, seed: u64) -> Self {
        Self {
            resamples,
            level: 0.95,
            seed,
        }
    }
}

/// Entity-level percentile bootstrap.
///
/// Resample `r` draws `n_entities` entities with replacement from a generator
/// seeded with `mix(seed, r)`. A resample on which the statistic is undefined
/// is redrawn from the same stream; more than `10 * B` total draws is an error.
pub fn bootstrap_ci<F>(n_entities: usize, config: &BootstrapConfig, statistic: F) -> Result<ConfidenceInterval>
where
    F: Fn(&[u32]) -> Option<f64>,
{
    let b = config.resamples;
    if n_entities < 2 {
        return Err(Error::InvalidData(format!(
            "bootstrap needs at least 2 entities, got {n_entities}"
        )));
    }
    if b < BootstrapConfig::MIN_RESAMPLES {
        return Err(Error::InvalidConfig(format!(
            "bootstrap needs at least {} resamples, got {b}",
            BootstrapConfig::MIN_RESAMPLES
        )));
    }
    if !(config.level > 0.0 && config.level < 1.0) {
        return Err(Error::InvalidConfig(format!("confidence level {} outside (0, 1)", config.level)));
    }

    let point = statistic(&vec![1; n_entities])
        .ok_or_else(|| Error::Undefined("statistic undefined on the full sample".to_string()))?;

    let max_draws = 10 * b;
    let mut draws = 0usize;
    let mut counts = vec![0u32; n_entities];
    let mut values = Vec::with_capacity(b);
    for r in 0..b {
        let mut gen = rng::seeded(rng::mix(config.seed, r as u64));
        loop {
            draws += 1;
            if draws > max_draws {
                return Err(Error::Undefined(format!(
                    "statistic undefined on too many resamples ({max_draws} draws)"
                )));
            }
            counts.iter_mut().for_each(|c| *c = 0);
            for _ in 0..n_entities {
                counts[gen.random_range(0..n_entities)] += 1;
            }
            if let Some(v) = statistic(&counts) {
                values.push(v);
                break;
            }
        }
    }

    let tail = 50.0 * (1.0 - config.level);
    let lo = percentile_nearest_rank(&values, tail.max(f64::MIN_POSITIVE))?;
    let hi = percentile_nearest_rank(&values, 100.0 - tail)?;
    Ok(ConfidenceInterval {
        point,
        lo,
        hi,
        level: config.level,
        resamples: b,
        seed: config.seed,
    })
}

/// Maps rows to dense entity indices, numbered in ascending entity-id order.
#[derive(Clone, Debug)]
pub struct EntityIndex {
    row_entity: Vec<usize>,
    n_entities: usize,
}

impl EntityIndex {
    pub fn new<S: AsRef<str>>(entity_ids: &[S]) -> Self {
        let mut ids: BTreeMap<&str, usize> = entity_ids.iter().map(|s| (s.as_ref(), 0)).collect();
        for (i, v) in ids.values_mut().enumerate() {
            *v = i;
        }
        let row_entity = entity_ids.iter().map(|s| ids[s.as_ref()]).collect();
        Self {
            row_entity,
            n_entities: ids.len(),
        }
    }

    pub fn n_entities(&self) -> usize {
        self.n_entities
    }

    pub fn n_rows(&self) -> usize {
        self.row_entity.len()
    }

    pub fn entity_of(&self, row: usize) -> usize {
        self.row_entity[row]
    }
}

/// Pooled-row PR-AUC with an entity bootstrap interval.
pub fn pr_auc_ci<S: AsRef<str>>(
    scores: &[f64],
    labels: &[bool],
    entity_ids: &[S],
    config: &BootstrapConfig,
) -> Result<ConfidenceInterval> {
    check_aligned(scores.len(), labels.len(), entity_ids.len())?;
    let index = EntityIndex::new(entity_ids);
    let order = descending_order(scores);
    bootstrap_ci(index.n_entities(), config, |counts| {
        weighted_average_precision(&order, scores, labels, |i| u64::from(counts[index.entity_of(i)]))
    })
}

/// Mean of per-entity values with an entity bootstrap interval.
pub fn mean_ci(values: &[f64], config: &BootstrapConfig) -> Result<ConfidenceInterval> {
    bootstrap_ci(values.len(), config, |counts| {
        let n: u64 = counts.iter().map(|&c| u64::from(c)).sum();
        let s: f64 = values.iter().zip(counts).map(|(v, &c)| v * f64::from(c)).sum();
        (n > 0).then(|| s / n as f64)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedDelta {
    pub pr_auc_a: f64,
    pub pr_auc_b: f64,
    /// `AP(B) - AP(A)` on the full sample.
    pub delta_point: f64,
    pub ci: ConfidenceInterval,
    /// `ci.lo > 0`.
    pub significant_improvement: bool,
}

/// Paired entity bootstrap of `AP(B) - AP(A)`: both models are scored on the
/// same resample each round.
pub fn paired_delta_significance<S: AsRef<str>>(
    scores_a: &[f64],
    scores_b: &[f64],
    labels: &[bool],
    entity_ids: &[S],
    config: &BootstrapConfig,
) -> Result<PairedDelta> {
    check_aligned(scores_a.len(), labels.len(), entity_ids.len())?;
    if scores_b.len() != scores_a.len() {
        return Err(Error::InvalidData(format!(
            "paired scores differ in length: {} vs {}",
            scores_a.len(),
            scores_b.len()
        )));
    }
    let index = EntityIndex::new(entity_ids);
    let order_a = descending_order(scores_a);
    let order_b = descending_order(scores_b);
    let ci = bootstrap_ci(index.n_entities(), config, |counts| {
        let w = |i: usize| u64::from(counts[index.entity_of(i)]);
        let a = weighted_average_precision(&order_a, scores_a, labels, w)?;
        let b = weighted_average_precision(&order_b, scores_b, labels, w)?;
        Some(b - a)
    })?;
    let pr_auc_a = weighted_average_precision(&order_a, scores_a, labels, |_| 1).unwrap_or(0.0);
    let pr_auc_b = weighted_average_precision(&order_b, scores_b, labels, |_| 1).unwrap_or(0.0);
    Ok(PairedDelta {
        pr_auc_a,
        pr_auc_b,
        delta_point: ci.point,
        significant_improvement: ci.lo > 0.0,
        ci,
    })
}

fn check_aligned(scores: usize, labels: usize, entities: usize) -> Result<()> {
    if scores != labels || scores != entities {
        return Err(Error::InvalidData(format!(
            "misaligned inputs: {scores} scores, {labels} labels, {entities} entity ids"
        )));
    }
    Ok(())
}
