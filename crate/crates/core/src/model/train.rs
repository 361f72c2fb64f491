//! Exact greedy, level-wise tree growth with second-order (Newton) boosting.
//!
//! Each active feature keeps its present rows pre-sorted by value. Growing one
//! level scans every sorted list once, accumulating gradient statistics for
//! whichever open node each row currently sits in. Missing rows are never in
//! the sorted lists: their statistics are the node total minus the present
//! total, and both default directions are scored for every threshold.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use super::{BoostedModel, Direction, FeatureMask, TrainConfig, TreeNode, MODEL_VERSION};
use crate::data::SnapshotDataset;
use crate::error::{Error, Result};
use crate::rng;

/// Borrowed training rows.
#[derive(Clone, Debug)]
pub struct TrainSet<'a> {
    pub schema: &'a [String],
    pub rows: Vec<&'a [Option<f64>]>,
    pub labels: Vec<bool>,
}

impl<'a> TrainSet<'a> {
    pub fn new(schema: &'a [String], rows: Vec<&'a [Option<f64>]>, labels: Vec<bool>) -> Self {
        Self { schema, rows, labels }
    }

    pub fn from_dataset(dataset: &'a SnapshotDataset) -> Self {
        Self {
            schema: dataset.schema(),
            rows: dataset.rows(),
            labels: dataset.binary_labels(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: BoostedModel,
    /// Mean training log-loss: entry 0 is the base score, entry `t` follows round `t`.
    pub log_loss: Vec<f64>,
}

pub fn train(data: &TrainSet<'_>, mask: &FeatureMask, config: &TrainConfig) -> Result<BoostedModel> {
    train_with_history(data, mask, config).map(|o| o.model)
}

pub fn train_with_history(
    data: &TrainSet<'_>,
    mask: &FeatureMask,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let d = data.schema.len();
    if mask.len() != d {
        return Err(Error::SchemaMismatch {
            expected: d,
            got: mask.len(),
        });
    }
    if mask.active_count() == 0 {
        return Err(Error::EmptyMask);
    }
    if data.rows.len() != data.labels.len() {
        return Err(Error::InvalidData(format!(
            "{} rows but {} labels",
            data.rows.len(),
            data.labels.len()
        )));
    }
    if let Some(bad) = data.rows.iter().find(|r| r.len() != d) {
        return Err(Error::SchemaMismatch {
            expected: d,
            got: bad.len(),
        });
    }
    let n = data.rows.len();
    let n_pos = data.labels.iter().filter(|&&y| y).count();
    if n_pos == 0 || n_pos == n {
        return Err(Error::SingleClass);
    }

    let columns = Columns::build(data, mask);
    let targets: Vec<f64> = data.labels.iter().map(|&y| if y { 1.0 } else { 0.0 }).collect();
    let p = n_pos as f64 / n as f64;
    let base_score = (p / (1.0 - p)).ln();

    let mut margins = vec![base_score; n];
    let mut log_loss = Vec::with_capacity(config.rounds + 1);
    log_loss.push(mean_log_loss(&margins, &targets));
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    let mut trees = Vec::with_capacity(config.rounds);

    let active: Vec<usize> = mask.active_indices().collect();
    for round in 0..config.rounds {
        for i in 0..n {
            let prob = super::sigmoid(margins[i]);
            grad[i] = prob - targets[i];
            hess[i] = prob * (1.0 - prob);
        }

        let (in_sample, features) = sample_round(config, round, n, &active);
        let grower = Grower {
            columns: &columns,
            grad: &grad,
            hess: &hess,
            config,
        };
        let tree = grower.grow(in_sample, &features);
        for (m, row) in margins.iter_mut().zip(&data.rows) {
            *m += tree.evaluate(row);
        }
        log_loss.push(mean_log_loss(&margins, &targets));
        trees.push(tree);
    }

    Ok(TrainOutcome {
        model: BoostedModel {
            version: MODEL_VERSION,
            schema: data.schema.to_vec(),
            mask: mask.clone(),
            base_score,
            config: config.clone(),
            trees,
        },
        log_loss,
    })
}

/// Rows and features used by one round. Without sampling every row and active
/// feature participates and no random numbers are drawn.
fn sample_round(config: &TrainConfig, round: usize, n: usize, active: &[usize]) -> (Vec<bool>, Vec<usize>) {
    if config.subsample >= 1.0 && config.colsample_bytree >= 1.0 {
        return (vec![true; n], active.to_vec());
    }
    let mut gen = rng::seeded(rng::mix(config.seed, round as u64));
    let rows = if config.subsample < 1.0 {
        (0..n).map(|_| gen.random_bool(config.subsample)).collect()
    } else {
        vec![true; n]
    };
    let features = if config.colsample_bytree < 1.0 {
        let k = ((active.len() as f64 * config.colsample_bytree).ceil() as usize).max(1);
        let mut pool = active.to_vec();
        pool.shuffle(&mut gen);
        pool.truncate(k);
        pool.sort_unstable();
        pool
    } else {
        active.to_vec()
    };
    (rows, features)
}

fn mean_log_loss(margins: &[f64], targets: &[f64]) -> f64 {
    // log(1 + e^m) - y*m, computed without overflow.
    let total: f64 = margins
        .iter()
        .zip(targets)
        .map(|(&m, &y)| m.max(0.0) + (-m.abs()).exp().ln_1p() - y * m)
        .sum();
    total / margins.len() as f64
}

/// Column-major copy of the active features plus per-feature sort orders.
struct Columns {
    values: Vec<Vec<f64>>,
    sorted: Vec<Vec<u32>>,
}

impl Columns {
    fn build(data: &TrainSet<'_>, mask: &FeatureMask) -> Self {
        let d = data.schema.len();
        let mut values = vec![Vec::new(); d];
        let mut sorted = vec![Vec::new(); d];
        for j in mask.active_indices() {
            let col: Vec<f64> = data.rows.iter().map(|r| r[j].unwrap_or(f64::NAN)).collect();
            let mut order: Vec<u32> = (0..col.len() as u32).filter(|&i| !col[i as usize].is_nan()).collect();
            order.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
            values[j] = col;
            sorted[j] = order;
        }
        Self { values, sorted }
    }
}

const NO_NODE: u32 = u32::MAX;

#[derive(Clone, Copy, Debug)]
struct Stats {
    g: f64,
    h: f64,
    n: usize,
}

impl Stats {
    const ZERO: Stats = Stats { g: 0.0, h: 0.0, n: 0 };

    fn add(&mut self, g: f64, h: f64) {
        self.g += g;
        self.h += h;
        self.n += 1;
    }
}

#[derive(Clone, Copy, Debug)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
    default_direction: Direction,
}

enum Slot {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        default_direction: Direction,
        left: usize,
        right: usize,
    },
    Open,
}

struct OpenNode {
    slot: usize,
    stats: Stats,
}

struct Grower<'a> {
    columns: &'a Columns,
    grad: &'a [f64],
    hess: &'a [f64],
    config: &'a TrainConfig,
}

impl Grower<'_> {
    fn leaf_weight(&self, s: &Stats) -> f64 {
        -s.g / (s.h + self.config.l2_lambda) * self.config.learning_rate
    }

    fn score(&self, g: f64, h: f64) -> f64 {
        g * g / (h + self.config.l2_lambda)
    }

    fn grow(&self, in_sample: Vec<bool>, features: &[usize]) -> TreeNode {
        let n = self.grad.len();
        let mut node_of = vec![NO_NODE; n];
        let mut root = Stats::ZERO;
        for i in 0..n {
            if in_sample[i] {
                node_of[i] = 0;
                root.add(self.grad[i], self.hess[i]);
            }
        }

        let mut slots = vec![Slot::Open];
        let mut open = vec![OpenNode { slot: 0, stats: root }];

        for _depth in 0..self.config.max_depth {
            if open.is_empty() {
                break;
            }
            let per_feature: Vec<Vec<Option<Candidate>>> = features
                .par_iter()
                .map(|&j| self.best_splits_for_feature(j, &node_of, &open))
                .collect();
            // Reduce in feature order with a strict comparison: lowest feature
            // index, then lowest threshold, wins ties.
            let mut best: Vec<Option<Candidate>> = vec![None; open.len()];
            for cands in per_feature {
                for (k, c) in cands.into_iter().enumerate() {
                    if let Some(c) = c {
                        if best[k].is_none_or(|b| c.gain > b.gain) {
                            best[k] = Some(c);
                        }
                    }
                }
            }

            let mut next_open = Vec::new();
            // Maps an open node to its (left, right) position in `next_open`.
            let mut children: Vec<Option<(u32, u32)>> = vec![None; open.len()];
            for (k, node) in open.iter().enumerate() {
                match best[k] {
                    Some(c) => {
                        let left = slots.len();
                        slots.push(Slot::Open);
                        slots.push(Slot::Open);
                        slots[node.slot] = Slot::Split {
                            feature: c.feature,
                            threshold: c.threshold,
                            default_direction: c.default_direction,
                            left,
                            right: left + 1,
                        };
                        let base = next_open.len() as u32;
                        next_open.push(OpenNode { slot: left, stats: Stats::ZERO });
                        next_open.push(OpenNode { slot: left + 1, stats: Stats::ZERO });
                        children[k] = Some((base, base + 1));
                    }
                    None => slots[node.slot] = Slot::Leaf(self.leaf_weight(&node.stats)),
                }
            }

            for (i, slot) in node_of.iter_mut().enumerate() {
                let k = *slot;
                if k == NO_NODE {
                    continue;
                }
                match (children[k as usize], best[k as usize]) {
                    (Some((l, r)), Some(c)) => {
                        let v = self.columns.values[c.feature][i];
                        let go_left = if v.is_nan() {
                            c.default_direction == Direction::Left
                        } else {
                            v < c.threshold
                        };
                        let child = if go_left { l } else { r };
                        *slot = child;
                        next_open[child as usize].stats.add(self.grad[i], self.hess[i]);
                    }
                    _ => *slot = NO_NODE,
                }
            }
            open = next_open;
        }

        for node in &open {
            slots[node.slot] = Slot::Leaf(self.leaf_weight(&node.stats));
        }
        build_tree(&slots, 0)
    }

    /// Best split of feature `j` for every open node (`None` if no valid split).
    fn best_splits_for_feature(&self, j: usize, node_of: &[u32], open: &[OpenNode]) -> Vec<Option<Candidate>> {
        let values = &self.columns.values[j];
        let sorted = &self.columns.sorted[j];
        let k_open = open.len();

        let mut present = vec![Stats::ZERO; k_open];
        for &r in sorted {
            let k = node_of[r as usize];
            if k != NO_NODE {
                present[k as usize].add(self.grad[r as usize], self.hess[r as usize]);
            }
        }

        let mut acc = vec![Stats::ZERO; k_open];
        let mut last = vec![f64::NAN; k_open];
        let mut best: Vec<Option<Candidate>> = vec![None; k_open];
        for &r in sorted {
            let r = r as usize;
            let k = node_of[r];
            if k == NO_NODE {
                continue;
            }
            let k = k as usize;
            let v = values[r];
            let prev = last[k];
            if !prev.is_nan() && v > prev {
                if let Some(c) = self.evaluate(j, midpoint(prev, v), &open[k].stats, &present[k], &acc[k]) {
                    if best[k].is_none_or(|b| c.gain > b.gain) {
                        best[k] = Some(c);
                    }
                }
            }
            acc[k].add(self.grad[r], self.hess[r]);
            last[k] = v;
        }
        best
    }

    /// Score a threshold given node totals, present-row totals and the
    /// present rows strictly below the threshold.
    fn evaluate(&self, feature: usize, threshold: f64, node: &Stats, present: &Stats, left: &Stats) -> Option<Candidate> {
        let mch = self.config.min_child_hessian;
        let (g_right, h_right) = (present.g - left.g, present.h - left.h);
        let (g_miss, h_miss) = if present.n == node.n {
            (0.0, 0.0)
        } else {
            (node.g - present.g, node.h - present.h)
        };
        let parent = self.score(node.g, node.h);

        let gain_of = |gl: f64, hl: f64, gr: f64, hr: f64| -> Option<f64> {
            (hl >= mch && hr >= mch)
                .then(|| 0.5 * (self.score(gl, hl) + self.score(gr, hr) - parent) - self.config.gain_threshold)
        };
        let missing_right = gain_of(left.g, left.h, g_right + g_miss, h_right + h_miss);
        let missing_left = if present.n == node.n {
            None
        } else {
            gain_of(left.g + g_miss, left.h + h_miss, g_right, h_right)
        };

        let (gain, default_direction) = match (missing_right, missing_left) {
            (Some(r), Some(l)) if l > r => (l, Direction::Left),
            (Some(r), _) => (r, Direction::Right),
            (None, Some(l)) => (l, Direction::Left),
            (None, None) => return None,
        };
        (gain > 0.0).then_some(Candidate {
            gain,
            feature,
            threshold,
            default_direction,
        })
    }
}

/// A threshold strictly above `lo` and at most `hi`.
fn midpoint(lo: f64, hi: f64) -> f64 {
    let mid = 0.5 * lo + 0.5 * hi;
    if mid > lo && mid <= hi {
        mid
    } else {
        hi
    }
}

fn build_tree(slots: &[Slot], at: usize) -> TreeNode {
    match &slots[at] {
        Slot::Leaf(weight) => TreeNode::Leaf { weight: *weight },
        Slot::Split {
            feature,
            threshold,
            default_direction,
            left,
            right,
        } => TreeNode::Split {
            feature_index: *feature,
            threshold: *threshold,
            default_direction: *default_direction,
            left: Box::new(build_tree(slots, *left)),
            right: Box::new(build_tree(slots, *right)),
        },
        Slot::Open => unreachable!("open slots are closed before assembly"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema(d: usize) -> Vec<String> {
        (0..d).map(|j| format!("f_{j}")).collect()
    }

    fn fit(rows: &[Vec<Option<f64>>], labels: &[bool], config: &TrainConfig) -> TrainOutcome {
        let s = schema(rows[0].len());
        let set = TrainSet::new(&s, rows.iter().map(Vec::as_slice).collect(), labels.to_vec());
        train_with_history(&set, &FeatureMask::all(s.len()), config).unwrap()
    }

    #[test]
    fn midpoint_is_strictly_above_lower() {
        assert_eq!(midpoint(1.0, 2.0), 1.5);
        let a = 1.0_f64;
        let b = f64::from_bits(a.to_bits() + 1);
        let m = midpoint(a, b);
        assert!(m > a && m <= b);
    }

    #[test]
    fn single_split_leaf_weights_match_newton_step() {
        // Two groups, x = 0 (negatives) and x = 1 (positives), base p = 0.5:
        // g = -0.5 for positives, +0.5 for negatives, h = 0.25 everywhere.
        let rows: Vec<Vec<Option<f64>>> = (0..20).map(|i| vec![Some(if i < 10 { 0.0 } else { 1.0 })]).collect();
        let labels: Vec<bool> = (0..20).map(|i| i >= 10).collect();
        let cfg = TrainConfig {
            rounds: 1,
            ..TrainConfig::default()
        };
        let out = fit(&rows, &labels, &cfg);
        assert_eq!(out.model.base_score, 0.0);
        let TreeNode::Split {
            feature_index,
            threshold,
            left,
            right,
            ..
        } = &out.model.trees[0]
        else {
            panic!("expected a split");
        };
        assert_eq!((*feature_index, *threshold), (0, 0.5));
        // Depth 3 allowed, but pure children have no further gain: G_L = 5, H_L = 2.5.
        let expected_left = -5.0 / (2.5 + 1.0) * 0.1;
        assert_eq!(**left, TreeNode::Leaf { weight: expected_left });
        assert_eq!(**right, TreeNode::Leaf { weight: -expected_left });
    }

    #[test]
    fn gain_formula_on_hand_built_case() {
        let rows: Vec<Vec<Option<f64>>> = (0..20).map(|i| vec![Some(if i < 10 { 0.0 } else { 1.0 })]).collect();
        let labels: Vec<bool> = (0..20).map(|i| i >= 10).collect();
        let s = schema(1);
        let set = TrainSet::new(&s, rows.iter().map(Vec::as_slice).collect(), labels);
        let columns = Columns::build(&set, &FeatureMask::all(1));
        let grad: Vec<f64> = (0..20).map(|i| if i < 10 { 0.5 } else { -0.5 }).collect();
        let hess = vec![0.25; 20];
        let cfg = TrainConfig::default();
        let g = Grower {
            columns: &columns,
            grad: &grad,
            hess: &hess,
            config: &cfg,
        };
        let root = Stats { g: 0.0, h: 5.0, n: 20 };
        let c = g.best_splits_for_feature(0, &[0; 20], &[OpenNode { slot: 0, stats: root }])[0].unwrap();
        // 1/2 [25/3.5 + 25/3.5 - 0/6]
        assert!((c.gain - 25.0 / 3.5).abs() < 1e-12);
        assert_eq!(c.default_direction, Direction::Right);
    }

    #[test]
    fn learns_default_direction_for_missing() {
        // Missing values all belong to the positive class; present values are
        // negative below 0 and positive above, so missing should go right.
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..30 {
            rows.push(vec![Some(-1.0 - i as f64)]);
            labels.push(false);
            rows.push(vec![Some(1.0 + i as f64)]);
            labels.push(true);
            rows.push(vec![None]);
            labels.push(i % 5 != 0);
        }
        let out = fit(&rows, &labels, &TrainConfig { rounds: 5, ..TrainConfig::default() });
        let m = &out.model;
        assert!(m.predict(&[None]).unwrap() > 0.5);
        assert!(m.predict(&[Some(-3.0)]).unwrap() < 0.5);
        // Missing-heavy negatives on the left would flip the learned direction.
        let flipped: Vec<bool> = labels
            .iter()
            .zip(&rows)
            .map(|(&y, r)| if r[0].is_none() { !y } else { y })
            .collect();
        let out = fit(&rows, &flipped, &TrainConfig { rounds: 5, ..TrainConfig::default() });
        assert!(out.model.predict(&[None]).unwrap() < 0.5);
    }

    #[test]
    fn separable_data_converges() {
        let rows: Vec<Vec<Option<f64>>> = (-10..10).map(|i| vec![Some(i as f64 + 0.5)]).collect();
        let labels: Vec<bool> = (-10..10).map(|i| i >= 0).collect();
        let out = fit(&rows, &labels, &TrainConfig { rounds: 10, ..TrainConfig::default() });
        for w in out.log_loss.windows(2) {
            assert!(w[1] < w[0], "{:?}", out.log_loss);
        }
        for (r, &y) in rows.iter().zip(&labels) {
            assert_eq!(out.model.predict(r).unwrap() >= 0.5, y);
        }
    }

    #[test]
    fn xor_at_depth_two() {
        // Unequal cell counts: with perfectly balanced XOR every first split
        // has zero gain and a greedy learner cannot start.
        let cells = [((0.0, 0.0), false, 10), ((0.0, 1.0), true, 14), ((1.0, 0.0), true, 8), ((1.0, 1.0), false, 12)];
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for ((a, b), y, count) in cells {
            for _ in 0..count {
                rows.push(vec![Some(a), Some(b)]);
                labels.push(y);
            }
        }
        let cfg = TrainConfig {
            rounds: 50,
            max_depth: 2,
            ..TrainConfig::default()
        };
        let out = fit(&rows, &labels, &cfg);
        let acc = rows
            .iter()
            .zip(&labels)
            .filter(|(r, &y)| (out.model.predict(r).unwrap() >= 0.5) == y)
            .count();
        assert_eq!(acc, rows.len());
    }

    #[test]
    fn single_class_and_empty_mask_errors() {
        let s = schema(1);
        let rows = [vec![Some(1.0)], vec![Some(2.0)]];
        let set = TrainSet::new(&s, rows.iter().map(Vec::as_slice).collect(), vec![true, true]);
        assert!(matches!(
            train(&set, &FeatureMask::all(1), &TrainConfig::default()),
            Err(Error::SingleClass)
        ));
        let set = TrainSet::new(&s, rows.iter().map(Vec::as_slice).collect(), vec![true, false]);
        assert!(matches!(
            train(&set, &FeatureMask::from_bools(vec![false]), &TrainConfig::default()),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn no_split_yields_single_leaf_trees() {
        // Constant feature: nothing to split on.
        let rows: Vec<Vec<Option<f64>>> = (0..10).map(|_| vec![Some(1.0)]).collect();
        let labels: Vec<bool> = (0..10).map(|i| i < 3).collect();
        let out = fit(&rows, &labels, &TrainConfig { rounds: 4, ..TrainConfig::default() });
        assert_eq!(out.model.trees.len(), 4);
        assert!(out.model.trees.iter().all(|t| matches!(t, TreeNode::Leaf { .. })));
    }

    #[test]
    fn subsampling_is_seeded() {
        let rows: Vec<Vec<Option<f64>>> = (0..200).map(|i| vec![Some((i * 37 % 101) as f64), Some(i as f64)]).collect();
        let labels: Vec<bool> = (0..200).map(|i| (i * 37 % 101) > 50).collect();
        let cfg = TrainConfig {
            rounds: 10,
            subsample: 0.5,
            colsample_bytree: 0.5,
            ..TrainConfig::default()
        };
        let a = fit(&rows, &labels, &cfg).model;
        let b = fit(&rows, &labels, &cfg).model;
        assert_eq!(a.to_json(), b.to_json());
        let c = fit(&rows, &labels, &TrainConfig { seed: 7, ..cfg }).model;
        assert_ne!(a.to_json(), c.to_json());
    }
}
