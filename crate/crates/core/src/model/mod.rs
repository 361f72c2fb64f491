//! Reference classifier: gradient-boosted regression trees on the logistic
//! loss, with per-split default directions for missing values.
//!
//! The JSON artifact layout is documented in `docs/model.schema.json`.

mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use train::{train, train_with_history, TrainOutcome, TrainSet};

use crate::data::SnapshotDataset;
use crate::error::{Error, Result};

pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub l2_lambda: f64,
    pub min_child_hessian: f64,
    pub gain_threshold: f64,
    /// Row sampling rate per round; 1.0 disables sampling.
    pub subsample: f64,
    /// Column sampling rate per tree; 1.0 disables sampling.
    pub colsample_bytree: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rounds: 100,
            max_depth: 3,
            learning_rate: 0.1,
            l2_lambda: 1.0,
            min_child_hessian: 1.0,
            gain_threshold: 0.0,
            subsample: 1.0,
            colsample_bytree: 1.0,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.rounds == 0 {
            return bad("rounds must be positive");
        }
        if self.max_depth == 0 {
            return bad("max_depth must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return bad("learning_rate must be in (0, 1]");
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return bad("l2_lambda must be non-negative");
        }
        if !(self.min_child_hessian >= 0.0 && self.min_child_hessian.is_finite()) {
            return bad("min_child_hessian must be non-negative");
        }
        if !(self.gain_threshold >= 0.0 && self.gain_threshold.is_finite()) {
            return bad("gain_threshold must be non-negative");
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return bad("subsample must be in (0, 1]");
        }
        if !(self.colsample_bytree > 0.0 && self.colsample_bytree <= 1.0) {
            return bad("colsample_bytree must be in (0, 1]");
        }
        Ok(())
    }
}

/// Which features a model may use. Serialized as a plain boolean array.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureMask(Vec<bool>);

impl FeatureMask {
    pub fn all(n: usize) -> Self {
        Self(vec![true; n])
    }

    pub fn from_bools(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    /// Mask enabling exactly the named features. Unknown names are an error.
    pub fn from_names<S: AsRef<str>>(schema: &[String], names: &[S]) -> Result<Self> {
        let mut bits = vec![false; schema.len()];
        for name in names {
            let name = name.as_ref();
            let j = schema
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown feature {name:?}")))?;
            bits[j] = true;
        }
        Ok(Self(bits))
    }

    pub fn from_predicate<F: Fn(&str) -> bool>(schema: &[String], keep: F) -> Self {
        Self(schema.iter().map(|n| keep(n)).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_active(&self, j: usize) -> bool {
        self.0.get(j).copied().unwrap_or(false)
    }

    pub fn active_count(&self) -> usize {
        self.0.iter().filter(|b| **b).count()
    }

    pub fn active_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, b)| **b).map(|(j, _)| j)
    }

    pub fn active_names<'a>(&'a self, schema: &'a [String]) -> Vec<&'a str> {
        self.active_indices().map(|j| schema[j].as_str()).collect()
    }

    /// Copy with feature `j` switched off.
    pub fn without(&self, j: usize) -> Self {
        let mut bits = self.0.clone();
        bits[j] = false;
        Self(bits)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Left,
    Right,
}

/// Routing: `value < threshold` goes left, `value >= threshold` right,
/// missing follows `default_direction`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TreeNode {
    Split {
        feature_index: usize,
        threshold: f64,
        default_direction: Direction,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    Leaf {
        weight: f64,
    },
}

impl TreeNode {
    pub fn evaluate(&self, row: &[Option<f64>]) -> f64 {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { weight } => return *weight,
                TreeNode::Split {
                    feature_index,
                    threshold,
                    default_direction,
                    left,
                    right,
                } => {
                    let go_left = match row[*feature_index] {
                        Some(v) => v < *threshold,
                        None => *default_direction == Direction::Left,
                    };
                    node = if go_left { left } else { right };
                }
            }
        }
    }

    /// Feature indices referenced anywhere in the subtree.
    pub fn features_used(&self, out: &mut Vec<usize>) {
        if let TreeNode::Split {
            feature_index,
            left,
            right,
            ..
        } = self
        {
            out.push(*feature_index);
            left.features_used(out);
            right.features_used(out);
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn n_leaves(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 1,
            TreeNode::Split { left, right, .. } => left.n_leaves() + right.n_leaves(),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    let p = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    // Saturated margins would otherwise round to exactly 0 or 1.
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoostedModel {
    pub version: u32,
    pub schema: Vec<String>,
    pub mask: FeatureMask,
    /// Initial margin (log-odds of the training positive rate).
    pub base_score: f64,
    pub config: TrainConfig,
    pub trees: Vec<TreeNode>,
}

impl BoostedModel {
    pub fn n_features(&self) -> usize {
        self.schema.len()
    }

    pub fn margin(&self, row: &[Option<f64>]) -> Result<f64> {
        self.check_row(row)?;
        Ok(self.margin_unchecked(row))
    }

    fn margin_unchecked(&self, row: &[Option<f64>]) -> f64 {
        self.base_score + self.trees.iter().map(|t| t.evaluate(row)).sum::<f64>()
    }

    /// Probability of the positive (not BAD) class, in (0, 1).
    pub fn predict(&self, row: &[Option<f64>]) -> Result<f64> {
        self.check_row(row)?;
        Ok(sigmoid(self.margin_unchecked(row)))
    }

    /// Scores for every row of a dataset, in dataset order.
    pub fn predict_dataset(&self, dataset: &SnapshotDataset) -> Result<Vec<f64>> {
        self.check_schema(dataset.schema())?;
        Ok(dataset
            .samples()
            .iter()
            .map(|s| sigmoid(self.margin_unchecked(&s.features)))
            .collect())
    }

    pub fn check_schema(&self, schema: &[String]) -> Result<()> {
        if schema != self.schema.as_slice() {
            return Err(Error::SchemaMismatch {
                expected: self.schema.len(),
                got: schema.len(),
            });
        }
        Ok(())
    }

    fn check_row(&self, row: &[Option<f64>]) -> Result<()> {
        if row.len() != self.schema.len() {
            return Err(Error::SchemaMismatch {
                expected: self.schema.len(),
                got: row.len(),
            });
        }
        Ok(())
    }

    pub fn active_features(&self) -> Vec<&str> {
        self.mask.active_names(&self.schema)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        // Check the version before the full structure so old artifacts get a clear message.
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Artifact(format!("malformed document: {e}")))?;
        match raw.get("version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(MODEL_VERSION) => {}
            Some(v) => {
                return Err(Error::Artifact(format!(
                    "unsupported model version {v} (expected {MODEL_VERSION})"
                )))
            }
            None => return Err(Error::Artifact("missing version field".to_string())),
        }
        let model: BoostedModel =
            serde_json::from_value(raw).map_err(|e| Error::Artifact(format!("malformed document: {e}")))?;
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        if self.mask.len() != self.schema.len() {
            return Err(Error::Artifact(format!(
                "mask has {} entries for {} features",
                self.mask.len(),
                self.schema.len()
            )));
        }
        if !self.base_score.is_finite() {
            return Err(Error::Artifact("non-finite base_score".to_string()));
        }
        let mut used = Vec::new();
        for tree in &self.trees {
            check_finite(tree)?;
            tree.features_used(&mut used);
        }
        if let Some(j) = used.into_iter().find(|&j| !self.mask.is_active(j)) {
            return Err(Error::Artifact(format!("tree references inactive or unknown feature {j}")));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn check_finite(node: &TreeNode) -> Result<()> {
    match node {
        TreeNode::Leaf { weight } if !weight.is_finite() => {
            Err(Error::Artifact("non-finite leaf weight".to_string()))
        }
        TreeNode::Leaf { .. } => Ok(()),
        TreeNode::Split {
            threshold, left, right, ..
        } => {
            if !threshold.is_finite() {
                return Err(Error::Artifact("non-finite threshold".to_string()));
            }
            check_finite(left)?;
            check_finite(right)
        }
    }
}
