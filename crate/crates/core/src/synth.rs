//! Synthetic snapshot data with planted ground truth.
//!
//! Every entity gets a latent relevance `r ~ U(0, 1)`; BAD iff `r < bad_cutoff`.
//! Three feature roles are generated:
//!
//! * semantic (`f_sr_*`): `clamp(r + b_j + eta, 0, 1)`, `eta ~ N(0, sr_noise)` drawn
//!   once per entity, so the value never changes across snapshots. With
//!   probability `1 - sr_coverage` an entity has no semantic features at all.
//! * informative engagement (`f_eng_*`): `r * c_j + eps`, `eps ~ N(0, eng_volatility)`
//!   redrawn every snapshot.
//! * noise engagement (`f_eng_noise_*`): `N(0, 1)` every snapshot, independent of `r`.
//!
//! Draw order is fixed: entities ascending; per entity `r`, region, semantic
//! coverage, then features in schema order, then snapshots.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Label, Sample, SnapshotDataset, SnapshotId};
use crate::error::{Error, Result};
use crate::rng;

pub use crate::data::write_csv;

pub const NOISE_PREFIX: &str = "f_eng_noise_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_entities: usize,
    pub n_snapshots: usize,
    pub k_sr: usize,
    pub k_eng_info: usize,
    pub k_eng_noise: usize,
    pub sr_coverage: f64,
    pub bad_cutoff: f64,
    pub sr_noise: f64,
    pub eng_volatility: f64,
    pub n_regions: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_entities: 5000,
            n_snapshots: 8,
            k_sr: 2,
            k_eng_info: 15,
            k_eng_noise: 8,
            sr_coverage: 0.8,
            bad_cutoff: 0.4,
            sr_noise: 0.05,
            eng_volatility: 0.25,
            n_regions: 6,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_snapshots == 0 {
            return bad("n_snapshots must be positive".into());
        }
        if self.k_sr + self.k_eng_info + self.k_eng_noise == 0 {
            return bad("at least one feature is required".into());
        }
        if !(0.0..=1.0).contains(&self.sr_coverage) {
            return bad(format!("sr_coverage {} outside [0, 1]", self.sr_coverage));
        }
        if !(self.bad_cutoff > 0.0 && self.bad_cutoff < 1.0) {
            return bad(format!("bad_cutoff {} outside (0, 1)", self.bad_cutoff));
        }
        if !(self.sr_noise >= 0.0 && self.sr_noise.is_finite()) {
            return bad(format!("sr_noise {} must be non-negative", self.sr_noise));
        }
        if !(self.eng_volatility >= 0.0 && self.eng_volatility.is_finite()) {
            return bad(format!("eng_volatility {} must be non-negative", self.eng_volatility));
        }
        if self.n_regions == 0 {
            return bad("n_regions must be positive".into());
        }
        Ok(())
    }

    pub fn n_features(&self) -> usize {
        self.k_sr + self.k_eng_info + self.k_eng_noise
    }

    /// Column names in schema order: semantic, informative engagement, noise.
    pub fn feature_names(&self) -> Vec<String> {
        let sr = (0..self.k_sr).map(|j| format!("f_sr_{j}"));
        let info = (0..self.k_eng_info).map(|j| format!("f_eng_{j}"));
        let noise = (0..self.k_eng_noise).map(|j| format!("{NOISE_PREFIX}{j}"));
        sr.chain(info).chain(noise).collect()
    }

    /// Engagement coefficients `c_j`, evenly spaced over [0.5, 1.5].
    pub fn engagement_coefficients(&self) -> Vec<f64> {
        match self.k_eng_info {
            0 => vec![],
            1 => vec![1.0],
            k => (0..k).map(|j| 0.5 + j as f64 / (k - 1) as f64).collect(),
        }
    }

    /// Semantic offsets `b_j = 0.05 * j`.
    pub fn semantic_offsets(&self) -> Vec<f64> {
        (0..self.k_sr).map(|j| 0.05 * j as f64).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FeatureRole {
    Sr,
    EngInfo,
    EngNoise,
}

impl FeatureRole {
    /// Role recovered from a generated column name.
    pub fn from_name(name: &str) -> Option<Self> {
        if name.starts_with(NOISE_PREFIX) {
            Some(FeatureRole::EngNoise)
        } else if name.starts_with(crate::data::ENGAGEMENT_PREFIX) {
            Some(FeatureRole::EngInfo)
        } else if name.starts_with(crate::data::SEMANTIC_PREFIX) {
            Some(FeatureRole::Sr)
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub relevance: BTreeMap<String, f64>,
    /// One role per schema column.
    pub roles: Vec<FeatureRole>,
}

impl PlantedTruth {
    pub fn indices_with(&self, role: FeatureRole) -> Vec<usize> {
        self.roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == role)
            .map(|(j, _)| j)
            .collect()
    }
}

pub fn entity_id(index: usize) -> String {
    format!("q{index:06}|app")
}

fn label_for(r: f64, cutoff: f64) -> Label {
    if r < cutoff {
        return Label::Bad;
    }
    let u = (r - cutoff) / (1.0 - cutoff);
    if u < 1.0 / 3.0 {
        Label::Acceptable
    } else if u < 2.0 / 3.0 {
        Label::Good
    } else {
        Label::Excellent
    }
}

pub fn generate(config: &SynthConfig) -> Result<(SnapshotDataset, PlantedTruth)> {
    config.validate()?;
    let schema = config.feature_names();
    let roles: Vec<FeatureRole> = std::iter::repeat_n(FeatureRole::Sr, config.k_sr)
        .chain(std::iter::repeat_n(FeatureRole::EngInfo, config.k_eng_info))
        .chain(std::iter::repeat_n(FeatureRole::EngNoise, config.k_eng_noise))
        .collect();
    let offsets = config.semantic_offsets();
    let coefs = config.engagement_coefficients();
    let t = config.n_snapshots;
    let d = schema.len();

    let mut gen = rng::seeded(config.seed);
    let normal = move |g: &mut rand_chacha::ChaCha8Rng| -> f64 { StandardNormal.sample(g) };

    let mut samples = Vec::with_capacity(config.n_entities * t);
    let mut relevance = BTreeMap::new();
    for e in 0..config.n_entities {
        let id = entity_id(e);
        let r: f64 = gen.random();
        let region = format!("region_{}", gen.random_range(0..config.n_regions) + 1);
        let has_sr = gen.random::<f64>() < config.sr_coverage;

        // values[snapshot][feature]
        let mut values = vec![vec![None; d]; t];
        for (j, role) in roles.iter().enumerate() {
            match role {
                FeatureRole::Sr => {
                    let eta = config.sr_noise * normal(&mut gen);
                    if has_sr {
                        let v = (r + offsets[j] + eta).clamp(0.0, 1.0);
                        values.iter_mut().for_each(|row| row[j] = Some(v));
                    }
                }
                FeatureRole::EngInfo => {
                    let c = coefs[j - config.k_sr];
                    for row in values.iter_mut() {
                        row[j] = Some(r * c + config.eng_volatility * normal(&mut gen));
                    }
                }
                FeatureRole::EngNoise => {
                    for row in values.iter_mut() {
                        row[j] = Some(normal(&mut gen));
                    }
                }
            }
        }

        let label = label_for(r, config.bad_cutoff);
        for (s, features) in values.into_iter().enumerate() {
            samples.push(Sample {
                entity_id: id.clone(),
                snapshot_id: SnapshotId::Index(s as u64 + 1),
                region: region.clone(),
                label,
                features,
            });
        }
        relevance.insert(id, r);
    }

    let dataset = SnapshotDataset::new(schema, samples)?;
    Ok((dataset, PlantedTruth { relevance, roles }))
}

/// Generate and write in one step.
pub fn generate_to_csv(config: &SynthConfig, path: impl AsRef<Path>) -> Result<PlantedTruth> {
    let (dataset, truth) = generate(config)?;
    write_csv(&dataset, path)?;
    Ok(truth)
}
