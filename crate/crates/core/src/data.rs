//! Snapshot datasets: CSV ingest, validation, entity-disjoint partitioning.
//!
//! A dataset holds one row per `(entity, snapshot)` pair. Rows are kept in a
//! canonical order (snapshot ascending, then entity) so two datasets built
//! from the same rows compare equal regardless of file order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Columns every snapshot file starts with, in order.
pub const RESERVED_COLUMNS: [&str; 4] = ["entity_id", "snapshot_id", "region", "label"];
pub const FEATURE_PREFIX: &str = "f_";
pub const SEMANTIC_PREFIX: &str = "f_sr_";
pub const ENGAGEMENT_PREFIX: &str = "f_eng_";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Label {
    Bad,
    Acceptable,
    Good,
    Excellent,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::Bad, Label::Acceptable, Label::Good, Label::Excellent];

    /// Binary projection: everything except BAD is relevant.
    pub fn is_positive(self) -> bool {
        !matches!(self, Label::Bad)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Bad => "BAD",
            Label::Acceptable => "ACCEPTABLE",
            Label::Good => "GOOD",
            Label::Excellent => "EXCELLENT",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "BAD" => Ok(Label::Bad),
            "ACCEPTABLE" => Ok(Label::Acceptable),
            "GOOD" => Ok(Label::Good),
            "EXCELLENT" => Ok(Label::Excellent),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

/// Snapshot key. Integer ids order numerically, ISO-8601 dates lexicographically.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SnapshotId {
    Index(u64),
    Date(String),
}

impl SnapshotId {
    pub fn parse(raw: &str) -> Result<Self, String> {
        if !raw.is_empty() && raw.bytes().all(|b| b.is_ascii_digit()) {
            return raw
                .parse::<u64>()
                .map(SnapshotId::Index)
                .map_err(|e| format!("snapshot_id {raw:?}: {e}"));
        }
        if looks_like_iso_date(raw) && raw.bytes().all(is_id_byte) {
            Ok(SnapshotId::Date(raw.to_string()))
        } else {
            Err(format!(
                "snapshot_id {raw:?} is neither a non-negative integer nor an ISO-8601 date"
            ))
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            SnapshotId::Index(_) => "integer",
            SnapshotId::Date(_) => "date",
        }
    }
}

impl fmt::Display for SnapshotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SnapshotId::Index(i) => write!(f, "{i}"),
            SnapshotId::Date(d) => f.write_str(d),
        }
    }
}

fn looks_like_iso_date(s: &str) -> bool {
    let b = s.as_bytes();
    b.len() >= 10
        && b[..4].iter().all(u8::is_ascii_digit)
        && b[4] == b'-'
        && b[5..7].iter().all(u8::is_ascii_digit)
        && b[7] == b'-'
        && b[8..10].iter().all(u8::is_ascii_digit)
}

fn is_id_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || matches!(b, b'_' | b'|' | b'.' | b':' | b'-')
}

pub fn is_valid_id(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(is_id_byte)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureGroup {
    Semantic,
    Engagement,
}

/// Group tag carried by the column-name prefix, if any.
pub fn feature_group(name: &str) -> Option<FeatureGroup> {
    if name.starts_with(SEMANTIC_PREFIX) {
        Some(FeatureGroup::Semantic)
    } else if name.starts_with(ENGAGEMENT_PREFIX) {
        Some(FeatureGroup::Engagement)
    } else {
        None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub entity_id: String,
    pub snapshot_id: SnapshotId,
    pub region: String,
    pub label: Label,
    pub features: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub rows: usize,
    pub entities: usize,
    pub snapshots: usize,
}

/// Validated, immutable collection of snapshot rows.
#[derive(Clone, Debug)]
pub struct SnapshotDataset {
    schema: Vec<String>,
    samples: Vec<Sample>,
    // entity -> row indices, snapshot ascending
    entities: BTreeMap<String, Vec<usize>>,
}

impl PartialEq for SnapshotDataset {
    fn eq(&self, other: &Self) -> bool {
        self.schema == other.schema && self.samples == other.samples
    }
}

impl SnapshotDataset {
    pub fn new(schema: Vec<String>, mut samples: Vec<Sample>) -> Result<Self> {
        validate_schema(&schema).map_err(Error::Header)?;
        let mut snapshot_kind: Option<&'static str> = None;
        for s in &samples {
            if s.features.len() != schema.len() {
                return Err(Error::SchemaMismatch {
                    expected: schema.len(),
                    got: s.features.len(),
                });
            }
            if !is_valid_id(&s.entity_id) {
                return Err(Error::InvalidData(format!("invalid entity_id {:?}", s.entity_id)));
            }
            if !is_valid_id(&s.region) {
                return Err(Error::InvalidData(format!("invalid region {:?}", s.region)));
            }
            if let Some(bad) = s.features.iter().flatten().find(|v| !v.is_finite()) {
                return Err(Error::InvalidData(format!(
                    "non-finite feature value {bad} for entity {}",
                    s.entity_id
                )));
            }
            match snapshot_kind {
                None => snapshot_kind = Some(s.snapshot_id.kind()),
                Some(k) if k != s.snapshot_id.kind() => {
                    return Err(Error::InvalidData(
                        "mixed integer and date snapshot ids".to_string(),
                    ))
                }
                Some(_) => {}
            }
        }

        samples.sort_by(|a, b| {
            (&a.snapshot_id, &a.entity_id).cmp(&(&b.snapshot_id, &b.entity_id))
        });

        let mut entities: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            let rows = entities.entry(s.entity_id.clone()).or_default();
            if let Some(&prev) = rows.last() {
                let first = &samples[prev];
                if first.snapshot_id == s.snapshot_id {
                    return Err(Error::InvalidData(format!(
                        "duplicate (entity_id, snapshot_id) = ({}, {})",
                        s.entity_id, s.snapshot_id
                    )));
                }
                if first.label != s.label {
                    return Err(Error::InconsistentLabel {
                        entity: s.entity_id.clone(),
                        first: first.label.to_string(),
                        second: s.label.to_string(),
                    });
                }
            }
            rows.push(i);
        }

        Ok(Self {
            schema,
            samples,
            entities,
        })
    }

    pub fn schema(&self) -> &[String] {
        &self.schema
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.schema.iter().position(|n| n == name)
    }

    /// Entity ids in ascending order.
    pub fn entity_ids(&self) -> impl Iterator<Item = &str> {
        self.entities.keys().map(String::as_str)
    }

    pub fn n_entities(&self) -> usize {
        self.entities.len()
    }

    /// Row indices of one entity, snapshot ascending.
    pub fn entity_rows(&self, entity_id: &str) -> Option<&[usize]> {
        self.entities.get(entity_id).map(Vec::as_slice)
    }

    /// `(entity, rows)` pairs in entity order.
    pub fn entity_groups(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.entities.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn snapshot_ids(&self) -> BTreeSet<&SnapshotId> {
        self.samples.iter().map(|s| &s.snapshot_id).collect()
    }

    pub fn summary(&self) -> DatasetSummary {
        DatasetSummary {
            rows: self.samples.len(),
            entities: self.entities.len(),
            snapshots: self.snapshot_ids().len(),
        }
    }

    pub fn rows(&self) -> Vec<&[Option<f64>]> {
        self.samples.iter().map(|s| s.features.as_slice()).collect()
    }

    pub fn binary_labels(&self) -> Vec<bool> {
        self.samples.iter().map(|s| s.label.is_positive()).collect()
    }

    /// Keep only entities accepted by `keep`. All of an entity's rows travel together.
    pub fn filter_entities<F>(&self, mut keep: F) -> SnapshotDataset
    where
        F: FnMut(&str) -> bool,
    {
        let mut samples = Vec::new();
        for (entity, rows) in &self.entities {
            if keep(entity) {
                samples.extend(rows.iter().map(|&i| self.samples[i].clone()));
            }
        }
        // Already validated; only the index needs rebuilding.
        SnapshotDataset::new(self.schema.clone(), samples).expect("subset of a valid dataset")
    }
}

fn validate_schema(schema: &[String]) -> Result<(), String> {
    if schema.is_empty() {
        return Err("at least one feature column is required".to_string());
    }
    let mut seen = BTreeSet::new();
    for name in schema {
        if !name.starts_with(FEATURE_PREFIX) || name.len() == FEATURE_PREFIX.len() {
            return Err(format!("feature column {name:?} must be prefixed {FEATURE_PREFIX:?}"));
        }
        if !is_valid_id(name) {
            return Err(format!("feature column {name:?} has invalid characters"));
        }
        if !seen.insert(name.as_str()) {
            return Err(format!("duplicate feature column {name:?}"));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct ParseOptions {
    /// Reject feature columns that carry no `f_sr_` / `f_eng_` group prefix.
    pub require_feature_groups: bool,
}

pub fn parse_csv(path: impl AsRef<Path>, options: &ParseOptions) -> Result<SnapshotDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, options).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn read_csv<R: std::io::Read>(reader: R, options: &ParseOptions) -> Result<SnapshotDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);

    let header = rdr.headers().map_err(csv_error)?.clone();
    if header.len() <= RESERVED_COLUMNS.len() {
        return Err(Error::Header(format!(
            "expected {} followed by at least one feature column",
            RESERVED_COLUMNS.join(",")
        )));
    }
    for (i, want) in RESERVED_COLUMNS.iter().enumerate() {
        if &header[i] != *want {
            return Err(Error::Header(format!(
                "column {} must be {want:?}, found {:?}",
                i + 1,
                &header[i]
            )));
        }
    }
    let schema: Vec<String> = header.iter().skip(RESERVED_COLUMNS.len()).map(str::to_string).collect();
    validate_schema(&schema).map_err(Error::Header)?;
    if options.require_feature_groups {
        if let Some(name) = schema.iter().find(|n| feature_group(n).is_none()) {
            return Err(Error::Header(format!(
                "feature column {name:?} has no group prefix ({SEMANTIC_PREFIX} or {ENGAGEMENT_PREFIX})"
            )));
        }
    }

    let mut samples = Vec::new();
    let mut seen: BTreeMap<String, (Label, BTreeSet<SnapshotId>)> = BTreeMap::new();
    let mut snapshot_kind: Option<&'static str> = None;
    for record in rdr.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let row_err = |message: String| Error::Csv { line, message };

        let entity_id = record[0].to_string();
        if !is_valid_id(&entity_id) {
            return Err(row_err(format!("invalid entity_id {entity_id:?}")));
        }
        let snapshot_id = SnapshotId::parse(&record[1]).map_err(row_err)?;
        match snapshot_kind {
            None => snapshot_kind = Some(snapshot_id.kind()),
            Some(k) if k != snapshot_id.kind() => {
                return Err(row_err(format!(
                    "mixed snapshot id types: {k} ids earlier, {} here",
                    snapshot_id.kind()
                )))
            }
            Some(_) => {}
        }
        let region = record[2].to_string();
        if !is_valid_id(&region) {
            return Err(row_err(format!("invalid region {region:?}")));
        }
        let label: Label = record[3].parse().map_err(row_err)?;

        let mut features = Vec::with_capacity(schema.len());
        for (j, cell) in record.iter().skip(RESERVED_COLUMNS.len()).enumerate() {
            if cell.is_empty() {
                features.push(None);
                continue;
            }
            let value: f64 = cell
                .parse()
                .map_err(|_| row_err(format!("column {}: unparseable number {cell:?}", schema[j])))?;
            if !value.is_finite() {
                return Err(row_err(format!("column {}: non-finite value {cell:?}", schema[j])));
            }
            features.push(Some(value));
        }

        let (first_label, snapshots) = seen
            .entry(entity_id.clone())
            .or_insert_with(|| (label, BTreeSet::new()));
        if *first_label != label {
            return Err(Error::InconsistentLabel {
                entity: entity_id,
                first: first_label.to_string(),
                second: label.to_string(),
            });
        }
        if !snapshots.insert(snapshot_id.clone()) {
            return Err(row_err(format!(
                "duplicate (entity_id, snapshot_id) = ({entity_id}, {snapshot_id})"
            )));
        }

        samples.push(Sample {
            entity_id,
            snapshot_id,
            region,
            label,
            features,
        });
    }

    SnapshotDataset::new(schema, samples)
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io {
            path: Default::default(),
            source,
        },
        other => Error::Csv {
            line,
            message: format!("{other:?}"),
        },
    }
}

/// Write a dataset in the snapshot CSV format. Missing values become empty cells.
pub fn write_csv(dataset: &SnapshotDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_csv_to(dataset, &mut out)
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn write_csv_to<W: Write>(dataset: &SnapshotDataset, out: &mut W) -> std::io::Result<()> {
    let mut line = RESERVED_COLUMNS.join(",");
    for name in dataset.schema() {
        line.push(',');
        line.push_str(name);
    }
    writeln!(out, "{line}")?;
    for s in dataset.samples() {
        write!(out, "{},{},{},{}", s.entity_id, s.snapshot_id, s.region, s.label)?;
        for v in &s.features {
            match v {
                // Display for f64 is the shortest string that parses back exactly.
                Some(x) => write!(out, ",{x}")?,
                None => out.write_all(b",")?,
            }
        }
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Partition::Train => "TRAIN",
            Partition::Val => "VAL",
            Partition::Test => "TEST",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for Fractions {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl Fractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(Error::InvalidConfig(format!("fractions must be non-negative: {self:?}")));
        }
        if ((self.train + self.val + self.test) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("fractions must sum to 1: {self:?}")));
        }
        Ok(())
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

/// Position of an entity on the unit interval: `hash(salt ++ "\0" ++ entity) / 2^64`.
pub fn entity_unit(entity_id: &str, salt: &str) -> f64 {
    let mut key = Vec::with_capacity(salt.len() + 1 + entity_id.len());
    key.extend_from_slice(salt.as_bytes());
    key.push(0);
    key.extend_from_slice(entity_id.as_bytes());
    // Top 53 bits keep u exactly representable and strictly below 1.
    (fnv1a64(&key) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn assign_partition(entity_id: &str, fractions: &Fractions, salt: &str) -> Partition {
    let u = entity_unit(entity_id, salt);
    if u < fractions.train {
        Partition::Train
    } else if u < fractions.train + fractions.val {
        Partition::Val
    } else {
        Partition::Test
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionAssignment {
    pub salt: String,
    pub fractions: Fractions,
    pub entities: BTreeMap<String, Partition>,
}

impl PartitionAssignment {
    pub fn get(&self, entity_id: &str) -> Option<Partition> {
        self.entities.get(entity_id).copied()
    }

    /// Rows of `dataset` whose entity is assigned to `part`.
    pub fn select(&self, dataset: &SnapshotDataset, part: Partition) -> SnapshotDataset {
        dataset.filter_entities(|e| self.get(e) == Some(part))
    }

    pub fn counts(&self) -> BTreeMap<Partition, usize> {
        let mut out = BTreeMap::new();
        for p in self.entities.values() {
            *out.entry(*p).or_insert(0) += 1;
        }
        out
    }
}

pub fn partition_entities(
    dataset: &SnapshotDataset,
    fractions: Fractions,
    salt: &str,
) -> Result<PartitionAssignment> {
    fractions.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidData("cannot partition an empty dataset".to_string()));
    }
    let entities = dataset
        .entity_ids()
        .map(|e| (e.to_string(), assign_partition(e, &fractions, salt)))
        .collect();
    Ok(PartitionAssignment {
        salt: salt.to_string(),
        fractions,
        entities,
    })
}

pub fn entity_series<'a>(dataset: &'a SnapshotDataset, entity_id: &str) -> Result<Vec<&'a Sample>> {
    let rows = dataset
        .entity_rows(entity_id)
        .ok_or_else(|| Error::UnknownEntity(entity_id.to_string()))?;
    Ok(rows.iter().map(|&i| &dataset.samples()[i]).collect())
}

/// One row per entity: the one with the greatest snapshot id.
pub fn latest_snapshot_view(dataset: &SnapshotDataset) -> Result<SnapshotDataset> {
    if dataset.is_empty() {
        return Err(Error::InvalidData("empty dataset".to_string()));
    }
    let samples = dataset
        .entity_groups()
        .map(|(_, rows)| dataset.samples()[*rows.last().expect("non-empty group")].clone())
        .collect();
    SnapshotDataset::new(dataset.schema().to_vec(), samples)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageStats {
    /// `(feature, fraction of rows with a value)` in schema order.
    pub feature_coverage: Vec<(String, f64)>,
    /// Fraction of entities per label.
    pub label_fractions: BTreeMap<Label, f64>,
}

impl CoverageStats {
    pub fn coverage(&self, feature: &str) -> Option<f64> {
        self.feature_coverage
            .iter()
            .find(|(n, _)| n == feature)
            .map(|(_, c)| *c)
    }

    pub fn bad_fraction(&self) -> f64 {
        self.label_fractions.get(&Label::Bad).copied().unwrap_or(0.0)
    }
}

pub fn coverage_stats(dataset: &SnapshotDataset) -> CoverageStats {
    let n = dataset.len();
    let mut present = vec![0usize; dataset.schema().len()];
    for s in dataset.samples() {
        for (j, v) in s.features.iter().enumerate() {
            if v.is_some() {
                present[j] += 1;
            }
        }
    }
    let feature_coverage = dataset
        .schema()
        .iter()
        .zip(&present)
        .map(|(name, &p)| (name.clone(), if n == 0 { 0.0 } else { p as f64 / n as f64 }))
        .collect();

    let mut label_counts: BTreeMap<Label, usize> = Label::ALL.iter().map(|l| (*l, 0)).collect();
    for (_, rows) in dataset.entity_groups() {
        *label_counts.get_mut(&dataset.samples()[rows[0]].label).unwrap() += 1;
    }
    let n_entities = dataset.n_entities();
    let label_fractions = label_counts
        .into_iter()
        .map(|(l, c)| {
            let f = if n_entities == 0 { 0.0 } else { c as f64 / n_entities as f64 };
            (l, f)
        })
        .collect();

    CoverageStats {
        feature_coverage,
        label_fractions,
    }
}
