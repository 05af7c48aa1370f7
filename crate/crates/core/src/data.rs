//! Tabular ingestion and preprocessing.
//!
//! Raw CSV rows are typed against a JSON schema, incomplete rows are
//! dropped, and a [`Preprocessor`] fitted on the training rows turns them
//! into a normalized matrix in `[0,1]^n`: continuous columns are min-max
//! scaled with training statistics (and clipped), categorical columns are
//! one-hot encoded, binary columns map to {0, 1}.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::sigmoid;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Continuous,
    Categorical,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnRole {
    Feature,
    Label,
    Sensitive,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    pub role: ColumnRole,
    /// Raw value that encodes 1 for binary columns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub columns: Vec<ColumnSpec>,
}

impl DatasetSchema {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let schema: Self = serde_json::from_slice(&bytes)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for c in &self.columns {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Config(format!("duplicate column name {:?}", c.name)));
            }
        }
        let labels: Vec<_> = self
            .columns
            .iter()
            .filter(|c| c.role == ColumnRole::Label)
            .collect();
        if labels.len() != 1 {
            return Err(Error::Config(format!(
                "schema needs exactly one label column, found {}",
                labels.len()
            )));
        }
        if labels[0].kind != ColumnKind::Binary {
            return Err(Error::Config("label column must be binary".into()));
        }
        let sensitive = self
            .columns
            .iter()
            .filter(|c| c.role == ColumnRole::Sensitive)
            .count();
        if sensitive != 1 {
            return Err(Error::Config(format!(
                "schema needs exactly one sensitive column, found {sensitive}"
            )));
        }
        Ok(())
    }

    fn label_position(&self) -> usize {
        self.columns
            .iter()
            .position(|c| c.role == ColumnRole::Label)
            .expect("validated schema has a label")
    }
}

/// Typed-but-unencoded rows as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub schema: DatasetSchema,
    pub rows: Vec<Vec<String>>,
    /// Rows discarded for missing values.
    pub dropped: usize,
}

fn is_missing(cell: &str) -> bool {
    cell.is_empty() || cell == "?" || cell.eq_ignore_ascii_case("na")
}

pub fn load_csv(path: &Path, schema: &DatasetSchema) -> Result<RawDataset> {
    schema.validate()?;
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(file);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let expected: Vec<&str> = schema.columns.iter().map(|c| c.name.as_str()).collect();
    if header != expected {
        return Err(Error::Data(format!(
            "header {header:?} does not match schema columns {expected:?}"
        )));
    }
    let mut rows = Vec::new();
    let mut dropped = 0;
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let cells: Vec<String> = record.iter().map(str::to_string).collect();
        if cells.len() != expected.len() || cells.iter().any(|c| is_missing(c)) {
            dropped += 1;
            continue;
        }
        for (cell, col) in cells.iter().zip(&schema.columns) {
            if col.kind == ColumnKind::Continuous && cell.parse::<f64>().map_or(true, |v| !v.is_finite()) {
                return Err(Error::Data(format!(
                    "row {}: column {:?} value {cell:?} is not a finite number",
                    line + 2,
                    col.name
                )));
            }
        }
        rows.push(cells);
    }
    if rows.is_empty() {
        return Err(Error::Data(format!(
            "{} has no complete rows",
            path.display()
        )));
    }
    Ok(RawDataset {
        schema: schema.clone(),
        rows,
        dropped,
    })
}

/// Per-column encoding fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ColumnEncoder {
    Continuous {
        name: String,
        min: f64,
        max: f64,
    },
    Binary {
        name: String,
        positive: String,
    },
    Categorical {
        name: String,
        levels: Vec<String>,
    },
}

impl ColumnEncoder {
    fn width(&self) -> usize {
        match self {
            ColumnEncoder::Categorical { levels, .. } => levels.len(),
            _ => 1,
        }
    }

    fn names(&self) -> Vec<String> {
        match self {
            ColumnEncoder::Continuous { name, .. } | ColumnEncoder::Binary { name, .. } => {
                vec![name.clone()]
            }
            ColumnEncoder::Categorical { name, levels } => {
                levels.iter().map(|l| format!("{name}={l}")).collect()
            }
        }
    }

    /// True for a continuous column whose training range is a single value.
    pub fn is_constant(&self) -> bool {
        matches!(self, ColumnEncoder::Continuous { min, max, .. } if max <= min)
    }
}

fn pick_positive(spec: &ColumnSpec, values: &BTreeSet<&str>) -> Result<String> {
    if let Some(p) = &spec.positive {
        return Ok(p.clone());
    }
    if values.len() > 2 {
        return Err(Error::Data(format!(
            "binary column {:?} has {} distinct values",
            spec.name,
            values.len()
        )));
    }
    for candidate in ["1", "true", "True", "yes", "Yes"] {
        if values.contains(candidate) {
            return Ok(candidate.to_string());
        }
    }
    // Lexicographically larger value encodes 1.
    Ok(values.iter().next_back().map(|s| s.to_string()).unwrap_or_default())
}

/// Fitted transform from raw rows to the normalized feature matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub schema: DatasetSchema,
    /// Encoders for every non-label column, in schema order.
    pub encoders: Vec<ColumnEncoder>,
    pub label_positive: String,
}

impl Preprocessor {
    pub fn fit(raw: &RawDataset) -> Result<Self> {
        let schema = &raw.schema;
        let mut encoders = Vec::new();
        let mut label_positive = String::new();
        for (j, spec) in schema.columns.iter().enumerate() {
            let column = raw.rows.iter().map(|r| r[j].as_str());
            match (spec.role, spec.kind) {
                (ColumnRole::Label, _) => {
                    let values: BTreeSet<&str> = column.collect();
                    label_positive = pick_positive(spec, &values)?;
                }
                (_, ColumnKind::Continuous) => {
                    let (min, max) = column
                        .map(|c| c.parse::<f64>().expect("validated at load"))
                        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                            (lo.min(v), hi.max(v))
                        });
                    encoders.push(ColumnEncoder::Continuous {
                        name: spec.name.clone(),
                        min,
                        max,
                    });
                }
                (_, ColumnKind::Binary) => {
                    let values: BTreeSet<&str> = column.collect();
                    encoders.push(ColumnEncoder::Binary {
                        name: spec.name.clone(),
                        positive: pick_positive(spec, &values)?,
                    });
                }
                (_, ColumnKind::Categorical) => {
                    let levels: BTreeSet<&str> = column.collect();
                    encoders.push(ColumnEncoder::Categorical {
                        name: spec.name.clone(),
                        levels: levels.into_iter().map(str::to_string).collect(),
                    });
                }
            }
        }
        Ok(Self {
            schema: schema.clone(),
            encoders,
            label_positive,
        })
    }

    pub fn n_features(&self) -> usize {
        self.encoders.iter().map(ColumnEncoder::width).sum()
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.encoders.iter().flat_map(ColumnEncoder::names).collect()
    }

    /// First expanded column of the sensitive attribute.
    pub fn sensitive_index(&self) -> usize {
        let mut offset = 0;
        let mut enc = self.encoders.iter();
        for spec in &self.schema.columns {
            if spec.role == ColumnRole::Label {
                continue;
            }
            let e = enc.next().expect("one encoder per non-label column");
            if spec.role == ColumnRole::Sensitive {
                return offset;
            }
            offset += e.width();
        }
        unreachable!("validated schema has a sensitive column")
    }

    pub fn transform(&self, raw: &RawDataset, split: SplitTag) -> Result<Dataset> {
        if raw.schema != self.schema {
            return Err(Error::Data("raw dataset schema differs from the fitted one".into()));
        }
        let label_pos = self.schema.label_position();
        let n = self.n_features();
        let mut x = Vec::with_capacity(raw.rows.len() * n);
        let mut y = Vec::with_capacity(raw.rows.len());
        let mut unseen = 0;
        for row in &raw.rows {
            let mut enc = self.encoders.iter();
            for (j, cell) in row.iter().enumerate() {
                if j == label_pos {
                    y.push(if *cell == self.label_positive { 1.0 } else { 0.0 });
                    continue;
                }
                match enc.next().expect("encoder per column") {
                    ColumnEncoder::Continuous { min, max, .. } => {
                        let v: f64 = cell.parse().map_err(|_| {
                            Error::Data(format!("value {cell:?} is not a number"))
                        })?;
                        x.push(if max > min {
                            ((v - min) / (max - min)).clamp(0.0, 1.0)
                        } else {
                            0.0
                        });
                    }
                    ColumnEncoder::Binary { positive, .. } => {
                        x.push(if cell == positive { 1.0 } else { 0.0 });
                    }
                    ColumnEncoder::Categorical { levels, .. } => {
                        let hit = levels.iter().position(|l| l == cell);
                        if hit.is_none() {
                            unseen += 1;
                        }
                        x.extend((0..levels.len()).map(|k| if Some(k) == hit { 1.0 } else { 0.0 }));
                    }
                }
            }
        }
        if unseen > 0 {
            log::warn!("{unseen} categorical cells held unseen levels and were encoded as all-zeros");
        }
        Ok(Dataset {
            x,
            y,
            n_features: n,
            feature_names: self.feature_names(),
            sensitive_index: self.sensitive_index(),
            encoders: self.encoders.clone(),
            split,
            unseen_categories: unseen,
        })
    }

    /// Maps a normalized continuous value back to raw units.
    pub fn inverse_continuous(&self, column: &str, value: f64) -> Option<f64> {
        self.encoders.iter().find_map(|e| match e {
            ColumnEncoder::Continuous { name, min, max } if name == column => {
                Some(min + value * (max - min))
            }
            _ => None,
        })
    }
}

/// Fits on `raw` itself and transforms it.
pub fn preprocess(raw: &RawDataset) -> Result<Dataset> {
    Preprocessor::fit(raw)?.transform(raw, SplitTag::Full)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Full,
    Train,
    Test,
}

/// Normalized feature matrix with binary labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// Row-major, `len = n_rows * n_features`, entries in `[0,1]`.
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub n_features: usize,
    pub feature_names: Vec<String>,
    pub sensitive_index: usize,
    pub encoders: Vec<ColumnEncoder>,
    pub split: SplitTag,
    pub unseen_categories: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.x.chunks_exact(self.n_features)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    pub fn subset(&self, idx: &[usize], split: SplitTag) -> Dataset {
        let mut x = Vec::with_capacity(idx.len() * self.n_features);
        for &i in idx {
            x.extend_from_slice(self.row(i));
        }
        Dataset {
            x,
            y: idx.iter().map(|&i| self.y[i]).collect(),
            n_features: self.n_features,
            feature_names: self.feature_names.clone(),
            sensitive_index: self.sensitive_index,
            encoders: self.encoders.clone(),
            split,
            unseen_categories: self.unseen_categories,
        }
    }

    /// SHA-256 over feature bits, labels and feature names.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n_features as u64).to_le_bytes());
        for v in self.x.iter().chain(&self.y) {
            h.update(v.to_bits().to_le_bytes());
        }
        for name in &self.feature_names {
            h.update(name.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    /// Writes `<key>.x.bin` (little-endian f64 matrix) and `<key>.json`.
    pub fn save_cache(&self, dir: &Path, key: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bin = dir.join(format!("{key}.x.bin"));
        let bytes: Vec<u8> = self.x.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
        let meta = CacheMeta {
            n_rows: self.len(),
            dataset: Dataset {
                x: Vec::new(),
                ..self.clone()
            },
        };
        let json = dir.join(format!("{key}.json"));
        fs::write(&json, serde_json::to_vec(&meta)?).map_err(|e| Error::io(&json, e))?;
        Ok(())
    }

    /// Returns `None` when no cache entry exists for `key`.
    pub fn load_cache(dir: &Path, key: &str) -> Result<Option<Dataset>> {
        let json = dir.join(format!("{key}.json"));
        let bin = dir.join(format!("{key}.x.bin"));
        if !json.exists() || !bin.exists() {
            return Ok(None);
        }
        let meta: CacheMeta =
            serde_json::from_slice(&fs::read(&json).map_err(|e| Error::io(&json, e))?)?;
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let expected = meta.n_rows * meta.dataset.n_features * 8;
        if bytes.len() != expected {
            return Err(Error::dim("dataset cache bytes", expected, bytes.len()));
        }
        let x = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Some(Dataset { x, ..meta.dataset }))
    }
}

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    n_rows: usize,
    dataset: Dataset,
}

/// Label-stratified split of row indices; both halves come back sorted.
pub fn stratified_indices(
    labels: &[bool],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction {train_fraction} must lie in (0, 1)"
        )));
    }
    let mut rng = rng::rng_from_seed(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in [false, true] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let k = (idx.len() as f64 * train_fraction).round() as usize;
        train.extend_from_slice(&idx[..k]);
        test.extend_from_slice(&idx[k..]);
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data(format!(
            "split of {} rows at fraction {train_fraction} leaves an empty side",
            labels.len()
        )));
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let labels: Vec<bool> = dataset.y.iter().map(|&v| v > 0.5).collect();
    let (tr, te) = stratified_indices(&labels, train_fraction, seed)?;
    Ok((
        dataset.subset(&tr, SplitTag::Train),
        dataset.subset(&te, SplitTag::Test),
    ))
}

/// Splits raw rows, fits the preprocessor on the training part only, and
/// transforms both parts with it.
pub fn split_and_preprocess(
    raw: &RawDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(Preprocessor, Dataset, Dataset)> {
    let label_pos = raw.schema.label_position();
    let label_spec = &raw.schema.columns[label_pos];
    let values: BTreeSet<&str> = raw.rows.iter().map(|r| r[label_pos].as_str()).collect();
    let positive = pick_positive(label_spec, &values)?;
    let labels: Vec<bool> = raw.rows.iter().map(|r| r[label_pos] == positive).collect();
    let (tr, te) = stratified_indices(&labels, train_fraction, seed)?;
    let take = |idx: &[usize]| RawDataset {
        schema: raw.schema.clone(),
        rows: idx.iter().map(|&i| raw.rows[i].clone()).collect(),
        dropped: 0,
    };
    let (raw_train, raw_test) = (take(&tr), take(&te));
    let mut pre = Preprocessor::fit(&raw_train)?;
    pre.label_positive = positive;
    let train = pre.transform(&raw_train, SplitTag::Train)?;
    let test = pre.transform(&raw_test, SplitTag::Test)?;
    Ok((pre, train, test))
}

/// Synthetic data with a known linear separator.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    /// Logit coefficients over all features (sensitive last), applied to `x - 0.5`.
    pub separator: Vec<f64>,
}

/// Sharpness of the synthetic separator (norm of the continuous coefficients).
pub const SYNTHETIC_SHARPNESS: f64 = 8.0;

/// `n` rows of `n_continuous` uniform features plus a binary sensitive
/// attribute in the last column. Labels are Bernoulli draws from
/// `σ(w·(x_c - 0.5) + bias_strength·(s - 0.5))` with `|w| = SYNTHETIC_SHARPNESS`.
pub fn synthesize(
    n: usize,
    n_continuous: usize,
    bias_strength: f64,
    seed: u64,
) -> Result<SyntheticDataset> {
    if n < 10 {
        return Err(Error::Config("synthetic data needs at least 10 rows".into()));
    }
    if n_continuous == 0 {
        return Err(Error::Config("synthetic data needs a continuous feature".into()));
    }
    let mut rng = rng::rng_from_seed(seed);
    let mut w: Vec<f64> = (0..n_continuous)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    w.iter_mut().for_each(|v| *v *= SYNTHETIC_SHARPNESS / norm);
    w.push(bias_strength);

    let d = n_continuous + 1;
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let start = x.len();
        for _ in 0..n_continuous {
            x.push(rng.random::<f64>());
        }
        x.push(if rng.random::<bool>() { 1.0 } else { 0.0 });
        let logit: f64 = x[start..].iter().zip(&w).map(|(xi, wi)| wi * (xi - 0.5)).sum();
        y.push(if rng.random::<f64>() < sigmoid(logit) { 1.0 } else { 0.0 });
    }
    let mut encoders: Vec<ColumnEncoder> = (0..n_continuous)
        .map(|i| ColumnEncoder::Continuous {
            name: format!("x{i}"),
            min: 0.0,
            max: 1.0,
        })
        .collect();
    encoders.push(ColumnEncoder::Binary {
        name: "sensitive".into(),
        positive: "1".into(),
    });
    let feature_names = encoders.iter().flat_map(ColumnEncoder::names).collect();
    Ok(SyntheticDataset {
        dataset: Dataset {
            x,
            y,
            n_features: d,
            feature_names,
            sensitive_index: n_continuous,
            encoders,
            split: SplitTag::Full,
            unseen_categories: 0,
        },
        separator: w,
    })
}

/// Class counts keyed by label, handy for stratification checks.
pub fn class_counts(d: &Dataset) -> BTreeMap<u8, usize> {
    let mut m = BTreeMap::new();
    for &v in &d.y {
        *m.entry(u8::from(v > 0.5)).or_insert(0) += 1;
    }
    m
}
