use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{aefm, DataError, Dataset, SampleRole, SplitSpec};
use crate::attributes::AttributeMatrix;

/// Parses one class per line of comma-separated floats. A first line that
/// does not parse as numbers is treated as a header and skipped.
pub fn parse_attributes(text: &str) -> Result<AttributeMatrix, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DataError::Csv(e.to_string()))?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        let parsed: Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(row) => rows.push(row),
            Err(_) if line == 0 => continue,
            Err(e) => return Err(DataError::Csv(format!("line {}: {e}", line + 1))),
        }
    }
    Ok(AttributeMatrix::from_rows(rows)?)
}

pub fn load_attributes(path: impl AsRef<Path>) -> Result<AttributeMatrix, DataError> {
    parse_attributes(&fs::read_to_string(path)?)
}

pub fn save_attributes(path: impl AsRef<Path>, attrs: &AttributeMatrix) -> Result<(), DataError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for row in attrs.rows() {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(|e| DataError::Csv(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| DataError::Csv(e.to_string()))?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a split file; disjointness is checked here, class ranges once the
/// attribute matrix is known.
pub fn load_split(path: impl AsRef<Path>) -> Result<SplitSpec, DataError> {
    let split: SplitSpec = serde_json::from_str(&fs::read_to_string(path)?)?;
    let max = split.seen.iter().chain(&split.unseen).chain(&split.val).max().map_or(0, |m| m + 1);
    split.validate(max)?;
    Ok(split)
}

pub fn save_split(path: impl AsRef<Path>, split: &SplitSpec) -> Result<(), DataError> {
    fs::write(path, serde_json::to_string_pretty(split)? + "\n")?;
    Ok(())
}

/// `dataset.json`: points at the feature, attribute and split files (relative
/// to the manifest's directory) and carries per-sample labels and roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub features: PathBuf,
    pub attributes: PathBuf,
    pub split: PathBuf,
    pub labels: Vec<usize>,
    pub roles: Vec<SampleRole>,
}

pub const MANIFEST_FILE: &str = "dataset.json";
pub const FEATURES_FILE: &str = "features.aefm";
pub const ATTRIBUTES_FILE: &str = "attributes.csv";
pub const SPLIT_FILE: &str = "split.json";

pub fn load_dataset(manifest: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let manifest = manifest.as_ref();
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let m: DatasetManifest = serde_json::from_str(&fs::read_to_string(manifest)?)?;
    let ds = Dataset {
        features: aefm::read_feature_maps(base.join(&m.features))?,
        labels: m.labels,
        roles: m.roles,
        attributes: load_attributes(base.join(&m.attributes))?,
        split: load_split(base.join(&m.split))?,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes the four dataset files into `dir`; returns the manifest path.
pub fn save_dataset(dir: impl AsRef<Path>, ds: &Dataset) -> Result<PathBuf, DataError> {
    ds.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    aefm::write_feature_maps(dir.join(FEATURES_FILE), &ds.features)?;
    save_attributes(dir.join(ATTRIBUTES_FILE), &ds.attributes)?;
    save_split(dir.join(SPLIT_FILE), &ds.split)?;
    let manifest = DatasetManifest {
        features: FEATURES_FILE.into(),
        attributes: ATTRIBUTES_FILE.into(),
        split: SPLIT_FILE.into(),
        labels: ds.labels.clone(),
        roles: ds.roles.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string(&manifest)? + "\n")?;
    Ok(path)
}
