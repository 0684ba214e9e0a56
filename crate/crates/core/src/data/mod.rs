//! Datasets, class splits, and their on-disk formats.

pub mod aefm;
mod files;
pub mod synthetic;

pub use aefm::{read_feature_maps, write_feature_maps};
pub use files::{
    load_attributes, load_dataset, load_split, parse_attributes, save_attributes, save_dataset, save_split,
    DatasetManifest, ATTRIBUTES_FILE, FEATURES_FILE, MANIFEST_FILE, SPLIT_FILE,
};
pub use synthetic::{gen_synthetic, generating_weights, GroundTruth, SyntheticSpec};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attributes::{AttributeError, AttributeMatrix};
use crate::network::FeatureMap;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {0:?}, expected \"AEFM\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("unexpected trailing data: expected {expected} bytes, found {actual}")]
    TrailingBytes { expected: usize, actual: usize },
    #[error("CSV parse error: {0}")]
    Csv(String),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("class {0} appears in both the seen and unseen sets")]
    SplitOverlap(usize),
    #[error("invalid data: {0}")]
    Invalid(String),
    #[error(transparent)]
    Attributes(#[from] AttributeError),
}

/// Seen / unseen / validation class partition.
///
/// Validation classes are a subset of the seen classes held out from
/// training; the remaining seen classes are the training classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
    #[serde(default)]
    pub val: Vec<usize>,
}

impl SplitSpec {
    pub fn validate(&self, num_classes: usize) -> Result<(), DataError> {
        let seen: BTreeSet<usize> = self.seen.iter().copied().collect();
        if let Some(&c) = self.unseen.iter().find(|c| seen.contains(c)) {
            return Err(DataError::SplitOverlap(c));
        }
        for (name, set) in [("seen", &self.seen), ("unseen", &self.unseen), ("val", &self.val)] {
            let mut uniq = BTreeSet::new();
            for &c in set {
                if c >= num_classes {
                    return Err(DataError::Invalid(format!("{name} class {c} out of range (num classes {num_classes})")));
                }
                if !uniq.insert(c) {
                    return Err(DataError::Invalid(format!("{name} class {c} listed twice")));
                }
            }
        }
        if let Some(&c) = self.val.iter().find(|c| !seen.contains(c)) {
            return Err(DataError::Invalid(format!("validation class {c} is not a seen class")));
        }
        Ok(())
    }

    /// Seen classes minus validation classes.
    pub fn training_classes(&self) -> Vec<usize> {
        self.seen.iter().copied().filter(|c| !self.val.contains(c)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleRole {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<FeatureMap>,
    pub labels: Vec<usize>,
    pub roles: Vec<SampleRole>,
    pub attributes: AttributeMatrix,
    pub split: SplitSpec,
}

impl Dataset {
    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.features.len();
        if self.labels.len() != n || self.roles.len() != n {
            return Err(DataError::Invalid(format!(
                "{n} feature maps but {} labels and {} roles",
                self.labels.len(),
                self.roles.len()
            )));
        }
        if let Some(first) = self.features.first() {
            let (k, h) = (first.channels(), first.size());
            if let Some(i) = self.features.iter().position(|m| m.channels() != k || m.size() != h) {
                return Err(DataError::Invalid(format!("sample {i} has a different shape than sample 0")));
            }
        }
        let classes = self.attributes.num_classes();
        if let Some((i, &y)) = self.labels.iter().enumerate().find(|(_, &y)| y >= classes) {
            return Err(DataError::Invalid(format!("sample {i} has label {y}, but only {classes} classes exist")));
        }
        self.split.validate(classes)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// `(K, H)` of the stored maps.
    pub fn shape(&self) -> Option<(usize, usize)> {
        self.features.first().map(|m| (m.channels(), m.size()))
    }

    fn indices_where(&self, keep: impl Fn(usize, SampleRole) -> bool) -> Vec<usize> {
        (0..self.len()).filter(|&i| keep(self.labels[i], self.roles[i])).collect()
    }

    /// Train-role samples of the training classes.
    pub fn train_indices(&self) -> Vec<usize> {
        let train = self.split.training_classes();
        self.indices_where(|y, r| r == SampleRole::Train && train.contains(&y))
    }

    /// Every sample of a validation class.
    pub fn val_indices(&self) -> Vec<usize> {
        self.indices_where(|y, _| self.split.val.contains(&y))
    }

    /// Held-out samples of training classes (for validation-time GZSL).
    pub fn seen_holdout_indices(&self) -> Vec<usize> {
        let train = self.split.training_classes();
        self.indices_where(|y, r| r == SampleRole::Test && train.contains(&y))
    }

    /// Test-role samples of non-validation seen classes plus all unseen samples.
    pub fn test_indices(&self) -> Vec<usize> {
        self.indices_where(|y, r| {
            (r == SampleRole::Test && self.split.seen.contains(&y) && !self.split.val.contains(&y))
                || self.split.unseen.contains(&y)
        })
    }

    pub fn unseen_indices(&self) -> Vec<usize> {
        self.indices_where(|y, _| self.split.unseen.contains(&y))
    }
}
