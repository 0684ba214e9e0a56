//! Class semantic vectors and their high-order augmentation.
//!
//! A class attribute vector `a` of length `n` is lifted to its pairwise
//! relations `vec(a aᵀ)` (length `n²`), compressed with a Gaussian random
//! projection to `m = round(γ·n)` dimensions, and concatenated in front of the
//! original vector:
//!
//! ```text
//! augmented(a) = [ P · vec(a aᵀ) ; a ]      P ∈ R^{m × n²},  P_ij ~ N(0, 1/m)
//! ```
//!
//! One projection matrix is shared by every class, so distances between the
//! high-order parts are approximately preserved (Johnson–Lindenstrauss).

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error, PartialEq)]
pub enum AttributeError {
    #[error("input vector is empty")]
    EmptyVector,
    #[error("{what} must be at least 1")]
    ZeroDimension { what: &'static str },
    #[error("attribute matrix has no classes")]
    NoClasses,
    #[error("row {row} has {found} entries, expected {expected}")]
    RaggedRows { row: usize, expected: usize, found: usize },
    #[error("non-finite entry at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("gamma must be a positive finite number, got {0}")]
    InvalidGamma(f64),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

/// Per-class semantic vectors, one row per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeMatrix {
    num_classes: usize,
    attr_dim: usize,
    data: Vec<f64>,
}

impl AttributeMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, AttributeError> {
        let first = rows.first().ok_or(AttributeError::NoClasses)?;
        let attr_dim = first.len();
        if attr_dim == 0 {
            return Err(AttributeError::ZeroDimension { what: "attr_dim" });
        }
        let mut data = Vec::with_capacity(rows.len() * attr_dim);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != attr_dim {
                return Err(AttributeError::RaggedRows { row: r, expected: attr_dim, found: row.len() });
            }
            if let Some(col) = row.iter().position(|v| !v.is_finite()) {
                return Err(AttributeError::NonFinite { row: r, col });
            }
            data.extend_from_slice(row);
        }
        Ok(Self { num_classes: rows.len(), attr_dim, data })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn attr_dim(&self) -> usize {
        self.attr_dim
    }

    /// Row of class `y`. Panics if `y` is out of range.
    pub fn row(&self, y: usize) -> &[f64] {
        &self.data[y * self.attr_dim..(y + 1) * self.attr_dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.attr_dim)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rows().map(<[f64]>::to_vec).collect()
    }
}

/// Settings for the high-order augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HighOrderConfig {
    /// Ratio of the projected dimension to the attribute dimension.
    pub gamma: f64,
    pub seed: u64,
    /// Rescale every projection row to unit length after sampling.
    #[serde(default)]
    pub normalize_rows: bool,
}

impl HighOrderConfig {
    pub fn new(gamma: f64, seed: u64) -> Self {
        Self { gamma, seed, normalize_rows: false }
    }

    /// `round(γ·n)`, which must be at least one.
    pub fn reduced_dim(&self, attr_dim: usize) -> Result<usize, AttributeError> {
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(AttributeError::InvalidGamma(self.gamma));
        }
        let m = (self.gamma * attr_dim as f64).round() as usize;
        if m == 0 {
            return Err(AttributeError::ZeroDimension { what: "reduced dimension round(gamma * attr_dim)" });
        }
        Ok(m)
    }
}

/// Row-major vectorization of the outer product `x xᵀ`.
pub fn outer_vec(x: &[f64]) -> Result<Vec<f64>, AttributeError> {
    if x.is_empty() {
        return Err(AttributeError::EmptyVector);
    }
    Ok(x.iter().flat_map(|&xi| x.iter().map(move |&xj| xi * xj)).collect())
}

/// Dense Gaussian random projection from `in_dim` to `out_dim` dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    out_dim: usize,
    in_dim: usize,
    data: Vec<f64>,
}

impl ProjectionMatrix {
    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn entries(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.in_dim..(i + 1) * self.in_dim]
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>, AttributeError> {
        if x.len() != self.in_dim {
            return Err(AttributeError::DimensionMismatch { expected: self.in_dim, found: x.len() });
        }
        Ok(self
            .data
            .chunks_exact(self.in_dim)
            .map(|row| row.iter().zip(x).map(|(p, v)| p * v).sum())
            .collect())
    }
}

/// Samples an `out_dim × in_dim` matrix with i.i.d. `N(0, 1/out_dim)` entries.
pub fn build_grp(
    in_dim: usize,
    out_dim: usize,
    seed: u64,
    normalize_rows: bool,
) -> Result<ProjectionMatrix, AttributeError> {
    if in_dim == 0 {
        return Err(AttributeError::ZeroDimension { what: "in_dim" });
    }
    if out_dim == 0 {
        return Err(AttributeError::ZeroDimension { what: "out_dim" });
    }
    let normal = Normal::new(0.0, (1.0 / out_dim as f64).sqrt()).expect("positive std");
    let mut rng = seed::rng(seed);
    let mut data: Vec<f64> = (0..in_dim * out_dim).map(|_| normal.sample(&mut rng)).collect();
    if normalize_rows {
        for row in data.chunks_exact_mut(in_dim) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
    }
    Ok(ProjectionMatrix { out_dim, in_dim, data })
}

/// Class vectors after augmentation: `[high-order part (m) ; original (n)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedAttributeMatrix {
    num_classes: usize,
    high_order_dim: usize,
    attr_dim: usize,
    data: Vec<f64>,
}

impl AugmentedAttributeMatrix {
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn high_order_dim(&self) -> usize {
        self.high_order_dim
    }

    pub fn attr_dim(&self) -> usize {
        self.attr_dim
    }

    pub fn aug_dim(&self) -> usize {
        self.high_order_dim + self.attr_dim
    }

    pub fn row(&self, y: usize) -> &[f64] {
        let d = self.aug_dim();
        &self.data[y * d..(y + 1) * d]
    }

    pub fn high_order_part(&self, y: usize) -> &[f64] {
        &self.row(y)[..self.high_order_dim]
    }

    pub fn first_order_part(&self, y: usize) -> &[f64] {
        &self.row(y)[self.high_order_dim..]
    }
}

pub fn augment_attributes(
    attrs: &AttributeMatrix,
    cfg: &HighOrderConfig,
) -> Result<AugmentedAttributeMatrix, AttributeError> {
    let n = attrs.attr_dim();
    let m = cfg.reduced_dim(n)?;
    let projection = build_grp(n * n, m, cfg.seed, cfg.normalize_rows)?;
    let mut data = Vec::with_capacity(attrs.num_classes() * (m + n));
    for row in attrs.rows() {
        data.extend(projection.project(&outer_vec(row)?)?);
        data.extend_from_slice(row);
    }
    Ok(AugmentedAttributeMatrix { num_classes: attrs.num_classes(), high_order_dim: m, attr_dim: n, data })
}

/// The fixed class-embedding matrix the network scores against.
///
/// Built either from raw attributes or from their high-order augmentation.
/// It is never updated during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMatrix {
    num_classes: usize,
    dim: usize,
    data: Vec<f64>,
}

impl ClassMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, AttributeError> {
        let a = AttributeMatrix::from_rows(rows)?;
        Ok(Self::from(&a))
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, y: usize) -> &[f64] {
        &self.data[y * self.dim..(y + 1) * self.dim]
    }

    pub(crate) fn validate(&self) -> Result<(), AttributeError> {
        if self.num_classes == 0 {
            return Err(AttributeError::NoClasses);
        }
        if self.dim == 0 {
            return Err(AttributeError::ZeroDimension { what: "class dim" });
        }
        if self.data.len() != self.num_classes * self.dim {
            return Err(AttributeError::DimensionMismatch {
                expected: self.num_classes * self.dim,
                found: self.data.len(),
            });
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(AttributeError::NonFinite { row: i / self.dim, col: i % self.dim });
        }
        Ok(())
    }
}

impl From<&AttributeMatrix> for ClassMatrix {
    fn from(a: &AttributeMatrix) -> Self {
        Self { num_classes: a.num_classes, dim: a.attr_dim, data: a.data.clone() }
    }
}

impl From<&AugmentedAttributeMatrix> for ClassMatrix {
    fn from(a: &AugmentedAttributeMatrix) -> Self {
        Self { num_classes: a.num_classes, dim: a.aug_dim(), data: a.data.clone() }
    }
}
