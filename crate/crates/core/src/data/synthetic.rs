//! Planted synthetic datasets.
//!
//! Channel `k` belongs to attribute `k mod attr_dim`. A sample of class `y`
//! carries, for every active attribute `c` (`a_y[c] > 0`), a Gaussian bump of
//! height `a_y[c]` centred on the planted hot spot of `(y, c)` in every
//! channel of bank `c`, plus i.i.d. `N(0, noise_sigma²)` noise. Without noise
//! the map from attributes to features is linear, so the bank-summing 1×1
//! weights ([`generating_weights`]) recover `a_y` up to a positive factor.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, SampleRole, SplitSpec};
use crate::attributes::AttributeMatrix;
use crate::network::{ConvWeights, FeatureMap};
use crate::seed;

fn default_unseen() -> usize {
    2
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_bump_sigma() -> f64 {
    1.0
}

fn default_density() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub channels: usize,
    pub size: usize,
    pub attr_dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// The last `num_unseen` classes are unseen.
    #[serde(default = "default_unseen")]
    pub num_unseen: usize,
    /// The `num_val` classes just before the unseen ones validate.
    #[serde(default)]
    pub num_val: usize,
    /// Share of each seen class's samples held out for testing.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_bump_sigma")]
    pub bump_sigma: f64,
    /// Probability that a generated attribute is active.
    #[serde(default = "default_density")]
    pub density: f64,
    /// Explicit class attributes; generated from the seed (unit-length rows)
    /// when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<Vec<Vec<f64>>>,
    /// Explicit hot spots `[class][attribute] = [row, col]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hot_spots: Option<Vec<Vec<[usize; 2]>>>,
}

impl SyntheticSpec {
    /// A spec with the optional fields at their defaults.
    pub fn new(
        num_classes: usize,
        samples_per_class: usize,
        channels: usize,
        size: usize,
        attr_dim: usize,
        noise_sigma: f64,
        seed: u64,
    ) -> Self {
        Self {
            num_classes,
            samples_per_class,
            channels,
            size,
            attr_dim,
            noise_sigma,
            seed,
            num_unseen: default_unseen(),
            num_val: 0,
            test_fraction: default_test_fraction(),
            bump_sigma: default_bump_sigma(),
            density: default_density(),
            attributes: None,
            hot_spots: None,
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Invalid(m));
        if self.num_classes == 0 || self.samples_per_class == 0 || self.size == 0 || self.attr_dim == 0 {
            return bad("num_classes, samples_per_class, size and attr_dim must be >= 1".into());
        }
        if self.channels < self.attr_dim {
            return bad(format!(
                "channels ({}) must be >= attr_dim ({}) so every attribute owns a channel",
                self.channels, self.attr_dim
            ));
        }
        if self.num_unseen + self.num_val >= self.num_classes {
            return bad("at least one training class must remain after unseen and validation classes".into());
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad(format!("test_fraction must lie in [0, 1), got {}", self.test_fraction));
        }
        if !(self.bump_sigma.is_finite() && self.bump_sigma > 0.0) {
            return bad(format!("bump_sigma must be > 0, got {}", self.bump_sigma));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return bad(format!("density must lie in (0, 1], got {}", self.density));
        }
        if let Some(a) = &self.attributes {
            if a.len() != self.num_classes || a.iter().any(|r| r.len() != self.attr_dim) {
                return bad("explicit attributes must be num_classes x attr_dim".into());
            }
        }
        if let Some(spots) = &self.hot_spots {
            if spots.len() != self.num_classes || spots.iter().any(|r| r.len() != self.attr_dim) {
                return bad("explicit hot spots must be num_classes x attr_dim".into());
            }
            if let Some(p) = spots.iter().flatten().find(|p| p[0] >= self.size || p[1] >= self.size) {
                return bad(format!("hot spot {p:?} lies outside the {0}x{0} map", self.size));
            }
        }
        Ok(())
    }
}

/// What the generator planted, for oracle checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub attributes: Vec<Vec<f64>>,
    /// `[class][attribute] = [row, col]`.
    pub hot_spots: Vec<Vec<[usize; 2]>>,
    /// Attribute owning each channel.
    pub channel_attribute: Vec<usize>,
}

fn random_attributes(spec: &SyntheticSpec, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..spec.num_classes)
        .map(|_| {
            let mut row: Vec<f64> = (0..spec.attr_dim)
                .map(|_| if rng.random_bool(spec.density) { rng.random_range(0.2..1.0) } else { 0.0 })
                .collect();
            if row.iter().all(|&v| v == 0.0) {
                let c = rng.random_range(0..spec.attr_dim);
                row[c] = rng.random_range(0.2..1.0);
            }
            // unit rows: no class can outscore another on its own features
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
            row
        })
        .collect()
}

/// Builds the dataset (class-major sample order) and its ground truth.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, GroundTruth), DataError> {
    spec.validate()?;
    let mut rng = seed::rng(spec.seed);
    let attributes = match &spec.attributes {
        Some(a) => a.clone(),
        None => random_attributes(spec, &mut rng),
    };
    let hot_spots = match &spec.hot_spots {
        Some(h) => h.clone(),
        None => (0..spec.num_classes)
            .map(|_| {
                (0..spec.attr_dim).map(|_| [rng.random_range(0..spec.size), rng.random_range(0..spec.size)]).collect()
            })
            .collect(),
    };
    let channel_attribute: Vec<usize> = (0..spec.channels).map(|k| k % spec.attr_dim).collect();

    let h = spec.size;
    let bump = |center: [usize; 2], r: usize, c: usize| {
        let dr = r as f64 - center[0] as f64;
        let dc = c as f64 - center[1] as f64;
        (-(dr * dr + dc * dc) / (2.0 * spec.bump_sigma * spec.bump_sigma)).exp()
    };
    // noise-free template per class
    let templates: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|y| {
            let mut t = vec![0.0; spec.channels * h * h];
            for (k, &c) in channel_attribute.iter().enumerate() {
                let a = attributes[y][c];
                if a <= 0.0 {
                    continue;
                }
                for r in 0..h {
                    for col in 0..h {
                        t[(k * h + r) * h + col] += a * bump(hot_spots[y][c], r, col);
                    }
                }
            }
            t
        })
        .collect();

    let noise = (spec.noise_sigma > 0.0).then(|| Normal::new(0.0, spec.noise_sigma).expect("valid sigma"));
    let n_test = (spec.test_fraction * spec.samples_per_class as f64).round() as usize;
    let first_unseen = spec.num_classes - spec.num_unseen;
    let first_val = first_unseen - spec.num_val;

    let mut features = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    let mut labels = Vec::with_capacity(features.capacity());
    let mut roles = Vec::with_capacity(features.capacity());
    for (y, template) in templates.iter().enumerate() {
        for i in 0..spec.samples_per_class {
            let mut data = template.clone();
            if let Some(noise) = &noise {
                data.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
            }
            features.push(FeatureMap::new(spec.channels, h, data).map_err(|e| DataError::Invalid(e.to_string()))?);
            labels.push(y);
            let held_out = y >= first_unseen || i >= spec.samples_per_class - n_test;
            roles.push(if held_out { SampleRole::Test } else { SampleRole::Train });
        }
    }
    let split = SplitSpec {
        seen: (0..first_unseen).collect(),
        unseen: (first_unseen..spec.num_classes).collect(),
        val: (first_val..first_unseen).collect(),
    };
    let dataset = Dataset { features, labels, roles, attributes: AttributeMatrix::from_rows(attributes.clone())?, split };
    dataset.validate()?;
    Ok((dataset, GroundTruth { attributes, hot_spots, channel_attribute }))
}

/// 1×1 weights that sum each attribute's channel bank: `W[k][c] = 1` iff
/// channel `k` belongs to attribute `c`.
pub fn generating_weights(truth: &GroundTruth) -> ConvWeights {
    let d = truth.attributes.first().map_or(0, Vec::len);
    let mut w = ConvWeights::zeros(truth.channel_attribute.len(), d);
    for (k, &c) in truth.channel_attribute.iter().enumerate() {
        w.set(k, c, 1.0);
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attributes::ClassMatrix;
    use crate::network::{aggregate, class_scores, localize, max_pool5, predict};

    #[test]
    fn generation_is_seeded() {
        let spec = SyntheticSpec::new(4, 5, 6, 7, 3, 0.1, 42);
        let (a, ta) = gen_synthetic(&spec).unwrap();
        let (b, tb) = gen_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = gen_synthetic(&SyntheticSpec { seed: 43, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn orthogonal_classes_rank_first_under_generating_weights() {
        let mut spec = SyntheticSpec::new(2, 6, 4, 6, 2, 0.0, 7);
        spec.num_unseen = 0;
        spec.attributes = Some(vec![vec![1.0, 0.0], vec![0.0, 0.8]]);
        let (ds, truth) = gen_synthetic(&spec).unwrap();
        let w = generating_weights(&truth);
        let classes = ClassMatrix::from(&ds.attributes);
        for (s, &y) in ds.features.iter().zip(&ds.labels) {
            let (pooled, _) = max_pool5(&localize(s, &w).unwrap());
            let scores = class_scores(&aggregate(&pooled), &classes).unwrap();
            assert_eq!(predict(&scores, &[0, 1]).unwrap(), y);
            assert!(scores[y] > scores[1 - y]);
        }
    }

    #[test]
    fn split_roles_and_layout() {
        let mut spec = SyntheticSpec::new(6, 10, 4, 5, 4, 0.0, 1);
        spec.num_val = 1;
        let (ds, _) = gen_synthetic(&spec).unwrap();
        assert_eq!(ds.split.seen, vec![0, 1, 2, 3]);
        assert_eq!(ds.split.unseen, vec![4, 5]);
        assert_eq!(ds.split.val, vec![3]);
        assert_eq!(ds.train_indices().len(), 3 * 8);
        assert_eq!(ds.val_indices().len(), 10);
        assert_eq!(ds.seen_holdout_indices().len(), 3 * 2);
        assert_eq!(ds.test_indices().len(), 3 * 2 + 20);
        assert!(ds.unseen_indices().iter().all(|&i| ds.roles[i] == SampleRole::Test));
    }

    #[test]
    fn spec_inconsistencies_are_errors() {
        assert!(gen_synthetic(&SyntheticSpec::new(3, 2, 2, 5, 3, 0.0, 1)).is_err());
        assert!(gen_synthetic(&SyntheticSpec::new(2, 2, 4, 5, 3, 0.0, 1)).is_err());
        let mut spec = SyntheticSpec::new(3, 2, 4, 5, 2, 0.0, 1);
        spec.num_unseen = 1;
        spec.hot_spots = Some(vec![vec![[0, 0], [5, 0]]; 3]);
        assert!(gen_synthetic(&spec).is_err());
    }
}
