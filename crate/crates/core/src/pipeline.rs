//! End-to-end training and evaluation on a [`Dataset`].

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attributes::{augment_attributes, AttributeError, AttributeMatrix, ClassMatrix, HighOrderConfig};
use crate::data::{DataError, Dataset};
use crate::gzsl::{self, CalibrationError, Criterion, OperatingPoint, RectifyResult, ScoredSample};
use crate::network::{self, ErasePolarity, FeatureMap, NetworkError, NetworkParams, DEFAULT_DROPOUT};
use crate::optim::{self, CycleSchedule, EpochMetrics, LrMode, OptimError, SgdConfig, TrainState, TrainingSet};
use crate::search::{SearchSpace, TrialConfig};
use crate::seed;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Settings(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Attributes(#[from] AttributeError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Every knob of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub lr_max: f64,
    pub xi: f64,
    pub gamma: f64,
    pub use_hoa: bool,
    pub normalize_projection: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr_mode: LrMode,
    pub cycle_len: f64,
    pub cycle_mul: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub polarity: ErasePolarity,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let sgd = SgdConfig::default();
        TrainSettings {
            lr_max: sgd.lr_max,
            xi: 0.01,
            gamma: 1.0,
            use_hoa: false,
            normalize_projection: false,
            epochs: 30,
            batch_size: sgd.batch_size,
            seed: 0,
            lr_mode: LrMode::Cycling,
            cycle_len: 10.0,
            cycle_mul: 2.0,
            momentum: sgd.momentum,
            weight_decay: sgd.weight_decay,
            dropout: DEFAULT_DROPOUT,
            polarity: ErasePolarity::default(),
        }
    }
}

impl TrainSettings {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr_max: self.lr_max,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
        }
    }

    pub fn schedule(&self) -> Result<CycleSchedule, PipelineError> {
        Ok(CycleSchedule::new(self.lr_mode, self.cycle_len, self.cycle_mul)?)
    }

    /// Rejects `lr_max`, `xi` and (with HOA) `gamma` outside the search ranges.
    pub fn check_ranges(&self) -> Result<(), PipelineError> {
        let space = SearchSpace::default();
        let mut checks = vec![("lr_max", self.lr_max, space.lr_max), ("xi", self.xi, space.xi)];
        if self.use_hoa {
            checks.push(("gamma", self.gamma, space.gamma));
        }
        for (name, v, iv) in checks {
            if !iv.contains(v) {
                return Err(PipelineError::Settings(format!(
                    "{name} = {v} lies outside [{}, {}]; pass --allow-out-of-range to use it anyway",
                    iv.lo, iv.hi
                )));
            }
        }
        Ok(())
    }

    pub fn with_trial(&self, trial: &TrialConfig, epochs: usize, seed: u64) -> Self {
        TrainSettings { lr_max: trial.lr_max, xi: trial.xi, gamma: trial.gamma, epochs, seed, ..self.clone() }
    }
}

/// Plain attributes, or their high-order augmentation when `use_hoa` is set.
pub fn class_matrix(attrs: &AttributeMatrix, settings: &TrainSettings) -> Result<ClassMatrix, PipelineError> {
    if !settings.use_hoa {
        return Ok(ClassMatrix::from(attrs));
    }
    let cfg = HighOrderConfig {
        gamma: settings.gamma,
        seed: seed::derive(settings.seed, seed::STREAM_PROJECTION),
        normalize_rows: settings.normalize_projection,
    };
    Ok(ClassMatrix::from(&augment_attributes(attrs, &cfg)?))
}

pub fn initial_params(ds: &Dataset, settings: &TrainSettings) -> Result<NetworkParams, PipelineError> {
    let (k, _) = ds.shape().ok_or_else(|| PipelineError::Settings("dataset has no samples".into()))?;
    let mut p = NetworkParams::initialize(k, class_matrix(&ds.attributes, settings)?, settings.xi, settings.seed)?;
    p.dropout_rate = settings.dropout;
    p.polarity = settings.polarity;
    p.validate()?;
    Ok(p)
}

/// Train-role samples of the training classes, softmax over those classes.
pub fn training_set(ds: &Dataset) -> TrainingSet<'_> {
    let idx = ds.train_indices();
    TrainingSet {
        inputs: idx.iter().map(|&i| &ds.features[i]).collect(),
        labels: idx.iter().map(|&i| ds.labels[i]).collect(),
        classes: ds.split.training_classes(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub state: TrainState,
    pub metrics: Vec<EpochMetrics>,
}

/// Initializes from `settings.seed` and trains for `settings.epochs`,
/// reporting each epoch to `on_epoch`.
pub fn fit(
    ds: &Dataset,
    settings: &TrainSettings,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Trained, PipelineError> {
    let cfg = settings.sgd();
    cfg.validate()?;
    let mut state = TrainState::new(initial_params(ds, settings)?, settings.schedule()?);
    let data = training_set(ds);
    let mut metrics = Vec::with_capacity(settings.epochs);
    for _ in 0..settings.epochs {
        let m = optim::train_epoch(&data, &mut state, &cfg, settings.seed)?;
        if !m.loss.is_finite() {
            return Err(PipelineError::Settings(format!("training diverged at epoch {} (loss {})", m.epoch, m.loss)));
        }
        log::info!("epoch {} lr {:.3e} loss {:.4} seen acc {:.3}", m.epoch, m.lr, m.loss, m.seen_acc);
        on_epoch(&m);
        metrics.push(m);
    }
    Ok(Trained { state, metrics })
}

pub fn write_metrics<W: Write>(mut out: W, metrics: &[EpochMetrics]) -> Result<(), PipelineError> {
    for m in metrics {
        serde_json::to_writer(&mut out, m)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// What `train` writes: the settings it ran with and the final parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub settings: TrainSettings,
    pub epochs_run: usize,
    pub params: NetworkParams,
}

/// Output of the shared 3×3 stage: what both branches localize from, taken
/// before any erasing.
pub fn shared_features(params: &NetworkParams, s: &FeatureMap) -> Result<FeatureMap, PipelineError> {
    Ok(network::conv3x3(s, &params.shared)?)
}

/// Averaged-branch class scores for every sample in `indices`.
pub fn score_samples(params: &NetworkParams, ds: &Dataset, indices: &[usize]) -> Result<Vec<Vec<f64>>, PipelineError> {
    indices.iter().map(|&i| Ok(network::forward_eval(&ds.features[i], params)?.scores_avg)).collect()
}

/// Per-class top-1 accuracy when each sample is classified among `candidates`.
pub fn zsl_accuracy(
    params: &NetworkParams,
    ds: &Dataset,
    indices: &[usize],
    candidates: &[usize],
) -> Result<f64, PipelineError> {
    let scores = score_samples(params, ds, indices)?;
    let preds = scores.iter().map(|s| network::predict(s, candidates)).collect::<Result<Vec<_>, _>>()?;
    let truths: Vec<usize> = indices.iter().map(|&i| ds.labels[i]).collect();
    Ok(gzsl::per_class_accuracy(&preds, &truths, candidates)?)
}

/// Conventional zero-shot accuracy: unseen samples among unseen classes.
pub fn unseen_accuracy(params: &NetworkParams, ds: &Dataset) -> Result<f64, PipelineError> {
    zsl_accuracy(params, ds, &ds.unseen_indices(), &ds.split.unseen)
}

/// Validation accuracy used by the search: validation-class samples among
/// validation classes.
pub fn validation_accuracy(params: &NetworkParams, ds: &Dataset) -> Result<f64, PipelineError> {
    if ds.split.val.is_empty() {
        return Err(PipelineError::Settings("the split has no validation classes".into()));
    }
    zsl_accuracy(params, ds, &ds.val_indices(), &ds.split.val)
}

fn scored(
    params: &NetworkParams,
    ds: &Dataset,
    indices: &[usize],
    is_seen: impl Fn(usize) -> bool,
) -> Result<Vec<ScoredSample>, PipelineError> {
    let scores = score_samples(params, ds, indices)?;
    Ok(indices
        .iter()
        .zip(scores)
        .map(|(&i, scores)| ScoredSample { scores, true_label: ds.labels[i], from_seen: is_seen(ds.labels[i]) })
        .collect())
}

/// Outcome of rectified generalized zero-shot evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GzslReport {
    /// Where the offset was selected: `"validation"` or `"test"`.
    pub selected_on: String,
    pub selection: RectifyResult,
    pub test_uncalibrated: OperatingPoint,
    pub test_rectified: OperatingPoint,
}

/// Selects the offset on validation data and applies it frozen to the test
/// samples. Validation data are held-out samples of the training classes
/// plus the validation classes posing as unseen; without validation classes
/// the offset is selected on the test curve itself. Returns the report and
/// the test curve.
pub fn gzsl_evaluate(
    params: &NetworkParams,
    ds: &Dataset,
    criterion: Criterion,
) -> Result<(GzslReport, gzsl::CalibrationCurve), PipelineError> {
    let seen = ds.split.seen.clone();
    let unseen = ds.split.unseen.clone();
    let test = scored(params, ds, &ds.test_indices(), |y| seen.contains(&y))?;
    let test_curve = gzsl::sweep(&test, &seen, &unseen)?;

    let train_classes = ds.split.training_classes();
    let val_idx: Vec<usize> = ds.seen_holdout_indices().into_iter().chain(ds.val_indices()).collect();
    let (selected_on, selection) = if ds.split.val.is_empty() || ds.seen_holdout_indices().is_empty() {
        log::warn!("no validation data for offset selection; selecting on the test curve");
        ("test", gzsl::select_offset(&test_curve, criterion)?)
    } else {
        let others: Vec<usize> = (0..ds.attributes.num_classes()).filter(|c| !train_classes.contains(c)).collect();
        let val = scored(params, ds, &val_idx, |y| train_classes.contains(&y))?;
        let curve = gzsl::sweep(&val, &train_classes, &others)?;
        ("validation", gzsl::select_offset(&curve, criterion)?)
    };
    let report = GzslReport {
        selected_on: selected_on.to_string(),
        selection,
        test_uncalibrated: gzsl::eval_at_offset(&test, &seen, &unseen, 0.0)?,
        test_rectified: gzsl::eval_at_offset(&test, &seen, &unseen, selection.offset)?,
    };
    Ok((report, test_curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticSpec};

    fn small() -> Dataset {
        let mut spec = SyntheticSpec::new(6, 10, 4, 5, 4, 0.1, 3);
        spec.num_val = 1;
        gen_synthetic(&spec).unwrap().0
    }

    #[test]
    fn zero_epochs_keeps_the_initialization() {
        let ds = small();
        let settings = TrainSettings { epochs: 0, seed: 5, ..Default::default() };
        let t = fit(&ds, &settings, |_| {}).unwrap();
        assert!(t.metrics.is_empty());
        assert_eq!(t.state.params, initial_params(&ds, &settings).unwrap());
    }

    #[test]
    fn training_is_deterministic() {
        let ds = small();
        let settings = TrainSettings { epochs: 2, batch_size: 8, seed: 1, ..Default::default() };
        let a = fit(&ds, &settings, |_| {}).unwrap();
        let b = fit(&ds, &settings, |_| {}).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.metrics.len(), 2);
    }

    #[test]
    fn hoa_widens_the_class_matrix() {
        let ds = small();
        let plain = class_matrix(&ds.attributes, &TrainSettings::default()).unwrap();
        let hoa = class_matrix(&ds.attributes, &TrainSettings { use_hoa: true, gamma: 2.0, ..Default::default() }).unwrap();
        assert_eq!(plain.dim(), 4);
        assert_eq!(hoa.dim(), 8 + 4);
        assert_eq!(&hoa.row(2)[8..], ds.attributes.row(2));
    }

    #[test]
    fn range_checks() {
        assert!(TrainSettings { lr_max: 0.5, ..Default::default() }.check_ranges().is_err());
        assert!(TrainSettings { xi: 0.0, ..Default::default() }.check_ranges().is_err());
        assert!(TrainSettings { gamma: 9.0, ..Default::default() }.check_ranges().is_ok());
        assert!(TrainSettings { gamma: 9.0, use_hoa: true, ..Default::default() }.check_ranges().is_err());
        TrainSettings::default().check_ranges().unwrap();
    }

    #[test]
    fn settings_json_fills_defaults() {
        let s: TrainSettings = serde_json::from_str(r#"{"lr_max": 0.005, "use_hoa": true}"#).unwrap();
        assert_eq!(s, TrainSettings { lr_max: 0.005, use_hoa: true, ..Default::default() });
    }

    #[test]
    fn gzsl_report_is_consistent() {
        let ds = small();
        let t = fit(&ds, &TrainSettings { epochs: 1, batch_size: 8, ..Default::default() }, |_| {}).unwrap();
        let (report, curve) = gzsl_evaluate(&t.state.params, &ds, Criterion::MaxH).unwrap();
        assert_eq!(report.selected_on, "validation");
        assert!(!curve.is_empty());
        assert_eq!(report.test_rectified.offset, report.selection.offset);
        assert_eq!(report.test_uncalibrated.offset, 0.0);
    }

    #[test]
    fn checkpoint_round_trips_exactly() {
        let ds = small();
        let settings = TrainSettings { epochs: 1, batch_size: 8, ..Default::default() };
        let t = fit(&ds, &settings, |_| {}).unwrap();
        let ck = Checkpoint { settings, epochs_run: 1, params: t.state.params };
        let back: Checkpoint = serde_json::from_str(&serde_json::to_string(&ck).unwrap()).unwrap();
        assert_eq!(back, ck);
    }
}
