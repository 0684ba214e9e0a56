//! Generalized zero-shot evaluation and seen-score rectification.
//!
//! In the generalized setting every test image competes against all classes,
//! and seen classes dominate because the head was only trained on them. A
//! single offset subtracted from every seen-class score moves predictions
//! from seen to unseen classes one sample at a time: sample `i` flips exactly
//! when the offset passes its margin `max_seen(i) − max_unseen(i)`. Sweeping
//! the offset over the sorted margins therefore traces the whole
//! seen-accuracy / unseen-accuracy trade-off curve.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CalibrationError {
    #[error("class set is empty")]
    EmptyClassSet,
    #[error("no samples given")]
    NoSamples,
    #[error("predictions and truths differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("class {0} is in both the seen and unseen sets")]
    Overlap(usize),
    #[error("seen and unseen sets cover {covered} classes, scores have {scores}")]
    Coverage { covered: usize, scores: usize },
    #[error("sample {0}: {1}")]
    BadSample(usize, String),
    #[error("no {0}-origin samples to measure accuracy on")]
    MissingOrigin(&'static str),
    #[error("calibration curve is empty")]
    EmptyCurve,
    #[error("cannot write curve: {0}")]
    Io(String),
}

/// Scores over all classes for one evaluation sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub scores: Vec<f64>,
    pub true_label: usize,
    pub from_seen: bool,
}

/// Mean over classes of per-class top-1 accuracy. Classes of `class_set`
/// without samples are skipped with a warning.
pub fn per_class_accuracy(
    predictions: &[usize],
    truths: &[usize],
    class_set: &[usize],
) -> Result<f64, CalibrationError> {
    if class_set.is_empty() {
        return Err(CalibrationError::EmptyClassSet);
    }
    if predictions.len() != truths.len() {
        return Err(CalibrationError::LengthMismatch(predictions.len(), truths.len()));
    }
    let mut counts: BTreeMap<usize, (usize, usize)> = class_set.iter().map(|&c| (c, (0, 0))).collect();
    for (&p, &t) in predictions.iter().zip(truths) {
        if let Some((correct, total)) = counts.get_mut(&t) {
            *total += 1;
            if p == t {
                *correct += 1;
            }
        }
    }
    let mut sum = 0.0;
    let mut used = 0;
    for (class, (correct, total)) in counts {
        if total == 0 {
            log::warn!("class {class} has no samples; excluded from per-class accuracy");
            continue;
        }
        sum += correct as f64 / total as f64;
        used += 1;
    }
    Ok(if used == 0 { 0.0 } else { sum / used as f64 })
}

/// `2·tr·te / (tr + te)`, zero when both are zero.
pub fn harmonic(tr: f64, te: f64) -> f64 {
    if tr + te == 0.0 {
        0.0
    } else {
        2.0 * tr * te / (tr + te)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub offset: f64,
    pub tr: f64,
    pub te: f64,
    pub h: f64,
}

/// Best seen and unseen class per sample, precomputed for fast sweeps.
struct Prepared {
    seen_best: Vec<(usize, f64)>,
    unseen_best: Vec<(usize, f64)>,
    truths: Vec<usize>,
    seen_origin: Vec<usize>,
    unseen_origin: Vec<usize>,
    seen_classes: Vec<usize>,
    unseen_classes: Vec<usize>,
}

fn best_of(scores: &[f64], classes: &[usize]) -> (usize, f64) {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for &c in classes {
        let v = scores[c];
        if v > best.1 || (v == best.1 && c < best.0) {
            best = (c, v);
        }
    }
    best
}

fn prepare(samples: &[ScoredSample], seen: &[usize], unseen: &[usize]) -> Result<Prepared, CalibrationError> {
    let first = samples.first().ok_or(CalibrationError::NoSamples)?;
    let n_classes = first.scores.len();
    if seen.is_empty() || unseen.is_empty() {
        return Err(CalibrationError::EmptyClassSet);
    }
    if let Some(&c) = unseen.iter().find(|c| seen.contains(c)) {
        return Err(CalibrationError::Overlap(c));
    }
    let mut covered = vec![false; n_classes];
    for &c in seen.iter().chain(unseen) {
        if c >= n_classes {
            return Err(CalibrationError::Coverage { covered: c + 1, scores: n_classes });
        }
        covered[c] = true;
    }
    let covered_count = covered.iter().filter(|&&b| b).count();
    if covered_count != n_classes {
        return Err(CalibrationError::Coverage { covered: covered_count, scores: n_classes });
    }

    let mut prep = Prepared {
        seen_best: Vec::with_capacity(samples.len()),
        unseen_best: Vec::with_capacity(samples.len()),
        truths: Vec::with_capacity(samples.len()),
        seen_origin: vec![],
        unseen_origin: vec![],
        seen_classes: vec![],
        unseen_classes: vec![],
    };
    for (i, s) in samples.iter().enumerate() {
        if s.scores.len() != n_classes {
            return Err(CalibrationError::BadSample(i, format!("{} scores, expected {n_classes}", s.scores.len())));
        }
        if s.scores.iter().any(|v| !v.is_finite()) {
            return Err(CalibrationError::BadSample(i, "non-finite score".into()));
        }
        if s.true_label >= n_classes || seen.contains(&s.true_label) != s.from_seen {
            return Err(CalibrationError::BadSample(
                i,
                format!("label {} inconsistent with from_seen = {}", s.true_label, s.from_seen),
            ));
        }
        prep.seen_best.push(best_of(&s.scores, seen));
        prep.unseen_best.push(best_of(&s.scores, unseen));
        prep.truths.push(s.true_label);
        if s.from_seen {
            prep.seen_origin.push(i);
        } else {
            prep.unseen_origin.push(i);
        }
    }
    if prep.seen_origin.is_empty() {
        return Err(CalibrationError::MissingOrigin("seen"));
    }
    if prep.unseen_origin.is_empty() {
        return Err(CalibrationError::MissingOrigin("unseen"));
    }
    let present = |idx: &[usize]| {
        let mut c: Vec<usize> = idx.iter().map(|&i| prep.truths[i]).collect();
        c.sort_unstable();
        c.dedup();
        c
    };
    prep.seen_classes = present(&prep.seen_origin);
    prep.unseen_classes = present(&prep.unseen_origin);
    Ok(prep)
}

impl Prepared {
    fn predict(&self, i: usize, offset: f64) -> usize {
        let (s, vs) = self.seen_best[i];
        let (u, vu) = self.unseen_best[i];
        let adjusted = vs - offset;
        if adjusted > vu || (adjusted == vu && s < u) {
            s
        } else {
            u
        }
    }

    fn point(&self, offset: f64) -> Result<OperatingPoint, CalibrationError> {
        let acc = |idx: &[usize], classes: &[usize]| {
            let preds: Vec<usize> = idx.iter().map(|&i| self.predict(i, offset)).collect();
            let truths: Vec<usize> = idx.iter().map(|&i| self.truths[i]).collect();
            per_class_accuracy(&preds, &truths, classes)
        };
        let tr = acc(&self.seen_origin, &self.seen_classes)?;
        let te = acc(&self.unseen_origin, &self.unseen_classes)?;
        Ok(OperatingPoint { offset, tr, te, h: harmonic(tr, te) })
    }

    fn margins(&self) -> Vec<f64> {
        self.seen_best.iter().zip(&self.unseen_best).map(|(s, u)| s.1 - u.1).collect()
    }
}

/// Accuracy on seen-origin (`tr`) and unseen-origin (`te`) samples after
/// subtracting `offset` from every seen-class score; prediction is the
/// argmax over all classes, ties to the lowest class index.
pub fn eval_at_offset(
    samples: &[ScoredSample],
    seen: &[usize],
    unseen: &[usize],
    offset: f64,
) -> Result<OperatingPoint, CalibrationError> {
    prepare(samples, seen, unseen)?.point(offset)
}

/// Padding between the extreme margins and the sentinel offsets.
pub const SENTINEL_PAD: f64 = 1.0;

fn candidates_from_margins(mut margins: Vec<f64>) -> Vec<f64> {
    margins.sort_by(f64::total_cmp);
    margins.dedup();
    let mut out = Vec::with_capacity(margins.len() + 2);
    out.push(margins[0] - SENTINEL_PAD);
    out.extend_from_slice(&margins);
    out.extend(margins.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    out.push(margins[margins.len() - 1] + SENTINEL_PAD);
    out.push(0.0);
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

/// Every distinct flip margin, the midpoint between consecutive margins, a
/// sentinel beyond each end, and `0` itself, ascending. Exactly at a margin
/// the score tie is resolved by class index, which can be a state of its own.
pub fn candidate_offsets(
    samples: &[ScoredSample],
    seen: &[usize],
    unseen: &[usize],
) -> Result<Vec<f64>, CalibrationError> {
    Ok(candidates_from_margins(prepare(samples, seen, unseen)?.margins()))
}

/// Distinct per-sample flip margins, ascending.
pub fn flip_margins(samples: &[ScoredSample], seen: &[usize], unseen: &[usize]) -> Result<Vec<f64>, CalibrationError> {
    let mut m = prepare(samples, seen, unseen)?.margins();
    m.sort_by(f64::total_cmp);
    m.dedup();
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub offsets: Vec<f64>,
    pub tr_acc: Vec<f64>,
    pub te_acc: Vec<f64>,
    pub h: Vec<f64>,
}

impl CalibrationCurve {
    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn point(&self, i: usize) -> OperatingPoint {
        OperatingPoint { offset: self.offsets[i], tr: self.tr_acc[i], te: self.te_acc[i], h: self.h[i] }
    }

    /// `offset,tr,te,H` rows with a header line.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), CalibrationError> {
        let io = |e: csv::Error| CalibrationError::Io(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["offset", "tr", "te", "H"]).map_err(io)?;
        for i in 0..self.len() {
            let p = self.point(i);
            w.write_record([p.offset, p.tr, p.te, p.h].map(|v| v.to_string())).map_err(io)?;
        }
        w.flush().map_err(|e| CalibrationError::Io(e.to_string()))
    }
}

/// The full trade-off curve evaluated at [`candidate_offsets`].
pub fn sweep(samples: &[ScoredSample], seen: &[usize], unseen: &[usize]) -> Result<CalibrationCurve, CalibrationError> {
    let prep = prepare(samples, seen, unseen)?;
    let offsets = candidates_from_margins(prep.margins());
    let mut curve = CalibrationCurve {
        offsets: Vec::with_capacity(offsets.len()),
        tr_acc: Vec::with_capacity(offsets.len()),
        te_acc: Vec::with_capacity(offsets.len()),
        h: Vec::with_capacity(offsets.len()),
    };
    for offset in offsets {
        let p = prep.point(offset)?;
        curve.offsets.push(p.offset);
        curve.tr_acc.push(p.tr);
        curve.te_acc.push(p.te);
        curve.h.push(p.h);
    }
    Ok(curve)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// Largest harmonic mean; ties to the smallest offset.
    #[default]
    MaxH,
    /// Smallest `|tr − te|`; ties to the larger harmonic mean.
    Equalize,
}

impl std::str::FromStr for Criterion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "max_h" | "max-h" => Ok(Criterion::MaxH),
            "equalize" => Ok(Criterion::Equalize),
            other => Err(format!("unknown criterion {other:?} (expected max_h or equalize)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RectifyResult {
    pub offset: f64,
    pub tr: f64,
    pub te: f64,
    pub h: f64,
    pub criterion: Criterion,
}

pub fn select_offset(curve: &CalibrationCurve, criterion: Criterion) -> Result<RectifyResult, CalibrationError> {
    if curve.is_empty() {
        return Err(CalibrationError::EmptyCurve);
    }
    let mut best = 0;
    for i in 1..curve.len() {
        let better = match criterion {
            Criterion::MaxH => curve.h[i] > curve.h[best],
            Criterion::Equalize => {
                let gap = (curve.tr_acc[i] - curve.te_acc[i]).abs();
                let best_gap = (curve.tr_acc[best] - curve.te_acc[best]).abs();
                gap < best_gap || (gap == best_gap && curve.h[i] > curve.h[best])
            }
        };
        if better {
            best = i;
        }
    }
    let p = curve.point(best);
    Ok(RectifyResult { offset: p.offset, tr: p.tr, te: p.te, h: p.h, criterion })
}
