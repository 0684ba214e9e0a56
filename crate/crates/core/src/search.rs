//! Staged random hyperparameter search.
//!
//! A wide first stage samples many configurations and trains each briefly;
//! every later stage keeps the best few of the previous one and trains them
//! longer. Trial seeds depend only on the master seed and the configuration
//! index, so trials can run in any order on any number of threads.

use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid search space: {0}")]
    Space(String),
    #[error("invalid stage plan: {0}")]
    Plan(String),
    #[error("count must be at least 1")]
    ZeroCount,
    #[error("audit log: {0}")]
    Audit(String),
    #[error("cannot build worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    /// Sampled log-uniformly.
    pub lr_max: Interval,
    /// Sampled log-uniformly.
    pub xi: Interval,
    /// Sampled uniformly.
    pub gamma: Interval,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            lr_max: Interval::new(1e-4, 1e-2),
            xi: Interval::new(1e-3, 1e-1),
            gamma: Interval::new(0.3, 4.0),
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<(), SearchError> {
        for (name, iv, log) in [("lr_max", self.lr_max, true), ("xi", self.xi, true), ("gamma", self.gamma, false)] {
            if !(iv.lo.is_finite() && iv.hi.is_finite() && iv.lo < iv.hi) {
                return Err(SearchError::Space(format!("{name}: need lo < hi, got [{}, {}]", iv.lo, iv.hi)));
            }
            if log && iv.lo <= 0.0 {
                return Err(SearchError::Space(format!("{name}: log-uniform bounds must be positive")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, c: &TrialConfig) -> bool {
        self.lr_max.contains(c.lr_max) && self.xi.contains(c.xi) && self.gamma.contains(c.gamma)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub lr_max: f64,
    pub xi: f64,
    pub gamma: f64,
}

fn log_uniform(rng: &mut impl Rng, iv: Interval) -> f64 {
    rng.random_range(iv.lo.ln()..iv.hi.ln()).exp().clamp(iv.lo, iv.hi)
}

pub fn sample_configs(space: &SearchSpace, count: usize, seed_value: u64) -> Result<Vec<TrialConfig>, SearchError> {
    space.validate()?;
    if count == 0 {
        return Err(SearchError::ZeroCount);
    }
    let mut rng = seed::rng(seed::derive(seed_value, seed::STREAM_SAMPLE));
    Ok((0..count)
        .map(|_| TrialConfig {
            lr_max: log_uniform(&mut rng, space.lr_max),
            xi: log_uniform(&mut rng, space.xi),
            gamma: rng.random_range(space.gamma.lo..space.gamma.hi),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub configs: usize,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stages: Vec<Stage>,
}

impl Default for StagePlan {
    fn default() -> Self {
        StagePlan {
            stages: vec![
                Stage { configs: 100, epochs: 1 },
                Stage { configs: 10, epochs: 10 },
                Stage { configs: 1, epochs: 30 },
            ],
        }
    }
}

impl StagePlan {
    pub fn validate(&self) -> Result<(), SearchError> {
        if self.stages.is_empty() {
            return Err(SearchError::Plan("no stages".into()));
        }
        if let Some(s) = self.stages.iter().find(|s| s.configs == 0 || s.epochs == 0) {
            return Err(SearchError::Plan(format!("stage {}:{} must have positive counts", s.configs, s.epochs)));
        }
        if self.stages.windows(2).any(|w| w[1].configs > w[0].configs) {
            return Err(SearchError::Plan("config counts must not increase across stages".into()));
        }
        Ok(())
    }

    pub fn total_trials(&self) -> usize {
        self.stages.iter().map(|s| s.configs).sum()
    }

    pub fn total_trial_epochs(&self) -> usize {
        self.stages.iter().map(|s| s.configs * s.epochs).sum()
    }
}

/// `"100:1,10:10,1:30"` (configs:epochs per stage).
impl FromStr for StagePlan {
    type Err = SearchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let stages = s
            .split(',')
            .map(|part| {
                let (c, e) = part
                    .trim()
                    .split_once(':')
                    .ok_or_else(|| SearchError::Plan(format!("stage {part:?} is not configs:epochs")))?;
                let num = |x: &str| {
                    x.trim().parse::<usize>().map_err(|_| SearchError::Plan(format!("bad number {x:?} in {part:?}")))
                };
                Ok(Stage { configs: num(c)?, epochs: num(e)? })
            })
            .collect::<Result<Vec<_>, SearchError>>()?;
        let plan = StagePlan { stages };
        plan.validate()?;
        Ok(plan)
    }
}

/// Trains a configuration for `epochs` from `seed` and returns its
/// validation accuracy in `[0, 1]`.
pub trait Evaluator: Sync {
    fn evaluate(&self, config: &TrialConfig, epochs: usize, seed: u64) -> Result<f64, String>;
}

impl<F> Evaluator for F
where
    F: Fn(&TrialConfig, usize, u64) -> Result<f64, String> + Sync,
{
    fn evaluate(&self, config: &TrialConfig, epochs: usize, seed: u64) -> Result<f64, String> {
        self(config, epochs, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub stage: usize,
    pub config_index: usize,
    pub config: TrialConfig,
    pub accuracy: f64,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn trial_seed(master_seed: u64, config_index: usize) -> u64 {
    seed::derive(seed::derive(master_seed, seed::STREAM_TRIAL), config_index as u64)
}

/// Accuracy descending, then config index ascending.
pub fn rank(results: &mut [TrialResult]) {
    results.sort_by(|a, b| b.accuracy.total_cmp(&a.accuracy).then(a.config_index.cmp(&b.config_index)));
}

fn run_trial(
    stage: usize,
    (config_index, config): (usize, TrialConfig),
    epochs: usize,
    evaluator: &dyn Evaluator,
    master_seed: u64,
) -> TrialResult {
    let seed = trial_seed(master_seed, config_index);
    let (accuracy, error) = match evaluator.evaluate(&config, epochs, seed) {
        Ok(a) if a.is_finite() && (0.0..=1.0).contains(&a) => (a, None),
        Ok(a) => (0.0, Some(format!("evaluator returned {a}, outside [0, 1]"))),
        Err(e) => (0.0, Some(e)),
    };
    if let Some(e) = &error {
        log::warn!("stage {stage} trial {config_index} failed: {e}");
    }
    TrialResult { stage, config_index, config, accuracy, epochs, seed, error }
}

/// Evaluates every candidate (on up to `jobs` threads) and ranks the results.
/// A failing trial scores 0 and carries an error note.
pub fn run_stage(
    stage: usize,
    candidates: &[(usize, TrialConfig)],
    epochs: usize,
    evaluator: &dyn Evaluator,
    master_seed: u64,
    jobs: usize,
) -> Result<Vec<TrialResult>, SearchError> {
    let mut results: Vec<TrialResult> = if jobs <= 1 {
        candidates.iter().map(|&c| run_trial(stage, c, epochs, evaluator, master_seed)).collect()
    } else {
        let pool =
            rayon::ThreadPoolBuilder::new().num_threads(jobs).build().map_err(|e| SearchError::Pool(e.to_string()))?;
        pool.install(|| candidates.par_iter().map(|&c| run_trial(stage, c, epochs, evaluator, master_seed)).collect())
    };
    rank(&mut results);
    Ok(results)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best_index: usize,
    pub best: TrialConfig,
    pub final_result: TrialResult,
    /// Every trial, stage by stage, each stage in ranked order.
    pub audit: Vec<TrialResult>,
}

pub fn search(
    space: &SearchSpace,
    plan: &StagePlan,
    evaluator: &dyn Evaluator,
    master_seed: u64,
    jobs: usize,
) -> Result<SearchOutcome, SearchError> {
    plan.validate()?;
    let configs = sample_configs(space, plan.stages[0].configs, master_seed)?;
    let mut candidates: Vec<(usize, TrialConfig)> = configs.into_iter().enumerate().collect();
    let mut audit = Vec::with_capacity(plan.total_trials());
    let mut ranked = Vec::new();
    for (s, stage) in plan.stages.iter().enumerate() {
        candidates.truncate(stage.configs);
        log::info!("stage {s}: {} configs x {} epochs", candidates.len(), stage.epochs);
        ranked = run_stage(s, &candidates, stage.epochs, evaluator, master_seed, jobs)?;
        audit.extend(ranked.iter().cloned());
        candidates = ranked.iter().map(|r| (r.config_index, r.config)).collect();
    }
    let final_result = ranked.into_iter().next().expect("validated plan has a non-empty last stage");
    Ok(SearchOutcome { best_index: final_result.config_index, best: final_result.config, final_result, audit })
}

pub fn write_audit<W: Write>(mut out: W, audit: &[TrialResult]) -> std::io::Result<()> {
    for r in audit {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_audit<R: BufRead>(input: R) -> Result<Vec<TrialResult>, SearchError> {
    input
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|(i, line)| {
            let line = line.map_err(|e| SearchError::Audit(e.to_string()))?;
            serde_json::from_str(&line).map_err(|e| SearchError::Audit(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// Re-ranks the last stage recorded in an audit log and returns its winner.
pub fn winner_from_audit(audit: &[TrialResult]) -> Result<TrialResult, SearchError> {
    let last = audit.iter().map(|r| r.stage).max().ok_or_else(|| SearchError::Audit("empty log".into()))?;
    let mut final_stage: Vec<TrialResult> = audit.iter().filter(|r| r.stage == last).cloned().collect();
    rank(&mut final_stage);
    Ok(final_stage.swap_remove(0))
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn samples_stay_in_range_and_repeat() {
        let space = SearchSpace::default();
        let a = sample_configs(&space, 100, 5).unwrap();
        assert_eq!(a.len(), 100);
        assert!(a.iter().all(|c| space.contains(c)));
        assert_eq!(a, sample_configs(&space, 100, 5).unwrap());
        assert_ne!(a, sample_configs(&space, 100, 6).unwrap());
        assert!(matches!(sample_configs(&space, 0, 5), Err(SearchError::ZeroCount)));
    }

    #[test]
    fn lr_median_is_the_geometric_midpoint() {
        let mut lrs: Vec<f64> =
            sample_configs(&SearchSpace::default(), 10_000, 11).unwrap().iter().map(|c| c.lr_max).collect();
        lrs.sort_by(f64::total_cmp);
        let median = 0.5 * (lrs[4_999] + lrs[5_000]);
        assert!((median - 1e-3).abs() / 1e-3 < 0.1, "median {median}");
    }

    #[test]
    fn bad_space_is_rejected() {
        let space = SearchSpace { gamma: Interval::new(4.0, 0.3), ..Default::default() };
        assert!(sample_configs(&space, 1, 0).is_err());
        let space = SearchSpace { xi: Interval::new(0.0, 0.1), ..Default::default() };
        assert!(space.validate().is_err());
    }

    #[test]
    fn plan_parsing_and_totals() {
        let plan = StagePlan::default();
        assert_eq!(plan.total_trials(), 111);
        assert_eq!(plan.total_trial_epochs(), 230);
        assert_eq!("100:1,10:10,1:30".parse::<StagePlan>().unwrap(), plan);
        assert_eq!("4:1, 2:2, 1:3".parse::<StagePlan>().unwrap().total_trial_epochs(), 4 + 4 + 3);
        assert!("2:1,3:1".parse::<StagePlan>().is_err());
        assert!("2:0".parse::<StagePlan>().is_err());
        assert!("".parse::<StagePlan>().is_err());
        assert!(StagePlan { stages: vec![] }.validate().is_err());
    }

    fn indexed(n: usize) -> Vec<(usize, TrialConfig)> {
        (0..n).map(|i| (i, TrialConfig { lr_max: 1e-3 * (i + 1) as f64, xi: 0.01, gamma: 1.0 })).collect()
    }

    #[test]
    fn constant_evaluator_ranks_by_index() {
        let eval = |_: &TrialConfig, _: usize, _: u64| Ok(0.5);
        let r = run_stage(0, &indexed(7), 1, &eval, 1, 1).unwrap();
        assert_eq!(r.iter().map(|t| t.config_index).collect::<Vec<_>>(), (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn injective_evaluator_ranks_by_value() {
        let eval = |c: &TrialConfig, _: usize, _: u64| Ok(((c.lr_max * 1e3 * 7.0) % 10.0) / 10.0);
        let cands = indexed(10);
        let r = run_stage(0, &cands, 1, &eval, 1, 4).unwrap();
        let mut oracle: Vec<(f64, usize)> =
            cands.iter().map(|(i, c)| (eval(c, 1, 0).unwrap(), *i)).collect();
        oracle.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        assert_eq!(r.iter().map(|t| t.config_index).collect::<Vec<_>>(), oracle.iter().map(|o| o.1).collect::<Vec<_>>());
        assert_eq!(run_stage(0, &cands[..1], 1, &eval, 1, 1).unwrap().len(), 1);
    }

    #[test]
    fn failures_score_zero_without_aborting() {
        let eval = |c: &TrialConfig, _: usize, _: u64| {
            if c.lr_max > 2.5e-3 {
                Err("diverged".to_string())
            } else {
                Ok(0.3)
            }
        };
        let r = run_stage(1, &indexed(4), 2, &eval, 9, 2).unwrap();
        assert_eq!(r.len(), 4);
        assert_eq!(r.iter().filter(|t| t.error.is_some()).count(), 2);
        assert!(r.iter().filter(|t| t.error.is_some()).all(|t| t.accuracy == 0.0));
        let nan = |_: &TrialConfig, _: usize, _: u64| Ok(f64::NAN);
        assert!(run_stage(0, &indexed(1), 1, &nan, 0, 1).unwrap()[0].error.is_some());
    }

    #[test]
    fn seeds_depend_on_index_not_schedule() {
        let eval = |_: &TrialConfig, _: usize, seed: u64| Ok((seed % 1000) as f64 / 1000.0);
        let cands = indexed(20);
        let serial = run_stage(0, &cands, 1, &eval, 77, 1).unwrap();
        let parallel = run_stage(0, &cands, 1, &eval, 77, 8).unwrap();
        assert_eq!(serial, parallel);
        assert!(serial.iter().all(|t| t.seed == trial_seed(77, t.config_index)));
    }

    #[test]
    fn degenerate_plan_returns_the_lone_sample() {
        let eval = |_: &TrialConfig, _: usize, _: u64| Ok(0.1);
        let plan: StagePlan = "1:1".parse().unwrap();
        let out = search(&SearchSpace::default(), &plan, &eval, 3, 1).unwrap();
        assert_eq!(out.audit.len(), 1);
        assert_eq!(out.best, sample_configs(&SearchSpace::default(), 1, 3).unwrap()[0]);
    }

    #[test]
    fn trial_epochs_respect_the_budget() {
        let epochs = AtomicUsize::new(0);
        let trials = AtomicUsize::new(0);
        let eval = |c: &TrialConfig, e: usize, _: u64| {
            epochs.fetch_add(e, Ordering::Relaxed);
            trials.fetch_add(1, Ordering::Relaxed);
            Ok(c.xi)
        };
        let plan = StagePlan::default();
        let out = search(&SearchSpace::default(), &plan, &eval, 8, 4).unwrap();
        assert_eq!(trials.load(Ordering::Relaxed), 111);
        assert_eq!(epochs.load(Ordering::Relaxed), 230);
        assert_eq!(out.audit.len(), 111);
    }

    #[test]
    fn survivors_are_the_previous_top_k() {
        let eval = |c: &TrialConfig, e: usize, _: u64| Ok((c.gamma / 4.0 + e as f64 * 1e-3).min(1.0));
        let plan: StagePlan = "12:1,5:2,2:3".parse().unwrap();
        let out = search(&SearchSpace::default(), &plan, &eval, 21, 3).unwrap();
        for s in 1..3 {
            let prev: Vec<usize> = out.audit.iter().filter(|r| r.stage == s - 1).map(|r| r.config_index).collect();
            let mut cur: Vec<usize> = out.audit.iter().filter(|r| r.stage == s).map(|r| r.config_index).collect();
            cur.sort_unstable();
            let mut top: Vec<usize> = prev[..plan.stages[s].configs].to_vec();
            top.sort_unstable();
            assert_eq!(cur, top);
        }
    }

    #[test]
    fn audit_log_round_trips_and_replays() {
        let eval = |c: &TrialConfig, _: usize, _: u64| Ok(1.0 - (c.lr_max.ln() - 2e-3f64.ln()).abs() / 10.0);
        let plan: StagePlan = "6:1,3:2,1:1".parse().unwrap();
        let out = search(&SearchSpace::default(), &plan, &eval, 4, 2).unwrap();
        let mut buf = Vec::new();
        write_audit(&mut buf, &out.audit).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap().lines().count(), 10);
        let back = read_audit(buf.as_slice()).unwrap();
        assert_eq!(back, out.audit);
        assert_eq!(winner_from_audit(&back).unwrap(), out.final_result);
        assert_eq!(search(&SearchSpace::default(), &plan, &eval, 4, 1).unwrap(), out);
    }
}
