use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::Context;
use serde::Serialize;

use aeen::data::{self, Dataset, GroundTruth, SyntheticSpec};
use aeen::gzsl::Criterion;
use aeen::maps::{self, HeatMap};
use aeen::network::{ConvWeights, FeatureMap};
use aeen::pipeline::{self, Checkpoint, TrainSettings};
use aeen::search::{self, SearchSpace, StagePlan, TrialConfig};

use crate::config::{self, RunConfig};
use crate::{BranchArg, Command, Failure, IoArgs};

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CURVE_FILE: &str = "curve.csv";
pub const GZSL_REPORT_FILE: &str = "gzsl.json";
pub const AUDIT_FILE: &str = "audit.jsonl";
pub const BEST_FILE: &str = "best.json";
pub const BEST_SETTINGS_FILE: &str = "best_settings.json";

pub fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Gen { spec, out } => gen(&spec, &out),
        Command::Train { io, settings } => {
            let cfg = config::load(&io)?;
            let s = config::settings(&cfg, &settings)?;
            train(&io, &cfg, &s)
        }
        Command::Eval { io, checkpoint } => eval(&io, &checkpoint),
        Command::Gzsl { io, checkpoint, criterion } => {
            let cfg = config::load(&io)?;
            let criterion = criterion.map(Criterion::from).or(cfg.criterion).unwrap_or_default();
            gzsl(&io, &cfg, &checkpoint, criterion)
        }
        Command::Search { io, settings, plan, jobs } => {
            let cfg = config::load(&io)?;
            let s = config::settings(&cfg, &settings)?;
            let plan: StagePlan = plan.parse().map_err(|e: search::SearchError| Failure::Usage(e.to_string()))?;
            if jobs == 0 {
                return Err(Failure::Usage("--jobs must be at least 1".into()));
            }
            run_search(&io, &cfg, &s, &plan, jobs)
        }
        Command::Maps { io, checkpoint, generating_weights, sample, attr, avg, branch, upsample } => {
            let request = MapRequest { sample, attrs: attr, avg, branch, upsample };
            export_maps(&io, checkpoint.as_deref(), generating_weights.as_deref(), &request)
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn load_dataset(io: &IoArgs, cfg: &RunConfig) -> Result<Dataset, Failure> {
    let manifest = config::data_path(io, cfg)?;
    Ok(data::load_dataset(&manifest).with_context(|| format!("loading dataset {}", manifest.display()))?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    config::require_file(path, "checkpoint")?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).with_context(|| format!("parsing checkpoint {}", path.display()))?)
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn gen(spec_path: &Path, out: &Path) -> Result<(), Failure> {
    config::require_file(spec_path, "spec file")?;
    let text = fs::read_to_string(spec_path).with_context(|| format!("reading {}", spec_path.display()))?;
    let spec: SyntheticSpec = serde_json::from_str(&text)
        .map_err(|e| Failure::Usage(format!("invalid spec {}: {e}", spec_path.display())))?;
    let (ds, truth) = data::gen_synthetic(&spec).map_err(|e| Failure::Usage(e.to_string()))?;
    let manifest = data::save_dataset(out, &ds)?;
    write_json(&out.join(GROUND_TRUTH_FILE), &truth)?;
    println!("{}", manifest.display());
    Ok(())
}

fn train(io: &IoArgs, cfg: &RunConfig, settings: &TrainSettings) -> Result<(), Failure> {
    let ds = load_dataset(io, cfg)?;
    let out = config::out_dir(io, cfg)?;
    ensure_dir(&out)?;
    let trained = pipeline::fit(&ds, settings, |_| {})?;
    pipeline::write_metrics(create(&out.join(METRICS_FILE))?, &trained.metrics)?;
    let checkpoint =
        Checkpoint { settings: settings.clone(), epochs_run: trained.metrics.len(), params: trained.state.params };
    write_json(&out.join(CHECKPOINT_FILE), &checkpoint)?;
    if let Some(last) = trained.metrics.last() {
        println!("epoch {} loss {:.6} seen_acc {:.4}", last.epoch, last.loss, last.seen_acc);
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    unseen_accuracy: f64,
    unseen_samples: usize,
    unseen_classes: Vec<usize>,
    epochs_run: usize,
}

fn eval(io: &IoArgs, checkpoint: &Path) -> Result<(), Failure> {
    let cfg = config::load(io)?;
    let ds = load_dataset(io, &cfg)?;
    let ck = load_checkpoint(checkpoint)?;
    let report = EvalReport {
        unseen_accuracy: pipeline::unseen_accuracy(&ck.params, &ds)?,
        unseen_samples: ds.unseen_indices().len(),
        unseen_classes: ds.split.unseen.clone(),
        epochs_run: ck.epochs_run,
    };
    let text = serde_json::to_string_pretty(&report).context("serializing report")?;
    println!("{text}");
    if let Some(out) = io.out.clone().or(cfg.out) {
        ensure_dir(&out)?;
        fs::write(out.join("eval.json"), text + "\n").context("writing eval.json")?;
    }
    Ok(())
}

fn gzsl(io: &IoArgs, cfg: &RunConfig, checkpoint: &Path, criterion: Criterion) -> Result<(), Failure> {
    let ds = load_dataset(io, cfg)?;
    let ck = load_checkpoint(checkpoint)?;
    let out = config::out_dir(io, cfg)?;
    ensure_dir(&out)?;
    let (report, curve) = pipeline::gzsl_evaluate(&ck.params, &ds, criterion)?;
    curve.write_csv(create(&out.join(CURVE_FILE))?)?;
    write_json(&out.join(GZSL_REPORT_FILE), &report)?;
    let (u, r) = (report.test_uncalibrated, report.test_rectified);
    println!("uncalibrated: tr {:.4} te {:.4} H {:.4}", u.tr, u.te, u.h);
    println!("rectified (offset {:.6}, chosen on {}): tr {:.4} te {:.4} H {:.4}", r.offset, report.selected_on, r.tr, r.te, r.h);
    Ok(())
}

#[derive(Serialize)]
struct BestRecord<'a> {
    best_index: usize,
    config: TrialConfig,
    final_result: &'a search::TrialResult,
    trials: usize,
}

fn run_search(io: &IoArgs, cfg: &RunConfig, base: &TrainSettings, plan: &StagePlan, jobs: usize) -> Result<(), Failure> {
    let ds = load_dataset(io, cfg)?;
    if ds.split.val.is_empty() {
        return Err(Failure::Usage("search needs validation classes in the split".into()));
    }
    let out = config::out_dir(io, cfg)?;
    ensure_dir(&out)?;
    let evaluator = |trial: &TrialConfig, epochs: usize, seed: u64| {
        let settings = base.with_trial(trial, epochs, seed);
        pipeline::fit(&ds, &settings, |_| {})
            .and_then(|t| pipeline::validation_accuracy(&t.state.params, &ds))
            .map_err(|e| e.to_string())
    };
    let outcome = search::search(&SearchSpace::default(), plan, &evaluator, base.seed, jobs)?;
    search::write_audit(create(&out.join(AUDIT_FILE))?, &outcome.audit)?;
    let record = BestRecord {
        best_index: outcome.best_index,
        config: outcome.best,
        final_result: &outcome.final_result,
        trials: outcome.audit.len(),
    };
    write_json(&out.join(BEST_FILE), &record)?;
    let final_stage = plan.stages.last().expect("validated plan");
    let settings = base.with_trial(&outcome.best, final_stage.epochs, outcome.final_result.seed);
    write_json(&out.join(BEST_SETTINGS_FILE), &settings)?;
    println!(
        "best config #{}: lr_max {:.6e} xi {:.6e} gamma {:.4} -> accuracy {:.4} ({} trials)",
        outcome.best_index,
        outcome.best.lr_max,
        outcome.best.xi,
        outcome.best.gamma,
        outcome.final_result.accuracy,
        outcome.audit.len()
    );
    Ok(())
}

struct MapRequest {
    sample: usize,
    attrs: Vec<usize>,
    avg: bool,
    branch: BranchArg,
    upsample: Option<usize>,
}

fn export_maps(
    io: &IoArgs,
    checkpoint: Option<&Path>,
    generating: Option<&Path>,
    req: &MapRequest,
) -> Result<(), Failure> {
    let cfg = config::load(io)?;
    let ds = load_dataset(io, &cfg)?;
    let out = config::out_dir(io, &cfg)?;
    if req.sample >= ds.len() {
        return Err(Failure::Usage(format!("sample {} out of range (dataset has {})", req.sample, ds.len())));
    }
    if req.attrs.is_empty() && !req.avg {
        return Err(Failure::Usage("nothing to export: give --attr and/or --avg".into()));
    }
    let label = ds.labels[req.sample];
    // features the maps are computed from, the 1×1 weights, and the class row for --avg
    let (features, weights, class_row): (FeatureMap, ConvWeights, Vec<f64>) = match (checkpoint, generating) {
        (Some(path), _) => {
            let ck = load_checkpoint(path)?;
            let s = pipeline::shared_features(&ck.params, &ds.features[req.sample])?;
            let w = if req.branch == BranchArg::Top { ck.params.top.clone() } else { ck.params.bottom.clone() };
            (s, w, ck.params.class_matrix.row(label).to_vec())
        }
        (None, Some(path)) => {
            config::require_file(path, "ground truth")?;
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let truth: GroundTruth = serde_json::from_str(&text).context("parsing ground truth")?;
            let w = data::generating_weights(&truth);
            (ds.features[req.sample].clone(), w, ds.attributes.row(label).to_vec())
        }
        (None, None) => return Err(Failure::Usage("give --checkpoint or --generating-weights".into())),
    };
    if let Some(&bad) = req.attrs.iter().find(|&&a| a >= weights.out_channels()) {
        return Err(Failure::Usage(format!("attribute {bad} out of range (D = {})", weights.out_channels())));
    }
    ensure_dir(&out)?;
    let finish = |map: HeatMap, name: String| -> Result<(), Failure> {
        let map = match req.upsample {
            Some(side) => maps::upsample(&map, side, side).map_err(|e| Failure::Usage(e.to_string()))?,
            None => map,
        };
        let path = out.join(name);
        let mut f = create(&path)?;
        f.write_all(&maps::render_pgm(&map)).and_then(|_| f.flush()).with_context(|| format!("writing {}", path.display()))?;
        println!("{}", path.display());
        Ok(())
    };
    for &a in &req.attrs {
        finish(maps::attribute_map(&features, &weights, a)?, format!("{}_{a}.pgm", req.sample))?;
    }
    if req.avg {
        finish(maps::average_map(&features, &weights, &class_row)?, format!("{}_avg.pgm", req.sample))?;
    }
    Ok(())
}
