use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use aeen::data::MANIFEST_FILE;
use aeen::gzsl::Criterion;
use aeen::pipeline::TrainSettings;

use crate::{Failure, IoArgs, SettingsArgs};

/// Contents of a `--config` file. Every field is optional; command-line
/// flags take precedence.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub criterion: Option<Criterion>,
    #[serde(default)]
    pub allow_out_of_range: bool,
    #[serde(flatten)]
    pub settings: TrainSettings,
}

pub fn load(io: &IoArgs) -> Result<RunConfig, Failure> {
    let Some(path) = &io.config else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| Failure::Usage(format!("invalid config {}: {e}", path.display())))?;
    // relative paths inside the config are relative to the config file
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    cfg.data = cfg.data.map(|p| base.join(p));
    cfg.out = cfg.out.map(|p| base.join(p));
    Ok(cfg)
}

/// Manifest path from `--data` (a directory or a manifest file) or the config.
pub fn data_path(io: &IoArgs, cfg: &RunConfig) -> Result<PathBuf, Failure> {
    let path = io
        .data
        .clone()
        .or_else(|| cfg.data.clone())
        .ok_or_else(|| Failure::Usage("no dataset given (use --data or a config file)".into()))?;
    let manifest = if path.is_dir() { path.join(MANIFEST_FILE) } else { path };
    if !manifest.is_file() {
        return Err(Failure::Usage(format!("dataset manifest {} not found", manifest.display())));
    }
    Ok(manifest)
}

pub fn out_dir(io: &IoArgs, cfg: &RunConfig) -> Result<PathBuf, Failure> {
    io.out
        .clone()
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| Failure::Usage("no output directory given (use --out or a config file)".into()))
}

pub fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} {} not found", path.display())))
    }
}

/// Config values overridden by whichever flags were given, range-checked
/// unless out-of-range values were explicitly allowed.
pub fn settings(cfg: &RunConfig, args: &SettingsArgs) -> Result<TrainSettings, Failure> {
    let mut s = cfg.settings.clone();
    s.use_hoa |= args.hoa;
    s.normalize_projection |= args.normalize_projection;
    macro_rules! take {
        ($($flag:ident => $field:ident),* $(,)?) => {
            $(if let Some(v) = args.$flag {
                s.$field = v.into();
            })*
        };
    }
    take!(
        lr_max => lr_max,
        xi => xi,
        gamma => gamma,
        epochs => epochs,
        batch => batch_size,
        seed => seed,
        lr_mode => lr_mode,
        cycle_len => cycle_len,
        cycle_mul => cycle_mul,
        momentum => momentum,
        weight_decay => weight_decay,
        dropout => dropout,
        polarity => polarity,
    );
    if !(args.allow_out_of_range || cfg.allow_out_of_range) {
        s.check_ranges().map_err(|e| Failure::Usage(e.to_string()))?;
    }
    s.sgd().validate().map_err(|e| Failure::Usage(e.to_string()))?;
    s.schedule().map_err(|e| Failure::Usage(e.to_string()))?;
    if !(0.0..1.0).contains(&s.dropout) {
        return Err(Failure::Usage(format!("dropout must lie in [0, 1), got {}", s.dropout)));
    }
    Ok(s)
}
