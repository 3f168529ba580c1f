use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pointseg::dataio::Split;
use pointseg::postprocess::RansacConfig;
use pointseg::projection::ProjectionConfig;

pub const DEFAULT_LR: f32 = 1e-3;
pub const DEFAULT_BATCH: usize = 32;
pub const DEFAULT_STEPS: usize = 2000;
pub const DEFAULT_LOG_EVERY: usize = 10;
pub const DEFAULT_ITERATIONS: usize = 50;
pub const DEFAULT_CLASS_WEIGHTS: [f32; 4] = [1.0, 4.0, 4.0, 4.0];

/// Fully resolved run settings: built-in defaults, overlaid by the config
/// file, overlaid by explicit flags.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub steps: usize,
    pub lr: f32,
    pub batch: usize,
    pub seed: u64,
    pub ransac: bool,
    pub threads: Option<usize>,
    pub log_every: usize,
    pub model_scale: usize,
    pub iterations: usize,
    pub split: SplitChoice,
    pub class_weights: [f32; 4],
    pub projection: ProjectionConfig,
    pub ransac_config: RansacConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            input: None,
            output: None,
            checkpoint: None,
            steps: DEFAULT_STEPS,
            lr: DEFAULT_LR,
            batch: DEFAULT_BATCH,
            seed: 0,
            ransac: false,
            threads: None,
            log_every: DEFAULT_LOG_EVERY,
            model_scale: 1,
            iterations: DEFAULT_ITERATIONS,
            split: SplitChoice::Val,
            class_weights: DEFAULT_CLASS_WEIGHTS,
            projection: ProjectionConfig::default(),
            ransac_config: RansacConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitChoice {
    Train,
    Val,
    All,
}

impl SplitChoice {
    pub fn matches(self, split: Split) -> bool {
        match self {
            SplitChoice::Train => split == Split::Train,
            SplitChoice::Val => split == Split::Val,
            SplitChoice::All => true,
        }
    }
}

impl std::str::FromStr for SplitChoice {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitChoice::Train),
            "val" => Ok(SplitChoice::Val),
            "all" => Ok(SplitChoice::All),
            other => bail!("unknown split {other:?} (expected train, val, or all)"),
        }
    }
}

pub fn parse_class_weights(s: &str) -> Result<[f32; 4]> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        bail!("class weights need 4 comma-separated values, got {}", parts.len());
    }
    let mut out = [0.0f32; 4];
    for (slot, part) in out.iter_mut().zip(&parts) {
        let v: f32 = part
            .parse()
            .with_context(|| format!("bad class weight {part:?}"))?;
        if !v.is_finite() || v < 0.0 {
            bail!("class weight {v} is not a finite non-negative number");
        }
        *slot = v;
    }
    Ok(out)
}

/// Key=value settings from a text file; '#' starts a comment, blank lines
/// are skipped.
pub fn read_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config file {}", path.display()))?;
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!(
                "{}:{}: expected key=value, got {raw:?}",
                path.display(),
                lineno + 1
            );
        };
        out.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(out)
}

/// Applies config-file entries to the defaults. Flags are merged afterwards
/// by the caller, so precedence is flags > file > defaults.
pub fn apply_config_file(cfg: &mut RunConfig, entries: &BTreeMap<String, String>) -> Result<()> {
    for (key, value) in entries {
        let parse_err = || format!("config key {key}: bad value {value:?}");
        match key.as_str() {
            "input" => cfg.input = Some(PathBuf::from(value)),
            "output" => cfg.output = Some(PathBuf::from(value)),
            "checkpoint" => cfg.checkpoint = Some(PathBuf::from(value)),
            "steps" => cfg.steps = value.parse().with_context(parse_err)?,
            "lr" => cfg.lr = value.parse().with_context(parse_err)?,
            "batch" => cfg.batch = value.parse().with_context(parse_err)?,
            "seed" => cfg.seed = value.parse().with_context(parse_err)?,
            "ransac" => cfg.ransac = value.parse().with_context(parse_err)?,
            "threads" => cfg.threads = Some(value.parse().with_context(parse_err)?),
            "log_every" => cfg.log_every = value.parse().with_context(parse_err)?,
            "model_scale" => cfg.model_scale = value.parse().with_context(parse_err)?,
            "iterations" => cfg.iterations = value.parse().with_context(parse_err)?,
            "split" => cfg.split = value.parse()?,
            "class_weights" => cfg.class_weights = parse_class_weights(value)?,
            other => bail!("unknown config key {other:?}"),
        }
    }
    Ok(())
}
