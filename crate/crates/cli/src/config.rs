use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use apaseg_core::blocks::{BlockVariant, FusionMode, ProjectionOp};
use apaseg_core::data::{load_dir, DatasetIndex, Split, SyntheticSpec, VolumeRecord, INDEX_FILE};
use apaseg_core::train::TrainConfig;
use clap::Args;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Reads a JSON config, or the defaults when no file is given.
pub fn read_json<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

/// Resolves `p` against the directory of the config file it came from.
pub fn relative_to(config: Option<&Path>, p: &Path) -> PathBuf {
    match config.and_then(Path::parent) {
        Some(dir) if p.is_relative() => dir.join(p),
        _ => p.to_path_buf(),
    }
}

/// Parses a config enum from its JSON spelling, e.g. `CoT3D` or `learned`.
pub fn parse_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s.split(',').map(|x| x.trim().parse().map_err(|_| format!("bad extent {x:?}"))).collect::<Result<_, _>>()?;
    match v[..] {
        [a] => Ok([a; 3]),
        [a, b, c] => Ok([a, b, c]),
        _ => Err(format!("expected N or H,W,D, got {s:?}")),
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    #[serde(flatten)]
    pub spec: SyntheticSpec,
    pub count: Option<usize>,
    /// The last `val_count` cases go to the validation split.
    pub val_count: usize,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainFile {
    /// Dataset directory, relative to the config file.
    pub data: Option<PathBuf>,
    #[serde(flatten)]
    pub train: TrainConfig,
}

/// Flags that override keys of a training config.
#[derive(Args, Clone, Debug, Default)]
pub struct TrainOverrides {
    /// Dataset directory (config key `data`)
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    /// Falls back to APASEG_SEED, then the config
    #[arg(long, env = "APASEG_SEED")]
    pub seed: Option<u64>,
    /// Patch shape, `N` or `H,W,D`
    #[arg(long, value_parser = parse_shape)]
    pub patch: Option<[usize; 3]>,
    #[arg(long)]
    pub oversample_ratio: Option<f64>,
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// APA, CoT2D or CoT3D
    #[arg(long, value_parser = parse_enum::<BlockVariant>)]
    pub variant: Option<BlockVariant>,
    /// AvgPlusMax, Avg, Max or DepthwiseConv
    #[arg(long, value_parser = parse_enum::<ProjectionOp>)]
    pub projection_op: Option<ProjectionOp>,
    /// mean or learned
    #[arg(long, value_parser = parse_enum::<FusionMode>)]
    pub fusion_mode: Option<FusionMode>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

impl TrainOverrides {
    pub fn apply(&self, file: &mut TrainFile) {
        let t = &mut file.train;
        if let Some(v) = &self.data {
            file.data = Some(v.clone());
        }
        macro_rules! set {
            ($($flag:ident => $($key:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag { t.$($key).+ = v.into(); })*
            };
        }
        set!(
            epochs => epochs,
            warmup_epochs => warmup_epochs,
            batch_size => batch_size,
            lr0 => lr0,
            momentum => momentum,
            weight_decay => weight_decay,
            steps_per_epoch => steps_per_epoch,
            seed => seed,
            patch => patch.patch_shape,
            oversample_ratio => patch.oversample_ratio,
            levels => net.levels,
            base_channels => net.base_channels,
            variant => net.variant,
            projection_op => net.projection_op,
            fusion_mode => net.fusion_mode,
            checkpoint_every => checkpoint_every,
        );
    }
}

/// Training and validation cases of a dataset directory. Without an index
/// every volume is a training case.
pub fn load_splits(dir: &Path) -> Result<(Vec<VolumeRecord>, Vec<VolumeRecord>)> {
    let ctx = || format!("loading dataset {}", dir.display());
    if !dir.join(INDEX_FILE).exists() {
        return Ok((load_dir(dir, None).with_context(ctx)?, Vec::new()));
    }
    let index = DatasetIndex::load(dir).with_context(ctx)?;
    let train = index.load_cases(dir, Some(Split::Train)).with_context(ctx)?;
    let val = index.load_cases(dir, Some(Split::Val)).with_context(ctx)?;
    Ok((train, val))
}
