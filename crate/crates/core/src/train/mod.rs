//! Training loop, learning-rate schedule, optimizer and resumable state.

mod eval;
mod infer;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize};

use crate::data::{random_flip, PatchSampler, PatchSpec, VolumeRecord};
use crate::error::{Error, Result};
use crate::losses::{one_hot, total_loss, ClassSet};
use crate::network::{
    load_checkpoint, load_tensors, save_checkpoint, save_tensors, APAUNet, APAUNetConfig, AxisWeightRow,
    TensorEntry,
};
use crate::params::{Ctx, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub use eval::{
    evaluate, evaluate_dirs, write_report, ClassSummary, EvalReport, Unmatched, REPORT_CSV_EXT,
};
pub use infer::{coverage_map, sliding_window_infer, window_starts, WindowOutput};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const STATE_FILE: &str = "train_state.json";
pub const MOMENTUM_FILE: &str = "momentum.bin";
pub const LOG_FILE: &str = "log.jsonl";

/// Sampling and augmentation draw from this ChaCha stream; stream 0 of the
/// same seed initializes the network.
const SAMPLER_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Defaults to ⌈cases / batch_size⌉.
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
    pub patch: PatchSpec,
    /// Keys missing here take their [`APAUNetConfig::desk`] values.
    #[serde(deserialize_with = "net_over_desk")]
    pub net: APAUNetConfig,
    /// Write a checkpoint every K epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub include_background_dice: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            warmup_epochs: 10,
            batch_size: 2,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 4e-5,
            steps_per_epoch: None,
            seed: 0,
            patch: PatchSpec::default(),
            net: APAUNetConfig::desk(),
            checkpoint_every: 0,
            include_background_dice: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return Err(Error::config(format!(
                "need 0 <= warmup_epochs < epochs, got {} and {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 || self.steps_per_epoch == Some(0) {
            return Err(Error::config("batch_size and steps_per_epoch must be positive"));
        }
        for (name, v) in [("lr0", self.lr0), ("momentum", self.momentum), ("weight_decay", self.weight_decay)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        self.patch.validate()?;
        self.network_config().validate()
    }

    /// The network config as trained: seeded from `seed`, sized for the patch.
    pub fn network_config(&self) -> APAUNetConfig {
        APAUNetConfig { seed: self.seed, patch: Some(self.patch.patch_shape), ..self.net.clone() }
    }

    pub fn steps_for(&self, cases: usize) -> usize {
        self.steps_per_epoch.unwrap_or_else(|| cases.div_ceil(self.batch_size)).max(1)
    }

    pub fn dice_classes(&self) -> ClassSet {
        if self.include_background_dice {
            ClassSet::All
        } else {
            ClassSet::Foreground
        }
    }
}

fn net_over_desk<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<APAUNetConfig, D::Error> {
    use serde::de::Error as _;
    let given = serde_json::Value::deserialize(d)?;
    let mut net = serde_json::to_value(APAUNetConfig::desk()).map_err(D::Error::custom)?;
    match (given, &mut net) {
        (serde_json::Value::Object(keys), serde_json::Value::Object(base)) => base.extend(keys),
        (other, _) => return Err(D::Error::custom(format!("net must be an object, got {other}"))),
    }
    serde_json::from_value(net).map_err(D::Error::custom)
}

/// Linear warmup from 0 to `lr0`, then cosine annealing to 0 at `epochs`.
pub fn cosine_lr(epoch: f64, cfg: &TrainConfig) -> f64 {
    let (w, e) = (cfg.warmup_epochs as f64, cfg.epochs as f64);
    if epoch < w {
        cfg.lr0 * epoch.max(0.0) / w
    } else if epoch >= e {
        0.0
    } else {
        cfg.lr0 * 0.5 * (1.0 + (std::f64::consts::PI * (epoch - w) / (e - w)).cos())
    }
}

/// SGD with heavy-ball momentum and decoupled weight decay:
/// `b ← μb + g`, `w ← w − lr·b − lr·λ·w`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(store: &ParamStore<T>, momentum: f64, weight_decay: f64) -> Self {
        let buffers = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self { momentum, weight_decay, buffers }
    }

    pub fn buffers(&self) -> &[Tensor<T>] {
        &self.buffers
    }

    pub fn set_buffers(&mut self, buffers: Vec<Tensor<T>>) -> Result<()> {
        if buffers.len() != self.buffers.len()
            || buffers.iter().zip(&self.buffers).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Invalid("momentum buffers do not match the parameters".into()));
        }
        self.buffers = buffers;
        Ok(())
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: Vec<(ParamId, Tensor<T>)>, lr: f64) {
        let (mu, wd, lr) = (T::lit(self.momentum), T::lit(self.weight_decay), T::lit(lr));
        for (id, g) in grads {
            let p = store.get_mut(id);
            if !p.requires_grad {
                continue;
            }
            let buf = self.buffers[id.index()].data_mut();
            for ((b, w), &g) in buf.iter_mut().zip(p.value.data_mut()).zip(g.data()) {
                *b = mu * *b + g;
                *w = *w - lr * *b - lr * wd * *w;
            }
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub steps: usize,
    pub loss: f64,
    pub dice: f64,
    pub ce: f64,
    /// Rate used by the epoch's first step.
    pub lr: f64,
    pub axis_weights: Vec<AxisWeightRow>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub dice: f64,
    pub ce: f64,
    pub lr: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainState {
    config: TrainConfig,
    /// Completed epochs.
    epoch: usize,
    step: usize,
    rng_seed: u64,
    rng_stream: u64,
    /// ChaCha word position, decimal (exceeds u64).
    rng_word_pos: String,
    momentum_sha256: String,
    momentum: Vec<TensorEntry>,
}

pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub net: APAUNet,
    pub store: ParamStore<f32>,
    pub sgd: Sgd<f32>,
    rng: ChaCha8Rng,
    sampler: PatchSampler<'a>,
    classes: ClassSet,
    steps_per_epoch: usize,
    epoch: usize,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &TrainConfig, records: &'a [VolumeRecord]) -> Result<Self> {
        cfg.validate()?;
        for r in records {
            r.validate(Some(cfg.net.num_classes))?;
        }
        let (net, store) = APAUNet::build::<f32>(&cfg.network_config())?;
        let sgd = Sgd::new(&store, cfg.momentum, cfg.weight_decay);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(SAMPLER_STREAM);
        Ok(Self {
            cfg: cfg.clone(),
            net,
            store,
            sgd,
            rng,
            sampler: PatchSampler::new(records, cfg.patch)?,
            classes: cfg.dice_classes(),
            steps_per_epoch: cfg.steps_for(records.len()),
            epoch: 0,
            step: 0,
        })
    }

    /// Restores parameters, momentum, epoch and sampler stream from `dir`.
    pub fn resume(dir: &Path, records: &'a [VolumeRecord]) -> Result<Self> {
        let state: TrainState = serde_json::from_str(&fs::read_to_string(dir.join(STATE_FILE))?)?;
        let mut t = Self::new(&state.config, records)?;
        let (_, store, _) = load_checkpoint::<f32>(&dir.join(CHECKPOINT_FILE))?;
        t.store = store;
        t.sgd.set_buffers(load_tensors(&dir.join(MOMENTUM_FILE), &state.momentum, &state.momentum_sha256)?)?;
        let pos: u128 = state
            .rng_word_pos
            .parse()
            .map_err(|e| Error::Format { offset: 0, msg: format!("bad rng position: {e}") })?;
        t.rng = ChaCha8Rng::seed_from_u64(state.rng_seed);
        t.rng.set_stream(state.rng_stream);
        t.rng.set_word_pos(pos);
        t.epoch = state.epoch;
        t.step = state.step;
        Ok(t)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    /// Sample, flip, forward, loss, backward, update.
    pub fn step(&mut self, epoch_pos: f64) -> Result<StepStats> {
        let lr = cosine_lr(epoch_pos, &self.cfg);
        let b = self.cfg.batch_size;
        let p = self.cfg.patch.patch_shape;
        let mut batch = self.sampler.sample_batch(b, &mut self.rng)?;
        for patch in &mut batch {
            random_flip(patch, &mut self.rng);
        }
        let image: Vec<f32> = batch.iter().flat_map(|q| q.image.iter().copied()).collect();
        let labels: Vec<u8> = batch.iter().flat_map(|q| q.label.iter().copied()).collect();
        let x = Tensor::new(&[b, 1, p[0], p[1], p[2]], image)?;
        let y = one_hot::<f32>(&labels, b, p, self.cfg.net.num_classes)?;

        let mut ctx = Ctx::new(&self.store, true);
        let xv = ctx.tape.constant(x);
        let out = self.net.forward(&mut ctx, xv)?;
        let parts = total_loss(&mut ctx.tape, out.logits, &y, &self.classes)?;
        let scalar = |v| ctx.value(v).data()[0] as f64;
        let stats = StepStats { loss: scalar(parts.total), dice: scalar(parts.dice), ce: scalar(parts.ce), lr };
        if !stats.loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step, lr, dice: stats.dice, ce: stats.ce });
        }
        let grads = ctx.param_grads(parts.total)?;
        drop(ctx);
        self.sgd.step(&mut self.store, grads, lr);
        self.step += 1;
        Ok(stats)
    }

    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let n = self.steps_per_epoch;
        let (mut loss, mut dice, mut ce) = (0.0, 0.0, 0.0);
        let mut first_lr = None;
        for s in 0..n {
            let st = self.step(self.epoch as f64 + s as f64 / n as f64)?;
            first_lr.get_or_insert(st.lr);
            loss += st.loss;
            dice += st.dice;
            ce += st.ce;
        }
        self.epoch += 1;
        Ok(EpochLog {
            epoch: self.epoch,
            steps: n,
            loss: loss / n as f64,
            dice: dice / n as f64,
            ce: ce / n as f64,
            lr: first_lr.unwrap_or(0.0),
            axis_weights: self.net.axis_weights(&self.store),
        })
    }

    /// Writes parameters, momentum and sampler state into `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let ckpt = dir.join(CHECKPOINT_FILE);
        save_checkpoint(&ckpt, &self.net.config, &self.store)?;
        let names: Vec<&str> = self.store.iter().map(|p| p.name.as_str()).collect();
        let (momentum, momentum_sha256) =
            save_tensors(&dir.join(MOMENTUM_FILE), names.into_iter().zip(self.sgd.buffers()))?;
        let state = TrainState {
            config: self.cfg.clone(),
            epoch: self.epoch,
            step: self.step,
            rng_seed: self.cfg.seed,
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos().to_string(),
            momentum_sha256,
            momentum,
        };
        fs::write(dir.join(STATE_FILE), serde_json::to_string_pretty(&state)?)?;
        Ok(ckpt)
    }

    /// Trains to `cfg.epochs`, appending to `dir/log.jsonl` and
    /// checkpointing when `dir` is given.
    pub fn run(&mut self, dir: Option<&Path>, mut on_epoch: impl FnMut(&EpochLog)) -> Result<Vec<EpochLog>> {
        let mut log = match dir {
            Some(d) => {
                fs::create_dir_all(d)?;
                Some(fs::OpenOptions::new().create(true).append(true).open(d.join(LOG_FILE))?)
            }
            None => None,
        };
        let mut logs = Vec::new();
        while !self.is_done() {
            let entry = self.run_epoch()?;
            if let Some(f) = log.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&entry)?)?;
            }
            on_epoch(&entry);
            logs.push(entry);
            let k = self.cfg.checkpoint_every;
            if let Some(d) = dir {
                if self.is_done() || (k > 0 && self.epoch.is_multiple_of(k)) {
                    self.save(d)?;
                }
            }
        }
        Ok(logs)
    }
}

#[cfg(test)]
mod tests;
