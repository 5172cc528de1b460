//! Optimisation loop, checkpoint selection and evaluation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, NormalizationStats, Split};
use crate::error::{Error, Result};
use crate::loss::{LossConfig, Objective};
use crate::metrics::{persistence_forecast, MetricTable, Mode, Pooling, ScoreAccumulator, DEFAULT_HORIZONS};
use crate::network::{apply_bn_updates, deeplight_forward, Batch, Ctx, DeepLight, ModelConfig, ParamStore};
use crate::tensor::Tensor;
use crate::window::{normalize_window, window_anchors, FrameCache, SampleWindow};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const CONFIG_FILE: &str = "train_config.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub data: PathBuf,
    pub out: PathBuf,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub loss: LossConfig,
    /// Grid size is taken from the dataset when left at zero.
    pub model: ModelConfig,
    #[serde(default)]
    pub seed: u64,
    /// Hours between consecutive window anchors.
    #[serde(default = "defaults::stride")]
    pub stride: usize,
    /// Global gradient-norm bound; `None` disables clipping.
    #[serde(default = "defaults::grad_clip")]
    pub grad_clip: Option<f64>,
    #[serde(default = "defaults::threshold")]
    pub threshold: f32,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub variant: Variant,
}

mod defaults {
    pub fn epochs() -> usize {
        200
    }
    pub fn learning_rate() -> f64 {
        1e-4
    }
    pub fn batch_size() -> usize {
        4
    }
    pub fn stride() -> usize {
        1
    }
    pub fn grad_clip() -> Option<f64> {
        Some(1.0)
    }
    pub fn threshold() -> f32 {
        0.5
    }
}

impl TrainConfig {
    pub fn new(data: impl Into<PathBuf>, out: impl Into<PathBuf>, model: ModelConfig) -> Self {
        TrainConfig {
            data: data.into(),
            out: out.into(),
            epochs: defaults::epochs(),
            learning_rate: defaults::learning_rate(),
            batch_size: defaults::batch_size(),
            loss: LossConfig::default(),
            model,
            seed: 0,
            stride: defaults::stride(),
            grad_clip: defaults::grad_clip(),
            threshold: defaults::threshold(),
            optimizer: AdamConfig::default(),
            variant: Variant::Full,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        if self.batch_size < 1 || self.stride < 1 {
            return Err(Error::Config("batch_size and stride must be at least 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        self.loss.validate()?;
        if self.model.rows == 0 && self.model.cols == 0 {
            let mut model = self.model.clone();
            model.rows = 1;
            model.cols = 1;
            return model.validate();
        }
        self.model.validate()
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::storage(path, e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Ablation arms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    NoHazy,
    NoMultibranch,
    InceptionBlock,
    #[serde(rename = "minus_D")]
    MinusD,
    #[serde(rename = "minus_R")]
    MinusR,
    #[serde(rename = "minus_L")]
    MinusL,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoHazy,
        Variant::NoMultibranch,
        Variant::InceptionBlock,
        Variant::MinusD,
        Variant::MinusR,
        Variant::MinusL,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoHazy => "no_hazy",
            Variant::NoMultibranch => "no_multibranch",
            Variant::InceptionBlock => "inception_block",
            Variant::MinusD => "minus_D",
            Variant::MinusR => "minus_R",
            Variant::MinusL => "minus_L",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }
}

/// Derive the configuration of an ablation arm from `base`.
pub fn ablate(base: &TrainConfig, variant: Variant) -> Result<TrainConfig> {
    base.validate()?;
    let mut cfg = base.clone();
    cfg.variant = variant;
    match variant {
        Variant::Full => {}
        Variant::NoHazy => cfg.loss.hazy = false,
        Variant::NoMultibranch => cfg.model.branch_kernels = vec![3],
        Variant::InceptionBlock => {
            return Err(Error::Config(
                "the inception_block variant is not implemented in this crate".into(),
            ))
        }
        Variant::MinusD => cfg.model.use_cloud = false,
        Variant::MinusR => cfg.model.use_radar = false,
        Variant::MinusL => cfg.model.use_lightning = false,
    }
    Ok(cfg)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_wbce: f64,
    pub train_hazy: f64,
    pub val_ets: f64,
    pub clipped_steps: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_ets: f64,
}

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    lr: f64,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ParamStore<f32>, lr: f64, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; if p.trainable { p.value.len() } else { 0 }]).collect();
        Adam {
            config,
            lr,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &[Option<Tensor<f32>>]) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = params.at_mut(i);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (w, &gk)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gk = gk as f64;
                let mk = beta1 * m[k] as f64 + (1.0 - beta1) * gk;
                let vk = beta2 * v[k] as f64 + (1.0 - beta2) * gk * gk;
                m[k] = mk as f32;
                v[k] = vk as f32;
                let update = self.lr * (mk / c1) / ((vk / c2).sqrt() + eps);
                *w = (*w as f64 - update) as f32;
            }
        }
    }
}

/// Scale `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before scaling.
pub fn clip_global_norm(grads: &mut [Option<Tensor<f32>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = (max_norm / norm) as f32;
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Normalised windows of the dataset, grouped by split.
pub struct WindowSet {
    pub train: Vec<SampleWindow>,
    pub val: Vec<SampleWindow>,
    pub test: Vec<SampleWindow>,
}

impl WindowSet {
    pub fn load(dataset: &Dataset, s: usize, h: usize, stride: usize, stats: &NormalizationStats) -> Result<Self> {
        let anchors = window_anchors(dataset.manifest(), s, h, stride)?;
        let cache = FrameCache::load(dataset)?;
        let mut set = WindowSet {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for a in anchors {
            let w = normalize_window(&cache.window(a, s, h)?, stats);
            set.split_mut(w.split).push(w);
        }
        Ok(set)
    }

    pub fn split(&self, split: Split) -> &[SampleWindow] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<SampleWindow> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}

fn resolve_model(config: &ModelConfig, dataset: &Dataset) -> Result<ModelConfig> {
    let grid = dataset.manifest().grid;
    let mut model = config.clone();
    if model.rows == 0 && model.cols == 0 {
        model.rows = grid.rows;
        model.cols = grid.cols;
    }
    if (model.rows, model.cols) != (grid.rows, grid.cols) {
        return Err(Error::Config(format!(
            "model grid {}×{} does not match dataset grid {}×{}",
            model.rows, model.cols, grid.rows, grid.cols
        )));
    }
    model.validate()?;
    Ok(model)
}

fn prepare_out(out: &Path, force: bool) -> Result<()> {
    let taken = [LOG_FILE, BEST_CHECKPOINT, LAST_CHECKPOINT]
        .iter()
        .any(|f| out.join(f).exists());
    if taken && !force {
        return Err(Error::WouldOverwrite(out.to_path_buf()));
    }
    fs::create_dir_all(out)?;
    Ok(())
}

/// Run one optimisation step; returns (loss, wbce, hazy, clipped).
fn train_step(
    model: &mut DeepLight,
    adam: &mut Adam,
    objective: &Objective,
    windows: &[&SampleWindow],
    config: &TrainConfig,
    epoch: usize,
    batch_id: usize,
) -> Result<(f64, f64, f64, bool)> {
    let batch = Batch::<f32>::from_windows(windows, &model.config)?;
    let (mut grads, updates, loss) = {
        let mut ctx = Ctx::new(&model.params, true, model.config.bn_eps);
        let out = deeplight_forward(&mut ctx, &model.config, &batch);
        let loss = objective.evaluate(ctx.value(out), &batch.target);
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: batch_id,
                value: loss.total,
            });
        }
        let mut g = ctx.graph.backward(out, loss.grad.clone());
        (ctx.param_grads(&mut g), ctx.bn_updates().to_vec(), loss)
    };
    let mut clipped = false;
    if let Some(max) = config.grad_clip {
        let norm = clip_global_norm(&mut grads, max);
        if norm > max {
            clipped = true;
            log::debug!("epoch {epoch} batch {batch_id}: gradient norm {norm:.3} clipped to {max}");
        }
    }
    adam.step(&mut model.params, &grads);
    apply_bn_updates(&mut model.params, &updates, model.config.bn_momentum);
    Ok((loss.total, loss.wbce, loss.hazy, clipped))
}

/// Train from scratch, writing checkpoints and the log under `config.out`.
pub fn train(config: &TrainConfig, force: bool) -> Result<TrainOutcome> {
    config.validate()?;
    if config.variant == Variant::InceptionBlock {
        return Err(Error::Config("the inception_block variant is not implemented in this crate".into()));
    }
    let dataset = Dataset::open(&config.data)?;
    let model_config = resolve_model(&config.model, &dataset)?;
    let stats = dataset.manifest().normalization.clone();
    let windows = WindowSet::load(&dataset, model_config.s, model_config.h, config.stride, &stats)?;
    train_on(config, model_config, &windows, &stats, force)
}

/// Train on pre-built windows.
pub fn train_on(
    config: &TrainConfig,
    model_config: ModelConfig,
    windows: &WindowSet,
    stats: &NormalizationStats,
    force: bool,
) -> Result<TrainOutcome> {
    config.validate()?;
    model_config.validate()?;
    if windows.train.is_empty() {
        return Err(Error::Config("no training windows".into()));
    }
    if windows.val.is_empty() {
        log::warn!("no validation windows; validation ETS is reported as 0");
    }
    prepare_out(&config.out, force)?;
    let mut resolved = config.clone();
    resolved.model = model_config.clone();
    fs::write(config.out.join(CONFIG_FILE), serde_json::to_vec_pretty(&resolved)?)?;

    let objective = Objective::new(config.loss.clone())?;
    let mut model = DeepLight::new(model_config, config.seed)?;
    let mut adam = Adam::new(&model.params, config.learning_rate, config.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_da7a);
    let mut order: Vec<usize> = (0..windows.train.len()).collect();

    let log_path = config.out.join(LOG_FILE);
    let mut log_file = fs::File::create(&log_path)?;
    let best_path = config.out.join(BEST_CHECKPOINT);
    let last_path = config.out.join(LAST_CHECKPOINT);
    let mut log = Vec::new();
    let mut best: Option<(usize, f64)> = None;

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let (mut total, mut wbce, mut hazy, mut clipped, mut batches) = (0.0, 0.0, 0.0, 0, 0);
        for (batch_id, chunk) in order.chunks(config.batch_size).enumerate() {
            let items: Vec<&SampleWindow> = chunk.iter().map(|&i| &windows.train[i]).collect();
            let (l, w, hz, c) = train_step(&mut model, &mut adam, &objective, &items, config, epoch, batch_id)?;
            total += l;
            wbce += w;
            hazy += hz;
            clipped += c as usize;
            batches += 1;
        }
        let n = batches as f64;
        let val_ets = if windows.val.is_empty() {
            0.0
        } else {
            let table = evaluate_model(&model, &windows.val, config.threshold, Pooling::Counts)?;
            table.get(Mode::Strict, 1).map_or(0.0, |r| r.scores.ets)
        };
        let record = EpochRecord {
            epoch,
            train_loss: total / n,
            train_wbce: wbce / n,
            train_hazy: hazy / n,
            val_ets,
            clipped_steps: clipped,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.5} val ETS {:.4} ({:.1}s)",
            record.train_loss,
            record.val_ets,
            record.seconds
        );
        writeln!(log_file, "{}", serde_json::to_string(&record)?)?;
        log_file.flush()?;
        let meta = |kind: &str| {
            serde_json::json!({
                "kind": kind,
                "epoch": epoch,
                "val_ets": val_ets,
                "train_loss": record.train_loss,
                "variant": config.variant.name(),
                "learning_rate": config.learning_rate,
                "seed": config.seed,
                "optimizer": { "name": "adam", "config": config.optimizer },
                "loss": config.loss,
                "normalization": stats,
            })
        };
        if best.is_none_or(|(_, b)| val_ets > b) {
            best = Some((epoch, val_ets));
            model.save(&best_path, meta("best"))?;
        }
        model.save(&last_path, meta("last"))?;
        log.push(record);
    }
    let (best_epoch, best_val_ets) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        log_path,
        log,
        best_epoch,
        best_val_ets,
    })
}

/// Batch size used for inference passes.
pub const EVAL_BATCH: usize = 8;

/// Score a model over already-normalised windows.
pub fn evaluate_model(model: &DeepLight, windows: &[SampleWindow], threshold: f32, pooling: Pooling) -> Result<MetricTable> {
    let Some(first) = windows.first() else {
        return Err(Error::Config("no windows to evaluate".into()));
    };
    let [h, r, c] = [first.horizon(), model.config.rows, model.config.cols];
    let mut acc = ScoreAccumulator::new(h, r, c, &DEFAULT_HORIZONS, threshold, pooling)?;
    let per = h * r * c;
    for chunk in windows.chunks(EVAL_BATCH) {
        let refs: Vec<&SampleWindow> = chunk.iter().collect();
        let pred = model.predict(&refs)?;
        for (i, w) in chunk.iter().enumerate() {
            acc.add(&pred.data()[i * per..(i + 1) * per], w.target.data());
        }
    }
    Ok(acc.finish())
}

/// Score the persistence baseline.
pub fn evaluate_persistence(windows: &[SampleWindow], threshold: f32, pooling: Pooling) -> Result<MetricTable> {
    let Some(first) = windows.first() else {
        return Err(Error::Config("no windows to evaluate".into()));
    };
    let (h, r, c) = (first.target.shape()[0], first.target.shape()[1], first.target.shape()[2]);
    let mut acc = ScoreAccumulator::new(h, r, c, &DEFAULT_HORIZONS, threshold, pooling)?;
    for w in windows {
        acc.add(persistence_forecast(w).data(), w.target.data());
    }
    Ok(acc.finish())
}

/// What to score in [`evaluate`].
pub enum Forecaster<'a> {
    Checkpoint(&'a Path),
    /// Persistence over windows with `s` history and `h` lead hours.
    Persistence { s: usize, h: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub forecaster: String,
    pub dataset: PathBuf,
    pub split: Split,
    pub table: MetricTable,
}

/// Evaluate a checkpoint or the persistence baseline on one split.
pub fn evaluate(
    forecaster: Forecaster<'_>,
    data: &Path,
    split: Split,
    threshold: f32,
    pooling: Pooling,
    stride: usize,
) -> Result<EvalReport> {
    let dataset = Dataset::open(data)?;
    let grid = dataset.manifest().grid;
    let (table, name) = match forecaster {
        Forecaster::Persistence { s, h } => {
            let windows = WindowSet::load(&dataset, s, h, stride, &dataset.manifest().normalization)?;
            (evaluate_persistence(windows.split(split), threshold, pooling)?, "persistence".to_string())
        }
        Forecaster::Checkpoint(path) => {
            let (model, sidecar) = DeepLight::load(path)?;
            if (model.config.rows, model.config.cols) != (grid.rows, grid.cols) {
                return Err(Error::Config(format!(
                    "checkpoint grid {}×{} does not match dataset grid {}×{}",
                    model.config.rows, model.config.cols, grid.rows, grid.cols
                )));
            }
            let stats = checkpoint_stats(&sidecar.metadata).unwrap_or_else(|| dataset.manifest().normalization.clone());
            let windows = WindowSet::load(&dataset, model.config.s, model.config.h, stride, &stats)?;
            (
                evaluate_model(&model, windows.split(split), threshold, pooling)?,
                path.display().to_string(),
            )
        }
    };
    Ok(EvalReport {
        forecaster: name,
        dataset: data.to_path_buf(),
        split,
        table,
    })
}

/// Normalisation statistics recorded at training time, if any.
pub fn checkpoint_stats(metadata: &serde_json::Value) -> Option<NormalizationStats> {
    serde_json::from_value(metadata.get("normalization")?.clone()).ok()
}
