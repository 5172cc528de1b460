//! The dual-encoder MB-ConvLSTM forecaster.
//!
//! Every block is written against a [`Ctx`], which owns the autodiff tape
//! and binds named parameters from a [`ParamStore`] on first use. The same
//! code path serves training (batch statistics in batch norm) and inference
//! (running statistics), in `f32` or `f64`.

mod config;
mod params;

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchStats, Gradients, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::window::SampleWindow;

pub use config::{ModelConfig, DEFAULT_KERNELS};
pub use params::{Param, ParamStore};

/// Kernel size and stride of every upscaler transposed convolution.
pub const UPSCALE_KERNEL: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockMode {
    /// Branch conv, batch norm, ReLU; fused by a biased 1×1 conv.
    CStem,
    /// Branch conv with bias, ReLU; fused by an unbiased 1×1 conv.
    Lstm,
}

/// Tape plus lazily bound parameters for one forward pass.
pub struct Ctx<'a, T: Scalar> {
    pub graph: Graph<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<NodeId>>,
    bn_eps: f64,
    bn_updates: Vec<(String, BatchStats<T>)>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore<T>, train: bool, bn_eps: f64) -> Self {
        Ctx {
            graph: Graph::new(train),
            store,
            bound: vec![None; store.len()],
            bn_eps,
            bn_updates: Vec::new(),
        }
    }

    pub fn param(&mut self, name: &str) -> NodeId {
        let i = self
            .store
            .position(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        if let Some(id) = self.bound[i] {
            return id;
        }
        let p = self.store.at(i);
        let id = if p.trainable {
            self.graph.param(p.value.clone())
        } else {
            self.graph.constant(p.value.clone())
        };
        self.bound[i] = Some(id);
        id
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.graph.constant(value)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        self.graph.value(id)
    }

    /// Gradients of the trainable parameters, aligned with the store order.
    /// Parameters not reached by the pass get `None`.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.bound
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let id = (*id)?;
                if !self.store.at(i).trainable {
                    return None;
                }
                grads.take(id)
            })
            .collect()
    }

    /// Batch statistics seen in training mode, keyed by batch-norm prefix.
    pub fn bn_updates(&self) -> &[(String, BatchStats<T>)] {
        &self.bn_updates
    }
}

/// Blend observed batch statistics into the running estimates.
pub fn apply_bn_updates<T: Scalar>(store: &mut ParamStore<T>, updates: &[(String, BatchStats<T>)], momentum: f64) {
    let m = T::of(momentum);
    for (prefix, stats) in updates {
        for (suffix, fresh) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            let running = store.get_mut(&format!("{prefix}.{suffix}"));
            for (r, &v) in running.data_mut().iter_mut().zip(fresh.iter()) {
                *r = (T::one() - m) * *r + m * v;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Parameter layout

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..=bound)))
}

fn add_conv<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
    bias: bool,
) {
    let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
    store.add(format!("{name}.weight"), uniform(rng, &[c_out, c_in, k, k], bound), true);
    if bias {
        store.add(format!("{name}.bias"), uniform(rng, &[c_out], bound), true);
    }
}

fn add_multibranch<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    config: &ModelConfig,
    mode: BlockMode,
) {
    let cb = config.c_branch;
    for &k in &config.branch_kernels {
        let name = format!("{prefix}.branch{k}");
        add_conv(store, rng, &name, cb, c_in, k, mode == BlockMode::Lstm);
        if mode == BlockMode::CStem {
            store.add(format!("{name}.bn.gamma"), Tensor::full(&[cb], T::one()), true);
            store.add(format!("{name}.bn.beta"), Tensor::zeros(&[cb]), true);
            store.add(format!("{name}.bn.running_mean"), Tensor::zeros(&[cb]), false);
            store.add(format!("{name}.bn.running_var"), Tensor::full(&[cb], T::one()), false);
        }
    }
    let fused = cb * config.branch_kernels.len();
    add_conv(store, rng, &format!("{prefix}.fuse"), c_out, fused, 1, mode == BlockMode::CStem);
}

fn add_cstem<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, prefix: &str, c_in: usize, config: &ModelConfig) {
    let mut c = c_in;
    for stage in 0..config.cstem_stages {
        add_multibranch(store, rng, &format!("{prefix}.{stage}"), c, config.c_stem, config, BlockMode::CStem);
        c = config.c_stem;
    }
}

fn add_cell<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, prefix: &str, config: &ModelConfig) {
    let ch = config.c_hidden;
    add_multibranch(store, rng, &format!("{prefix}.input"), config.c_stem, 4 * ch, config, BlockMode::Lstm);
    add_multibranch(store, rng, &format!("{prefix}.hidden"), ch, 4 * ch, config, BlockMode::Lstm);
    let (r, c) = config.latent();
    for peep in ["w_cf", "w_ci", "w_co"] {
        store.add(format!("{prefix}.{peep}"), Tensor::zeros(&[ch, r, c]), true);
    }
    store.add(format!("{prefix}.b_f"), Tensor::full(&[ch], T::one()), true);
    for b in ["b_i", "b_c", "b_o"] {
        store.add(format!("{prefix}.{b}"), Tensor::zeros(&[ch]), true);
    }
}

/// Fresh parameters for `config`, deterministic in `seed`.
pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (enc, c_in) in [("light", 3), ("aux", 4)] {
        add_cstem(&mut store, &mut rng, &format!("{enc}.stem"), c_in, config);
        add_cell(&mut store, &mut rng, &format!("{enc}.cell"), config);
    }
    let ch = config.c_hidden;
    add_conv(&mut store, &mut rng, "fusion.c", ch, 2 * ch, 1, true);
    add_conv(&mut store, &mut rng, "fusion.h", ch, 2 * ch, 1, true);
    add_cstem(&mut store, &mut rng, "decoder.stem", 1, config);
    add_cell(&mut store, &mut rng, "decoder.cell", config);
    let mut c = ch;
    for stage in 0..config.cstem_stages {
        // Transposed-conv weights are [c_in, c_out, k, k]; fan-in follows c_out·k².
        let out = c / 2;
        let bound = 1.0 / ((out * UPSCALE_KERNEL * UPSCALE_KERNEL) as f64).sqrt();
        let name = format!("upscaler.up{stage}");
        store.add(
            format!("{name}.weight"),
            uniform(&mut rng, &[c, out, UPSCALE_KERNEL, UPSCALE_KERNEL], bound),
            true,
        );
        store.add(format!("{name}.bias"), uniform(&mut rng, &[out], bound), true);
        c = out;
    }
    let bound = 1.0 / (c as f64).sqrt();
    store.add("upscaler.head.weight", uniform(&mut rng, &[1, c, 1, 1], bound), true);
    store.add("upscaler.head.bias", Tensor::zeros(&[1]), true);
    Ok(store)
}

// ---------------------------------------------------------------------------
// Blocks

/// Parallel odd-kernel branches, concatenated and fused by a 1×1 conv.
pub fn multibranch_conv<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    prefix: &str,
    x: NodeId,
    kernels: &[usize],
    mode: BlockMode,
) -> NodeId {
    let mut parts = Vec::with_capacity(kernels.len());
    for &k in kernels {
        let name = format!("{prefix}.branch{k}");
        let w = ctx.param(&format!("{name}.weight"));
        let y = match mode {
            BlockMode::Lstm => {
                let b = ctx.param(&format!("{name}.bias"));
                ctx.graph.conv2d(x, w, Some(b), k / 2)
            }
            BlockMode::CStem => {
                let y = ctx.graph.conv2d(x, w, None, k / 2);
                let gamma = ctx.param(&format!("{name}.bn.gamma"));
                let beta = ctx.param(&format!("{name}.bn.beta"));
                let bn = format!("{name}.bn");
                let store = ctx.store;
                let rm = store.get(&format!("{bn}.running_mean")).data();
                let rv = store.get(&format!("{bn}.running_var")).data();
                let (y, stats) = ctx.graph.batch_norm(y, gamma, beta, (rm, rv), ctx.bn_eps);
                if let Some(stats) = stats {
                    ctx.bn_updates.push((bn, stats));
                }
                y
            }
        };
        parts.push(ctx.graph.relu(y));
    }
    let cat = if parts.len() == 1 {
        parts[0]
    } else {
        ctx.graph.concat(&parts)
    };
    let w = ctx.param(&format!("{prefix}.fuse.weight"));
    let b = (mode == BlockMode::CStem).then(|| ctx.param(&format!("{prefix}.fuse.bias")));
    ctx.graph.conv2d(cat, w, b, 0)
}

/// `cstem_stages` × (multi-branch block → 2×2 max-pool).
pub fn cstem_forward<T: Scalar>(ctx: &mut Ctx<'_, T>, prefix: &str, x: NodeId, config: &ModelConfig) -> NodeId {
    let mut y = x;
    for stage in 0..config.cstem_stages {
        let z = multibranch_conv(ctx, &format!("{prefix}.{stage}"), y, &config.branch_kernels, BlockMode::CStem);
        y = ctx.graph.max_pool2(z);
    }
    y
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellState {
    pub h: NodeId,
    pub c: NodeId,
}

/// Gate activations of one cell step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Gates {
    pub f: NodeId,
    pub i: NodeId,
    pub o: NodeId,
}

pub fn zero_state<T: Scalar>(ctx: &mut Ctx<'_, T>, batch: usize, config: &ModelConfig) -> CellState {
    let (r, c) = config.latent();
    let shape = [batch, config.c_hidden, r, c];
    CellState {
        h: ctx.constant(Tensor::zeros(&shape)),
        c: ctx.constant(Tensor::zeros(&shape)),
    }
}

pub fn mbconvlstm_step<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    prefix: &str,
    x: NodeId,
    state: CellState,
    config: &ModelConfig,
) -> CellState {
    mbconvlstm_step_with_gates(ctx, prefix, x, state, config).0
}

/// One peephole ConvLSTM step whose input and hidden transforms are
/// multi-branch blocks.
pub fn mbconvlstm_step_with_gates<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    prefix: &str,
    x: NodeId,
    state: CellState,
    config: &ModelConfig,
) -> (CellState, Gates) {
    let ch = config.c_hidden;
    let k = &config.branch_kernels;
    let xb = multibranch_conv(ctx, &format!("{prefix}.input"), x, k, BlockMode::Lstm);
    let hb = multibranch_conv(ctx, &format!("{prefix}.hidden"), state.h, k, BlockMode::Lstm);
    let z = ctx.graph.add(xb, hb);
    let part: Vec<NodeId> = (0..4).map(|q| ctx.graph.narrow(z, q * ch, ch)).collect();
    let p = |ctx: &mut Ctx<'_, T>, name: &str| ctx.param(&format!("{prefix}.{name}"));

    let (w_cf, w_ci, w_co) = (p(ctx, "w_cf"), p(ctx, "w_ci"), p(ctx, "w_co"));
    let (b_f, b_i, b_c, b_o) = (p(ctx, "b_f"), p(ctx, "b_i"), p(ctx, "b_c"), p(ctx, "b_o"));
    let g = &mut ctx.graph;

    let peep = g.batch_hadamard(state.c, w_cf);
    let f = g.add(part[0], peep);
    let f = g.channel_bias(f, b_f);
    let f = g.sigmoid(f);

    let peep = g.batch_hadamard(state.c, w_ci);
    let i = g.add(part[1], peep);
    let i = g.channel_bias(i, b_i);
    let i = g.sigmoid(i);

    let cand = g.channel_bias(part[2], b_c);
    let cand = g.tanh(cand);
    let keep = g.mul(f, state.c);
    let write = g.mul(i, cand);
    let c = g.add(keep, write);

    let peep = g.batch_hadamard(c, w_co);
    let o = g.add(part[3], peep);
    let o = g.channel_bias(o, b_o);
    let o = g.sigmoid(o);
    let tc = g.tanh(c);
    let h = g.mul(o, tc);
    (CellState { h, c }, Gates { f, i, o })
}

/// Run an encoder over `seq` (one `[B, C_in, R, C]` node per step) from a zero state.
pub fn encode<T: Scalar>(ctx: &mut Ctx<'_, T>, prefix: &str, seq: &[NodeId], config: &ModelConfig) -> CellState {
    let batch = ctx.value(seq[0]).shape()[0];
    let mut state = zero_state(ctx, batch, config);
    for &x in seq {
        let z = cstem_forward(ctx, &format!("{prefix}.stem"), x, config);
        state = mbconvlstm_step(ctx, &format!("{prefix}.cell"), z, state, config);
    }
    state
}

/// `ReLU(K₁ * (light ‖ aux))`, with separate 1×1 kernels for C and H.
pub fn fuse_states<T: Scalar>(ctx: &mut Ctx<'_, T>, light: CellState, aux: CellState) -> CellState {
    fn fuse<T: Scalar>(ctx: &mut Ctx<'_, T>, name: &str, a: NodeId, b: NodeId) -> NodeId {
        let w = ctx.param(&format!("fusion.{name}.weight"));
        let bias = ctx.param(&format!("fusion.{name}.bias"));
        let cat = ctx.graph.concat(&[a, b]);
        let y = ctx.graph.conv2d(cat, w, Some(bias), 0);
        ctx.graph.relu(y)
    }
    let c = fuse(ctx, "c", light.c, aux.c);
    let h = fuse(ctx, "h", light.h, aux.h);
    CellState { h, c }
}

/// Transposed convolutions back to grid resolution, a 1×1 head, and a crop
/// to `rows × cols`. Returns logits `[B, 1, rows, cols]`.
pub fn upscale<T: Scalar>(ctx: &mut Ctx<'_, T>, x: NodeId, config: &ModelConfig) -> NodeId {
    let mut y = x;
    for stage in 0..config.cstem_stages {
        let w = ctx.param(&format!("upscaler.up{stage}.weight"));
        let b = ctx.param(&format!("upscaler.up{stage}.bias"));
        y = ctx.graph.conv_transpose2d(y, w, Some(b), 2, 1);
        y = ctx.graph.relu(y);
    }
    let w = ctx.param("upscaler.head.weight");
    let b = ctx.param("upscaler.head.bias");
    let y = ctx.graph.conv2d(y, w, Some(b), 0);
    ctx.graph.crop(y, config.rows, config.cols)
}

/// Autoregressive decoder: each step consumes the previous probability frame.
pub fn decode<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    fused: CellState,
    first_frame: NodeId,
    config: &ModelConfig,
) -> Vec<NodeId> {
    let mut state = fused;
    let mut frame = first_frame;
    let mut out = Vec::with_capacity(config.h);
    for _ in 0..config.h {
        let z = cstem_forward(ctx, "decoder.stem", frame, config);
        state = mbconvlstm_step(ctx, "decoder.cell", z, state, config);
        let logits = upscale(ctx, state.h, config);
        frame = ctx.graph.sigmoid(logits);
        out.push(frame);
    }
    out
}

/// Model inputs for a batch of windows, with feature masks applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    /// One `[B, 3, R, C]` tensor per history step.
    pub light: Vec<Tensor<T>>,
    /// One `[B, 4, R, C]` tensor per history step.
    pub aux: Vec<Tensor<T>>,
    /// `[B, 1, R, C]` last observed occurrence.
    pub seed: Tensor<T>,
    /// `[B, h, R, C]` binary targets.
    pub target: Tensor<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn from_windows(windows: &[&SampleWindow], config: &ModelConfig) -> Result<Self> {
        let Some(first) = windows.first() else {
            return Err(Error::Config("empty batch".into()));
        };
        let (s, h) = (first.history(), first.horizon());
        let (r, c) = (config.rows, config.cols);
        if s != config.s || h != config.h {
            return Err(Error::Config(format!(
                "window has s={s}, h={h}; model expects s={}, h={}",
                config.s, config.h
            )));
        }
        for w in windows {
            let ok = w.light_in.shape() == [s, 3, r, c] && w.aux_in.shape() == [s, 4, r, c] && w.target.shape() == [h, r, c];
            if !ok {
                return Err(Error::Config(format!(
                    "window shape {:?} does not match model grid {r}×{c}",
                    w.light_in.shape()
                )));
            }
        }
        let plane = r * c;
        let light_mask = [config.use_lightning; 3];
        let aux_mask = [config.use_radar, config.use_cloud, config.use_cloud, config.use_cloud];
        let gather = |aux: bool, t: usize, mask: &[bool]| {
            let ch = mask.len();
            let mut data = Vec::with_capacity(windows.len() * ch * plane);
            for w in windows {
                let src = if aux { &w.aux_in } else { &w.light_in };
                let block = &src.data()[t * ch * plane..(t + 1) * ch * plane];
                for (k, &keep) in mask.iter().enumerate() {
                    let chan = &block[k * plane..(k + 1) * plane];
                    if keep {
                        data.extend(chan.iter().map(|&v| T::of(v as f64)));
                    } else {
                        data.extend(std::iter::repeat_n(T::zero(), plane));
                    }
                }
            }
            Tensor::from_vec(&[windows.len(), ch, r, c], data)
        };
        let light = (0..s).map(|t| gather(false, t, &light_mask)).collect();
        let aux = (0..s).map(|t| gather(true, t, &aux_mask)).collect();
        let mut seed = Vec::with_capacity(windows.len() * plane);
        for w in windows {
            if config.use_lightning {
                seed.extend(w.last_occurrence().data().iter().map(|&v| T::of(v as f64)));
            } else {
                seed.extend(std::iter::repeat_n(T::zero(), plane));
            }
        }
        let target = windows
            .iter()
            .flat_map(|w| w.target.data().iter().map(|&v| T::of(v as f64)))
            .collect();
        Ok(Batch {
            light,
            aux,
            seed: Tensor::from_vec(&[windows.len(), 1, r, c], seed),
            target: Tensor::from_vec(&[windows.len(), h, r, c], target),
        })
    }

    pub fn len(&self) -> usize {
        self.seed.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Full forward pass; returns `[B, h, R, C]` probabilities.
pub fn deeplight_forward<T: Scalar>(ctx: &mut Ctx<'_, T>, config: &ModelConfig, batch: &Batch<T>) -> NodeId {
    let light: Vec<NodeId> = batch.light.iter().map(|t| ctx.constant(t.clone())).collect();
    let aux: Vec<NodeId> = batch.aux.iter().map(|t| ctx.constant(t.clone())).collect();
    let light_state = encode(ctx, "light", &light, config);
    let aux_state = encode(ctx, "aux", &aux, config);
    let fused = fuse_states(ctx, light_state, aux_state);
    let seed = ctx.constant(batch.seed.clone());
    let frames = decode(ctx, fused, seed, config);
    ctx.graph.concat(&frames)
}

/// Sidecar written next to every parameter blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSidecar {
    pub format: String,
    pub params_file: String,
    pub model: ModelConfig,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub const CHECKPOINT_FORMAT: &str = "deeplight-checkpoint-v1";

/// A configured model with `f32` parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepLight {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
}

impl DeepLight {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(DeepLight { config, params })
    }

    /// Inference with running batch-norm statistics; `[B, h, R, C]`.
    pub fn predict(&self, windows: &[&SampleWindow]) -> Result<Tensor<f32>> {
        let batch = Batch::from_windows(windows, &self.config)?;
        let mut ctx = Ctx::new(&self.params, false, self.config.bn_eps);
        let out = deeplight_forward(&mut ctx, &self.config, &batch);
        Ok(ctx.value(out).clone())
    }

    /// Write `<path>` (blob) and `<path>.json` (sidecar).
    pub fn save(&self, path: &Path, metadata: serde_json::Value) -> Result<()> {
        self.params.save(path)?;
        let sidecar = CheckpointSidecar {
            format: CHECKPOINT_FORMAT.into(),
            params_file: path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            model: self.config.clone(),
            metadata,
        };
        std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
        Ok(())
    }

    /// Load a checkpoint from its blob path or its sidecar path.
    pub fn load(path: &Path) -> Result<(Self, CheckpointSidecar)> {
        let sidecar_file = if path.extension().is_some_and(|e| e == "json") {
            path.to_path_buf()
        } else {
            sidecar_path(path)
        };
        let text = std::fs::read_to_string(&sidecar_file).map_err(|e| Error::storage(&sidecar_file, e.to_string()))?;
        let sidecar: CheckpointSidecar =
            serde_json::from_str(&text).map_err(|e| Error::storage(&sidecar_file, e.to_string()))?;
        if sidecar.format != CHECKPOINT_FORMAT {
            return Err(Error::storage(&sidecar_file, format!("unknown format {}", sidecar.format)));
        }
        let blob = sidecar_file
            .parent()
            .unwrap_or(Path::new("."))
            .join(&sidecar.params_file);
        let params = ParamStore::load(&blob)?;
        init_params::<f32>(&sidecar.model, 0)?.check_layout(&params)?;
        Ok((
            DeepLight {
                config: sidecar.model.clone(),
                params,
            },
            sidecar,
        ))
    }
}

pub fn sidecar_path(blob: &Path) -> PathBuf {
    let mut name = blob.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    blob.with_file_name(name)
}
