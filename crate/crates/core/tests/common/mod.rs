#![allow(dead_code)]

//! Straight-line reference implementations used by the integration tests.
//! Nothing here calls into the autodiff engine.

use chrono::{TimeZone, Utc};
use deeplight::dataset::Split;
use deeplight::network::{BlockMode, ModelConfig, ParamStore};
use deeplight::tensor::Tensor;
use deeplight::window::SampleWindow;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// `[n, c, h, w]` volume in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vol {
    pub dims: [usize; 4],
    pub data: Vec<f64>,
}

impl Vol {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Vol {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn random(rng: &mut ChaCha8Rng, dims: [usize; 4], scale: f64) -> Self {
        let data = (0..dims.iter().product::<usize>())
            .map(|_| rng.random_range(-scale..scale))
            .collect();
        Vol { dims, data }
    }

    pub fn from_tensor(t: &Tensor<f64>) -> Self {
        Vol {
            dims: t.dims4(),
            data: t.data().to_vec(),
        }
    }

    pub fn tensor(&self) -> Tensor<f64> {
        Tensor::from_vec(&self.dims, self.data.clone())
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, cc, h, w] = self.dims;
        self.data[((n * cc + c) * h + y) * w + x]
    }

    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut f64 {
        let [_, cc, h, w] = self.dims;
        &mut self.data[((n * cc + c) * h + y) * w + x]
    }

    pub fn max_abs_diff(&self, other: &[f64]) -> f64 {
        assert_eq!(self.data.len(), other.len());
        self.data
            .iter()
            .zip(other)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Zero-padded stride-1 cross-correlation with weights `[c_out, c_in, k, k]`.
pub fn conv2d(x: &Vol, weight: &Tensor<f64>, bias: Option<&Tensor<f64>>, pad: usize) -> Vol {
    let [n, cin, h, w] = x.dims;
    let [cout, wcin, k, _] = weight.dims4();
    assert_eq!(cin, wcin);
    let oh = h + 2 * pad - k + 1;
    let ow = w + 2 * pad - k + 1;
    let wd = weight.data();
    let mut out = Vol::zeros([n, cout, oh, ow]);
    for b in 0..n {
        for o in 0..cout {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = bias.map_or(0.0, |bv| bv.data()[o]);
                    for i in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = (y + ky) as isize - pad as isize;
                                let sx = (xx + kx) as isize - pad as isize;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += wd[((o * cin + i) * k + ky) * k + kx] * x.at(b, i, sy as usize, sx as usize);
                            }
                        }
                    }
                    *out.at_mut(b, o, y, xx) = acc;
                }
            }
        }
    }
    out
}

/// Per-channel normalisation with batch statistics (`train`) or the running ones.
pub fn batch_norm(x: &Vol, store: &ParamStore<f64>, prefix: &str, train: bool, eps: f64) -> Vol {
    let [n, c, h, w] = x.dims;
    let gamma = store.get(&format!("{prefix}.gamma")).data();
    let beta = store.get(&format!("{prefix}.beta")).data();
    let mut out = x.clone();
    for ch in 0..c {
        let (mean, var) = if train {
            let mut vals = Vec::new();
            for b in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        vals.push(x.at(b, ch, y, xx));
                    }
                }
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
            (m, v)
        } else {
            (
                store.get(&format!("{prefix}.running_mean")).data()[ch],
                store.get(&format!("{prefix}.running_var")).data()[ch],
            )
        };
        for b in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let v = x.at(b, ch, y, xx);
                    *out.at_mut(b, ch, y, xx) = gamma[ch] * (v - mean) / (var + eps).sqrt() + beta[ch];
                }
            }
        }
    }
    out
}

pub fn concat(parts: &[Vol]) -> Vol {
    let [n, _, h, w] = parts[0].dims;
    let c: usize = parts.iter().map(|p| p.dims[1]).sum();
    let mut out = Vol::zeros([n, c, h, w]);
    for b in 0..n {
        let mut base = 0;
        for p in parts {
            for ch in 0..p.dims[1] {
                for y in 0..h {
                    for xx in 0..w {
                        *out.at_mut(b, base + ch, y, xx) = p.at(b, ch, y, xx);
                    }
                }
            }
            base += p.dims[1];
        }
    }
    out
}

pub fn multibranch(
    store: &ParamStore<f64>,
    prefix: &str,
    x: &Vol,
    kernels: &[usize],
    mode: BlockMode,
    train: bool,
    eps: f64,
) -> Vol {
    let mut parts = Vec::new();
    for &k in kernels {
        let name = format!("{prefix}.branch{k}");
        let w = store.get(&format!("{name}.weight"));
        let y = match mode {
            BlockMode::Lstm => conv2d(x, w, Some(store.get(&format!("{name}.bias"))), k / 2),
            BlockMode::CStem => batch_norm(&conv2d(x, w, None, k / 2), store, &format!("{name}.bn"), train, eps),
        };
        let mut y = y;
        y.data.iter_mut().for_each(|v| *v = relu(*v));
        parts.push(y);
    }
    let cat = concat(&parts);
    let bias = (mode == BlockMode::CStem).then(|| store.get(&format!("{prefix}.fuse.bias")));
    conv2d(&cat, store.get(&format!("{prefix}.fuse.weight")), bias, 0)
}

pub struct CellOut {
    pub h: Vol,
    pub c: Vol,
    pub f: Vol,
    pub i: Vol,
    pub o: Vol,
}

/// One peephole ConvLSTM step, written out gate by gate.
pub fn cell_step(store: &ParamStore<f64>, prefix: &str, x: &Vol, h: &Vol, c: &Vol, config: &ModelConfig) -> CellOut {
    let ch = config.c_hidden;
    let k = &config.branch_kernels;
    let zx = multibranch(store, &format!("{prefix}.input"), x, k, BlockMode::Lstm, false, config.bn_eps);
    let zh = multibranch(store, &format!("{prefix}.hidden"), h, k, BlockMode::Lstm, false, config.bn_eps);
    let p = |name: &str| store.get(&format!("{prefix}.{name}")).data().to_vec();
    let (w_cf, w_ci, w_co) = (p("w_cf"), p("w_ci"), p("w_co"));
    let (b_f, b_i, b_c, b_o) = (p("b_f"), p("b_i"), p("b_c"), p("b_o"));
    let [n, _, rows, cols] = c.dims;
    let dims = [n, ch, rows, cols];
    let mut out = CellOut {
        h: Vol::zeros(dims),
        c: Vol::zeros(dims),
        f: Vol::zeros(dims),
        i: Vol::zeros(dims),
        o: Vol::zeros(dims),
    };
    for b in 0..n {
        for q in 0..ch {
            for y in 0..rows {
                for xx in 0..cols {
                    let z = |gate: usize| zx.at(b, gate * ch + q, y, xx) + zh.at(b, gate * ch + q, y, xx);
                    let peep = (q * rows + y) * cols + xx;
                    let c_prev = c.at(b, q, y, xx);
                    let f = sigmoid(z(0) + w_cf[peep] * c_prev + b_f[q]);
                    let i = sigmoid(z(1) + w_ci[peep] * c_prev + b_i[q]);
                    let cand = (z(2) + b_c[q]).tanh();
                    let c_new = f * c_prev + i * cand;
                    let o = sigmoid(z(3) + w_co[peep] * c_new + b_o[q]);
                    *out.f.at_mut(b, q, y, xx) = f;
                    *out.i.at_mut(b, q, y, xx) = i;
                    *out.o.at_mut(b, q, y, xx) = o;
                    *out.c.at_mut(b, q, y, xx) = c_new;
                    *out.h.at_mut(b, q, y, xx) = o * c_new.tanh();
                }
            }
        }
    }
    out
}

/// `ReLU(W·(a ‖ b) + bias)` for one of the two fusion kernels.
pub fn fuse(store: &ParamStore<f64>, name: &str, a: &Vol, b: &Vol) -> Vol {
    let w = store.get(&format!("fusion.{name}.weight"));
    let bias = store.get(&format!("fusion.{name}.bias"));
    let mut y = conv2d(&concat(&[a.clone(), b.clone()]), w, Some(bias), 0);
    y.data.iter_mut().for_each(|v| *v = relu(*v));
    y
}

/// Overwrite every parameter with uniform noise; running variances stay positive.
pub fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    for p in store.iter_mut() {
        let positive = p.name.ends_with("running_var") || p.name.ends_with("gamma");
        for v in p.value.data_mut() {
            *v = if positive {
                rng.random_range(0.5..1.5)
            } else {
                rng.random_range(-scale..scale)
            };
        }
    }
}

/// Small random architecture whose latent grid is `rows/4 × cols/4` rounded up.
pub fn small_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let rows = rng.random_range(4..=10);
    let cols = rng.random_range(4..=10);
    let mut config = ModelConfig::new(rows, cols);
    config.s = rng.random_range(1..=3);
    config.h = rng.random_range(1..=3);
    config.c_branch = rng.random_range(1..=3);
    config.c_stem = rng.random_range(1..=3);
    config.c_hidden = 4 * rng.random_range(1..=2);
    config
}

/// Window with non-negative random inputs and a sparse binary target.
pub fn random_window(rng: &mut ChaCha8Rng, s: usize, h: usize, rows: usize, cols: usize) -> SampleWindow {
    let plane = rows * cols;
    let mut light = Vec::with_capacity(s * 3 * plane);
    for _ in 0..s {
        let occ: Vec<f32> = (0..plane).map(|_| (rng.random::<f64>() < 0.2) as u8 as f32).collect();
        light.extend(occ.iter().copied());
        light.extend(occ.iter().map(|&o| o * rng.random_range(1.0..4.0f32)));
        light.extend(occ.iter().map(|&o| o * rng.random_range(0.0..2.0f32)));
    }
    let aux = (0..s * 4 * plane).map(|_| rng.random_range(-1.0..1.0f32)).collect();
    let target = (0..h * plane).map(|_| (rng.random::<f64>() < 0.2) as u8 as f32).collect();
    SampleWindow {
        light_in: Tensor::from_vec(&[s, 3, rows, cols], light),
        aux_in: Tensor::from_vec(&[s, 4, rows, cols], aux),
        target: Tensor::from_vec(&[h, rows, cols], target),
        anchor_time: Utc.with_ymd_and_hms(2023, 4, 1, 0, 0, 0).unwrap(),
        anchor: s,
        split: Split::Train,
    }
}
