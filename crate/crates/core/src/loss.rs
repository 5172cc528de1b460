//! Weighted BCE and the neighbourhood-aware hazy loss.
//!
//! Losses are evaluated outside the autodiff tape in `f64`; each returns its
//! analytic gradient with respect to the prediction, which the caller seeds
//! into [`crate::autograd::Graph::backward`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Smallest ratio of boundary to centre weight accepted along each axis.
pub const EDGE_RATIO: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub spatial_value: f64,
    pub temporal_value: f64,
    /// Interpret the two values above as variances (σ = √value).
    pub value_is_variance: bool,
    pub pos_weight: f64,
    pub eps: f64,
    /// Add the hazy term to WBCE.
    pub hazy: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            spatial_value: 19.21,
            temporal_value: 0.96,
            value_is_variance: true,
            pos_weight: 20.0,
            eps: 1e-7,
            hazy: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.spatial_value > 0.0
            && self.temporal_value > 0.0
            && self.pos_weight > 0.0
            && self.eps > 0.0
            && self.eps < 0.5
            && self.spatial_value.is_finite()
            && self.temporal_value.is_finite()
            && self.pos_weight.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid loss config {self:?}")))
        }
    }

    /// `(σ_t, σ_y, σ_x)`.
    pub fn sigmas(&self) -> [f64; 3] {
        let conv = |v: f64| if self.value_is_variance { v.sqrt() } else { v };
        let s = conv(self.spatial_value);
        [conv(self.temporal_value), s, s]
    }
}

/// Sampled, truncated, unit-sum 3-D Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurKernel3D {
    pub sigmas: [f64; 3],
    pub sizes: [usize; 3],
    /// Row-major `[t][y][x]`, unit sum.
    pub weights: Vec<f64>,
    /// Density at the origin before renormalisation.
    pub raw_center: f64,
    /// Per-axis 1-D factors (unit sum) whose outer product is `weights`.
    axes: [Vec<f64>; 3],
}

/// Half-width for one axis: at least ⌈4σ⌉, widened until the edge sample is
/// at most [`EDGE_RATIO`] of the centre.
pub fn kernel_radius(sigma: f64) -> usize {
    let mut r = (4.0 * sigma).ceil() as usize;
    while (-((r * r) as f64) / (2.0 * sigma * sigma)).exp() > EDGE_RATIO {
        r += 1;
    }
    r
}

pub fn gaussian_kernel_3d(config: &LossConfig) -> BlurKernel3D {
    kernel_from_sigmas(config.sigmas())
}

pub fn kernel_from_sigmas(sigmas: [f64; 3]) -> BlurKernel3D {
    let axes = sigmas.map(|s| {
        let r = kernel_radius(s) as i64;
        let v: Vec<f64> = (-r..=r)
            .map(|d| (-((d * d) as f64) / (2.0 * s * s)).exp())
            .collect();
        let sum: f64 = v.iter().sum();
        v.into_iter().map(|x| x / sum).collect::<Vec<_>>()
    });
    let sizes = [axes[0].len(), axes[1].len(), axes[2].len()];
    let mut weights = Vec::with_capacity(sizes.iter().product());
    for &a in &axes[0] {
        for &b in &axes[1] {
            for &c in &axes[2] {
                weights.push(a * b * c);
            }
        }
    }
    let raw_center = (2.0 * std::f64::consts::PI).powf(-1.5) / (sigmas[0] * sigmas[1] * sigmas[2]);
    BlurKernel3D {
        sigmas,
        sizes,
        weights,
        raw_center,
        axes,
    }
}

impl BlurKernel3D {
    pub fn radii(&self) -> [usize; 3] {
        self.sizes.map(|s| s / 2)
    }

    pub fn weight(&self, t: usize, y: usize, x: usize) -> f64 {
        self.weights[(t * self.sizes[1] + y) * self.sizes[2] + x]
    }
}

/// Zero-padded "same" convolution along one axis of a `[d0, d1, d2]` volume.
fn convolve_axis(data: &[f64], dims: [usize; 3], axis: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let strides = [dims[1] * dims[2], dims[2], 1];
    let n = dims[axis] as isize;
    let mut out = vec![0.0; data.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let pos = ((i / strides[axis]) % dims[axis]) as isize;
        let base = i as isize - pos * strides[axis] as isize;
        let mut acc = 0.0;
        for (k, &w) in kernel.iter().enumerate() {
            let q = pos + k as isize - r;
            if q >= 0 && q < n {
                acc += w * data[(base + q * strides[axis] as isize) as usize];
            }
        }
        *o = acc;
    }
    out
}

/// `K_g * Padding(L)` without the per-slice normalisation. `l` is `[h, R, C]`.
pub fn blur_unnormalized(l: &[f64], dims: [usize; 3], kernel: &BlurKernel3D) -> Vec<f64> {
    let mut v = l.to_vec();
    for axis in 0..3 {
        v = convolve_axis(&v, dims, axis, &kernel.axes[axis]);
    }
    v
}

/// Blurred truth scaled so every non-empty time slice peaks at 1.
pub fn blur_ground_truth(l: &[f64], dims: [usize; 3], kernel: &BlurKernel3D) -> Vec<f64> {
    let mut v = blur_unnormalized(l, dims, kernel);
    for slice in v.chunks_mut(dims[1] * dims[2]) {
        let max = slice.iter().cloned().fold(0.0, f64::max);
        if max > 0.0 {
            slice.iter_mut().for_each(|x| *x /= max);
        }
    }
    v
}

fn check(pred: &[f64], truth: &[f64]) {
    assert_eq!(pred.len(), truth.len(), "prediction and truth sizes differ");
}

fn clamp(p: f64, eps: f64) -> (f64, bool) {
    if p < eps {
        (eps, false)
    } else if p > 1.0 - eps {
        (1.0 - eps, false)
    } else {
        (p, true)
    }
}

/// `-mean(w·y·log ŷ + (1-y)·log(1-ŷ))` and its gradient.
pub fn wbce_with_grad(pred: &[f64], truth: &[f64], w: f64, eps: f64) -> (f64, Vec<f64>) {
    check(pred, truth);
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &y) in pred.iter().zip(truth) {
        let (q, inside) = clamp(p, eps);
        loss -= w * y * q.ln() + (1.0 - y) * (1.0 - q).ln();
        let d = if inside { -(w * y / q - (1.0 - y) / (1.0 - q)) / n } else { 0.0 };
        grad.push(d);
    }
    (loss / n, grad)
}

pub fn wbce_loss(pred: &[f64], truth: &[f64], w: f64, eps: f64) -> f64 {
    wbce_with_grad(pred, truth, w, eps).0
}

/// Importance factor `P = (1 - L_blur)·ŷ + L_blur·(1 - ŷ)`.
pub fn importance(pred: f64, blur: f64) -> f64 {
    (1.0 - blur) * pred + blur * (1.0 - pred)
}

/// Per-cell hazy term `P·B`.
pub fn hazy_cell(pred: f64, truth: f64, blur: f64, eps: f64) -> f64 {
    let (q, _) = clamp(pred, eps);
    let b = -(truth * q.ln() + (1.0 - truth) * (1.0 - q).ln());
    importance(pred, blur) * b
}

/// `sum(P·B) / len` and its gradient; `blur` is treated as data.
pub fn hazy_with_grad(pred: &[f64], truth: &[f64], blur: &[f64], eps: f64) -> (f64, Vec<f64>) {
    check(pred, truth);
    check(pred, blur);
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for ((&p, &y), &lb) in pred.iter().zip(truth).zip(blur) {
        let (q, inside) = clamp(p, eps);
        let b = -(y * q.ln() + (1.0 - y) * (1.0 - q).ln());
        let pw = importance(p, lb);
        loss += pw * b;
        let db = if inside { -(y / q - (1.0 - y) / (1.0 - q)) } else { 0.0 };
        grad.push(((1.0 - 2.0 * lb) * b + pw * db) / n);
    }
    (loss / n, grad)
}

pub fn hazy_loss(pred: &[f64], truth: &[f64], blur: &[f64], eps: f64) -> f64 {
    hazy_with_grad(pred, truth, blur, eps).0
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue<T> {
    pub total: f64,
    pub wbce: f64,
    pub hazy: f64,
    /// d total / d pred, same shape as the prediction.
    pub grad: Tensor<T>,
}

/// Loss over a `[B, h, R, C]` batch; the blur is computed per sample.
pub struct Objective {
    pub config: LossConfig,
    pub kernel: BlurKernel3D,
}

impl Objective {
    pub fn new(config: LossConfig) -> Result<Self> {
        config.validate()?;
        let kernel = gaussian_kernel_3d(&config);
        Ok(Objective { config, kernel })
    }

    pub fn evaluate<T: Scalar>(&self, pred: &Tensor<T>, truth: &Tensor<T>) -> LossValue<T> {
        assert_eq!(pred.shape(), truth.shape(), "prediction and truth shapes differ");
        let [b, h, r, c] = pred.dims4();
        let p: Vec<f64> = pred.data().iter().map(|v| v.as_f64()).collect();
        let y: Vec<f64> = truth.data().iter().map(|v| v.as_f64()).collect();
        let (wbce, mut grad) = wbce_with_grad(&p, &y, self.config.pos_weight, self.config.eps);
        let mut hazy = 0.0;
        if self.config.hazy {
            let per = h * r * c;
            for s in 0..b {
                let range = s * per..(s + 1) * per;
                let blur = blur_ground_truth(&y[range.clone()], [h, r, c], &self.kernel);
                let (l, g) = hazy_with_grad(&p[range.clone()], &y[range.clone()], &blur, self.config.eps);
                hazy += l / b as f64;
                for (dst, gv) in grad[range].iter_mut().zip(g) {
                    *dst += gv / b as f64;
                }
            }
        }
        LossValue {
            total: wbce + hazy,
            wbce,
            hazy,
            grad: Tensor::from_vec(pred.shape(), grad.into_iter().map(T::of).collect()),
        }
    }
}
