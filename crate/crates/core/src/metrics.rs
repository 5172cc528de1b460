//! Contingency-table verification scores.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::window::SampleWindow;

pub const DEFAULT_THRESHOLD: f32 = 0.5;
pub const DEFAULT_HORIZONS: [usize; 3] = [1, 3, 6];

/// Cells with `p >= threshold` are positive.
pub fn binarize(pred: &[f32], threshold: f32) -> Vec<bool> {
    pred.iter().map(|&p| p >= threshold).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        ConfusionCounts { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn pod(&self) -> f64 {
        ratio(self.tp as f64, (self.tp + self.fn_) as f64)
    }

    pub fn far(&self) -> f64 {
        ratio(self.fp as f64, (self.tp + self.fp) as f64)
    }

    /// Hits expected by chance.
    pub fn random_hits(&self) -> f64 {
        ratio(((self.tp + self.fp) * (self.tp + self.fn_)) as f64, self.total() as f64)
    }

    pub fn ets(&self) -> f64 {
        let r = self.random_hits();
        let n = self.total() as f64;
        ratio(self.tp as f64 - r, n - self.tn as f64 - r)
    }

    pub fn micro_f1(&self) -> f64 {
        ratio(2.0 * self.tp as f64, (2 * self.tp + self.fp + self.fn_) as f64)
    }

    /// Mean of the lightning and no-lightning class F1 scores.
    pub fn macro_f1(&self) -> f64 {
        let neg = ratio(2.0 * self.tn as f64, (2 * self.tn + self.fn_ + self.fp) as f64);
        (self.micro_f1() + neg) / 2.0
    }

    pub fn scores(&self) -> Scores {
        Scores {
            pod: self.pod(),
            far: self.far(),
            ets: self.ets(),
            micro_f1: self.micro_f1(),
            macro_f1: self.macro_f1(),
        }
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionCounts::new(self.tp + o.tp, self.fp + o.fp, self.fn_ + o.fn_, self.tn + o.tn)
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// `num / den` with `x/0 -> 0`.
fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub pod: f64,
    pub far: f64,
    pub ets: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
}

pub fn strict_counts(pred: &[bool], truth: &[bool]) -> ConfusionCounts {
    assert_eq!(pred.len(), truth.len(), "prediction and truth sizes differ");
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

/// Binary dilation of a `rows × cols` mask by a `(2r+1)²` square.
pub fn dilate(mask: &[bool], rows: usize, cols: usize, radius: usize) -> Vec<bool> {
    assert_eq!(mask.len(), rows * cols);
    // Separable: rows then columns.
    let mut horiz = vec![false; mask.len()];
    for r in 0..rows {
        for c in 0..cols {
            let lo = c.saturating_sub(radius);
            let hi = (c + radius).min(cols - 1);
            horiz[r * cols + c] = mask[r * cols + lo..=r * cols + hi].iter().any(|&v| v);
        }
    }
    let mut out = vec![false; mask.len()];
    for r in 0..rows {
        let lo = r.saturating_sub(radius);
        let hi = (r + radius).min(rows - 1);
        for c in 0..cols {
            out[r * cols + c] = (lo..=hi).any(|rr| horiz[rr * cols + c]);
        }
    }
    out
}

/// Counts with hits credited within the 8-neighbourhood.
pub fn neighborhood_counts(pred: &[bool], truth: &[bool], rows: usize, cols: usize) -> ConfusionCounts {
    neighborhood_counts_with_radius(pred, truth, rows, cols, 1)
}

/// Neighbourhood counts for a square structuring element of half-width
/// `radius`; radius 0 reproduces [`strict_counts`].
pub fn neighborhood_counts_with_radius(
    pred: &[bool],
    truth: &[bool],
    rows: usize,
    cols: usize,
    radius: usize,
) -> ConfusionCounts {
    assert_eq!(pred.len(), truth.len(), "prediction and truth sizes differ");
    let dt = dilate(truth, rows, cols, radius);
    let dp = dilate(pred, rows, cols, radius);
    let mut c = ConfusionCounts::default();
    for i in 0..pred.len() {
        if pred[i] {
            if dt[i] {
                c.tp += 1;
            } else {
                c.fp += 1;
            }
        }
        if truth[i] && !dp[i] {
            c.fn_ += 1;
        }
    }
    let n = pred.len() as u64;
    let used = c.tp + c.fp + c.fn_;
    assert!(used <= n, "neighbourhood counts exceed cell total");
    c.tn = n - used;
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Strict,
    Neighborhood,
}

impl Mode {
    pub const ALL: [Mode; 2] = [Mode::Strict, Mode::Neighborhood];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Strict => "strict",
            Mode::Neighborhood => "neighborhood",
        }
    }

    fn counts(self, pred: &[bool], truth: &[bool], rows: usize, cols: usize) -> ConfusionCounts {
        match self {
            Mode::Strict => strict_counts(pred, truth),
            Mode::Neighborhood => neighborhood_counts(pred, truth, rows, cols),
        }
    }
}

/// How lead frames are combined within a cumulative horizon.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Sum confusion counts over the first k frames.
    #[default]
    Counts,
    /// Collapse the first k frames by cellwise max, then count once.
    MaxCollapse,
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "counts" => Ok(Pooling::Counts),
            "max" | "max_collapse" => Ok(Pooling::MaxCollapse),
            _ => Err(Error::Config(format!("unknown pooling '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub mode: Mode,
    pub horizon: usize,
    pub counts: ConfusionCounts,
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub threshold: f32,
    pub pooling: Pooling,
    pub windows: usize,
    pub rows: Vec<MetricRow>,
}

impl MetricTable {
    pub fn get(&self, mode: Mode, horizon: usize) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.mode == mode && r.horizon == horizon)
    }

    /// Tab-separated, one line per (mode, horizon).
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("mode\thorizon_h\tPOD\tFAR\tETS\tMicroF1\tMacroF1\n");
        for r in &self.rows {
            let s = r.scores;
            let _ = writeln!(
                out,
                "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
                r.mode.name(),
                r.horizon,
                s.pod,
                s.far,
                s.ets,
                s.micro_f1,
                s.macro_f1
            );
        }
        out
    }
}

/// Pools confusion counts per (mode, horizon) over many windows.
#[derive(Debug, Clone)]
pub struct ScoreAccumulator {
    rows: usize,
    cols: usize,
    h: usize,
    horizons: Vec<usize>,
    threshold: f32,
    pooling: Pooling,
    windows: usize,
    counts: Vec<[ConfusionCounts; 2]>,
}

impl ScoreAccumulator {
    /// Horizons beyond `h` are dropped.
    pub fn new(h: usize, rows: usize, cols: usize, horizons: &[usize], threshold: f32, pooling: Pooling) -> Result<Self> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::Config(format!("threshold {threshold} outside (0, 1)")));
        }
        let horizons: Vec<usize> = horizons.iter().copied().filter(|&k| k >= 1 && k <= h).collect();
        if horizons.is_empty() {
            return Err(Error::Config(format!("no horizon within 1..={h}")));
        }
        Ok(ScoreAccumulator {
            rows,
            cols,
            h,
            counts: vec![[ConfusionCounts::default(); 2]; horizons.len()],
            horizons,
            threshold,
            pooling,
            windows: 0,
        })
    }

    /// Add one window: `pred` holds probabilities, `truth` binary values, both `[h, R, C]`.
    pub fn add(&mut self, pred: &[f32], truth: &[f32]) {
        let plane = self.rows * self.cols;
        assert_eq!(pred.len(), self.h * plane, "prediction shape");
        assert_eq!(truth.len(), self.h * plane, "truth shape");
        let p = binarize(pred, self.threshold);
        let t: Vec<bool> = truth.iter().map(|&v| v > 0.0).collect();
        match self.pooling {
            Pooling::Counts => {
                let mut running = [ConfusionCounts::default(); 2];
                let mut frame = 0;
                for (slot, &k) in self.horizons.iter().enumerate() {
                    while frame < k {
                        let range = frame * plane..(frame + 1) * plane;
                        for (m, mode) in Mode::ALL.iter().enumerate() {
                            running[m] += mode.counts(&p[range.clone()], &t[range.clone()], self.rows, self.cols);
                        }
                        frame += 1;
                    }
                    for m in 0..2 {
                        self.counts[slot][m] += running[m];
                    }
                }
            }
            Pooling::MaxCollapse => {
                for (slot, &k) in self.horizons.iter().enumerate() {
                    let collapse = |v: &[bool]| -> Vec<bool> {
                        (0..plane).map(|i| (0..k).any(|f| v[f * plane + i])).collect()
                    };
                    let (pc, tc) = (collapse(&p), collapse(&t));
                    for (m, mode) in Mode::ALL.iter().enumerate() {
                        self.counts[slot][m] += mode.counts(&pc, &tc, self.rows, self.cols);
                    }
                }
            }
        }
        self.windows += 1;
    }

    pub fn finish(&self) -> MetricTable {
        let mut rows = Vec::new();
        for (m, mode) in Mode::ALL.iter().enumerate() {
            for (slot, &k) in self.horizons.iter().enumerate() {
                let counts = self.counts[slot][m];
                rows.push(MetricRow {
                    mode: *mode,
                    horizon: k,
                    counts,
                    scores: counts.scores(),
                });
            }
        }
        MetricTable {
            threshold: self.threshold,
            pooling: self.pooling,
            windows: self.windows,
            rows,
        }
    }
}

/// Score paired `[h, R, C]` predictions and truths.
pub fn cumulative_scores(
    preds: &[Tensor<f32>],
    truths: &[Tensor<f32>],
    horizons: &[usize],
    threshold: f32,
    pooling: Pooling,
) -> Result<MetricTable> {
    let Some(first) = truths.first() else {
        return Err(Error::Config("nothing to score".into()));
    };
    if preds.len() != truths.len() {
        return Err(Error::Config("prediction and truth counts differ".into()));
    }
    let [h, r, c] = [first.shape()[0], first.shape()[1], first.shape()[2]];
    let mut acc = ScoreAccumulator::new(h, r, c, horizons, threshold, pooling)?;
    for (p, t) in preds.iter().zip(truths) {
        acc.add(p.data(), t.data());
    }
    Ok(acc.finish())
}

/// Repeat the last observed occurrence frame for every lead time.
pub fn persistence_forecast(window: &SampleWindow) -> Tensor<f32> {
    let last = window.last_occurrence();
    let h = window.horizon();
    let plane = last.data();
    let data: Vec<f32> = (0..h).flat_map(|_| plane.iter().copied()).collect();
    let shape = window.target.shape();
    Tensor::from_vec(shape, data)
}
