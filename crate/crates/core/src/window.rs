//! Sample windows: `s` past hours of inputs plus `h` future occurrence targets.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};

use crate::dataset::{Dataset, DatasetManifest, NormalizationStats, Split};
use crate::error::{Error, Result};
use crate::grid::FeatureId;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleWindow {
    /// `[s, 3, rows, cols]`: occurrence, flash count, flash energy.
    pub light_in: Tensor<f32>,
    /// `[s, 4, rows, cols]`: reflectivity, cloud top height, cloud top pressure, optical depth.
    pub aux_in: Tensor<f32>,
    /// `[h, rows, cols]`, binary.
    pub target: Tensor<f32>,
    pub anchor_time: DateTime<Utc>,
    /// Hour index of the first target frame.
    pub anchor: usize,
    pub split: Split,
}

impl SampleWindow {
    pub fn history(&self) -> usize {
        self.light_in.shape()[0]
    }

    pub fn horizon(&self) -> usize {
        self.target.shape()[0]
    }

    /// The last observed occurrence frame, `[rows, cols]`.
    pub fn last_occurrence(&self) -> Tensor<f32> {
        let [s, c, r, w] = self.light_in.dims4();
        let start = ((s - 1) * c) * r * w;
        Tensor::from_vec(&[r, w], self.light_in.data()[start..start + r * w].to_vec())
    }
}

/// Anchor hour indices of every valid window.
///
/// Anchors step by `stride` starting at `s`. A window is kept when its
/// `s + h` hours are consecutive, carry the anchor's split tag, and have
/// stored frames for every input feature.
pub fn window_anchors(manifest: &DatasetManifest, s: usize, h: usize, stride: usize) -> Result<Vec<usize>> {
    if s == 0 || h == 0 || stride == 0 {
        return Err(Error::Config(format!("need s, h, stride >= 1 (got {s}, {h}, {stride})")));
    }
    if manifest.splits.len() != manifest.hours.len() || manifest.hours.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Manifest("hours must be sorted and tagged".into()));
    }
    for f in FeatureId::INPUTS {
        if !manifest.features.contains(&f) {
            return Err(Error::Manifest(format!("dataset lacks input feature {f}")));
        }
    }
    let n = manifest.hours.len();
    let mut gap = vec![false; n];
    for f in FeatureId::INPUTS {
        for &g in manifest.gaps.get(&f).into_iter().flatten() {
            if g < n {
                gap[g] = true;
            }
        }
    }
    let mut anchors = Vec::new();
    let mut a = s;
    while a + h <= n {
        let span = a - s..a + h;
        let split = manifest.splits[a];
        let ok = manifest.contiguous(span.start, span.end)
            && span.clone().all(|i| !gap[i] && manifest.splits[i] == split);
        if ok {
            anchors.push(a);
        }
        a += stride;
    }
    Ok(anchors)
}

/// All input frames of a dataset held in memory.
#[derive(Debug, Clone)]
pub struct FrameCache {
    manifest: DatasetManifest,
    frames: BTreeMap<FeatureId, Vec<Option<Vec<f32>>>>,
}

impl FrameCache {
    pub fn load(dataset: &Dataset) -> Result<Self> {
        let mut frames = BTreeMap::new();
        for f in FeatureId::INPUTS {
            frames.insert(f, dataset.load_feature(f)?);
        }
        Ok(FrameCache {
            manifest: dataset.manifest().clone(),
            frames,
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    fn frame(&self, feature: FeatureId, hour: usize) -> Result<&[f32]> {
        self.frames[&feature][hour]
            .as_deref()
            .ok_or_else(|| Error::Manifest(format!("{feature} hour {hour} is gap-marked")))
    }

    /// Raw (unnormalised) window anchored at `anchor`.
    pub fn window(&self, anchor: usize, s: usize, h: usize) -> Result<SampleWindow> {
        let grid = self.manifest.grid;
        let cells = grid.cells();
        if anchor < s || anchor + h > self.manifest.hours.len() {
            return Err(Error::Config(format!("anchor {anchor} out of range")));
        }
        let mut light = Vec::with_capacity(s * 3 * cells);
        let mut aux = Vec::with_capacity(s * 4 * cells);
        for hour in anchor - s..anchor {
            for f in FeatureId::LIGHTNING {
                light.extend_from_slice(self.frame(f, hour)?);
            }
            for f in FeatureId::AUXILIARY {
                aux.extend_from_slice(self.frame(f, hour)?);
            }
        }
        let mut target = Vec::with_capacity(h * cells);
        for hour in anchor..anchor + h {
            target.extend(
                self.frame(FeatureId::Occurrence, hour)?
                    .iter()
                    .map(|&v| if v > 0.0 { 1.0 } else { 0.0 }),
            );
        }
        Ok(SampleWindow {
            light_in: Tensor::from_vec(&[s, 3, grid.rows, grid.cols], light),
            aux_in: Tensor::from_vec(&[s, 4, grid.rows, grid.cols], aux),
            target: Tensor::from_vec(&[h, grid.rows, grid.cols], target),
            anchor_time: self.manifest.hours[anchor],
            anchor,
            split: self.manifest.splits[anchor],
        })
    }

    /// Window whose inputs end just before `anchor`, for forecasting past
    /// the end of the record. `anchor` may equal the number of hours; target
    /// frames that are missing or beyond the record are left at zero.
    pub fn forecast_window(&self, anchor: usize, s: usize, h: usize) -> Result<SampleWindow> {
        let n = self.manifest.hours.len();
        if anchor < s || anchor > n {
            return Err(Error::Config(format!("anchor {anchor} out of range for s={s} and {n} hours")));
        }
        if anchor + h <= n {
            if let Ok(w) = self.window(anchor, s, h) {
                return Ok(w);
            }
        }
        let mut w = self.window_inputs(anchor, s)?;
        let cells = self.manifest.grid.cells();
        let mut target = vec![0.0; h * cells];
        for (k, hour) in (anchor..(anchor + h).min(n)).enumerate() {
            if let Ok(frame) = self.frame(FeatureId::Occurrence, hour) {
                for (t, &v) in target[k * cells..(k + 1) * cells].iter_mut().zip(frame) {
                    *t = if v > 0.0 { 1.0 } else { 0.0 };
                }
            }
        }
        let grid = self.manifest.grid;
        w.target = Tensor::from_vec(&[h, grid.rows, grid.cols], target);
        Ok(w)
    }

    fn window_inputs(&self, anchor: usize, s: usize) -> Result<SampleWindow> {
        let grid = self.manifest.grid;
        let cells = grid.cells();
        let mut light = Vec::with_capacity(s * 3 * cells);
        let mut aux = Vec::with_capacity(s * 4 * cells);
        for hour in anchor - s..anchor {
            for f in FeatureId::LIGHTNING {
                light.extend_from_slice(self.frame(f, hour)?);
            }
            for f in FeatureId::AUXILIARY {
                aux.extend_from_slice(self.frame(f, hour)?);
            }
        }
        let hours = &self.manifest.hours;
        let anchor_time = match hours.get(anchor) {
            Some(&t) => t,
            None => hours[anchor - 1] + chrono::Duration::hours(1),
        };
        Ok(SampleWindow {
            light_in: Tensor::from_vec(&[s, 3, grid.rows, grid.cols], light),
            aux_in: Tensor::from_vec(&[s, 4, grid.rows, grid.cols], aux),
            target: Tensor::zeros(&[0, grid.rows, grid.cols]),
            anchor_time,
            anchor,
            split: self.manifest.splits[anchor.min(hours.len() - 1)],
        })
    }
}

/// Materialise every valid window (all splits) with raw values.
pub fn build_windows(dataset: &Dataset, s: usize, h: usize, stride: usize) -> Result<Vec<SampleWindow>> {
    let anchors = window_anchors(dataset.manifest(), s, h, stride)?;
    let cache = FrameCache::load(dataset)?;
    anchors.into_iter().map(|a| cache.window(a, s, h)).collect()
}

fn transform_channels(
    tensor: &Tensor<f32>,
    features: &[FeatureId],
    stats: &NormalizationStats,
    invert: bool,
) -> Tensor<f32> {
    let [_, c, r, w] = tensor.dims4();
    let plane = r * w;
    let mut out = tensor.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let feature = features[i % c];
        if feature == FeatureId::Occurrence {
            continue;
        }
        let Some(norm) = stats.get(&feature) else { continue };
        for v in chunk {
            *v = if invert { norm.invert(*v) } else { norm.apply(*v) };
        }
    }
    out
}

/// Scale inputs with training statistics. Occurrence and the target pass
/// through unchanged.
pub fn normalize_window(window: &SampleWindow, stats: &NormalizationStats) -> SampleWindow {
    SampleWindow {
        light_in: transform_channels(&window.light_in, &FeatureId::LIGHTNING, stats, false),
        aux_in: transform_channels(&window.aux_in, &FeatureId::AUXILIARY, stats, false),
        ..window.clone()
    }
}

/// Inverse of [`normalize_window`].
pub fn denormalize_window(window: &SampleWindow, stats: &NormalizationStats) -> SampleWindow {
    SampleWindow {
        light_in: transform_channels(&window.light_in, &FeatureId::LIGHTNING, stats, true),
        aux_in: transform_channels(&window.aux_in, &FeatureId::AUXILIARY, stats, true),
        ..window.clone()
    }
}
