//! Drifting-blob storm simulator.
//!
//! Each of `n_storms` slots hosts a sequence of storms. A storm is a
//! Gaussian intensity blob that drifts across the grid and rises and decays
//! over its lifetime; a quiet spell follows before the slot spawns the next
//! one. Cloud channels see the intensity field directly, radar sees it with
//! noise, and lightning fires with a probability driven by the intensity
//! `cloud_lead` hours earlier.

use std::f64::consts::PI;
use std::path::Path;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, DatasetWriter, Split};
use crate::error::{Error, Result};
use crate::grid::{FeatureId, GridSpec};

pub const TRAIN_FRAC: f64 = 0.7;
pub const VAL_FRAC: f64 = 0.15;

pub fn default_start() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2023, 4, 1, 0, 0, 0).unwrap()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StormParams {
    /// Concurrent storm slots.
    pub n_storms: usize,
    /// Mean blob standard deviation in cells; each storm draws from
    /// `[0.5, 1.5] × blob_sigma`.
    pub blob_sigma: f64,
    /// Mean motion in cells per hour, `(rows, cols)`.
    pub drift: (f64, f64),
    /// Mean storm lifetime in hours.
    pub lifetime: usize,
    /// Hours by which the cloud signal precedes lightning.
    pub cloud_lead: usize,
    /// Background occurrence probability per cell and hour.
    pub base_rate: f64,
    /// Occurrence probability per unit of lagged intensity.
    pub gain: f64,
    /// Standard deviation of additive radar noise inside storm footprints.
    pub radar_noise: f64,
    /// Mean flashes per unit intensity, given occurrence.
    pub flash_rate: f64,
    pub seed: u64,
}

impl Default for StormParams {
    fn default() -> Self {
        StormParams {
            n_storms: 3,
            blob_sigma: 2.0,
            drift: (1.2, 1.5),
            lifetime: 10,
            cloud_lead: 1,
            base_rate: 0.0,
            gain: 3.0,
            radar_noise: 0.05,
            flash_rate: 6.0,
            seed: 7,
        }
    }
}

impl StormParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.blob_sigma > 0.0) {
            return Err(Error::Config(format!("blob_sigma must be positive, got {}", self.blob_sigma)));
        }
        if self.lifetime < 1 {
            return Err(Error::Config("lifetime must be at least 1 hour".into()));
        }
        if !(0.0..=1.0).contains(&self.base_rate) {
            return Err(Error::Config(format!("base_rate {} outside [0, 1]", self.base_rate)));
        }
        if !(self.gain >= 0.0) || !(self.radar_noise >= 0.0) || !(self.flash_rate >= 0.0) {
            return Err(Error::Config("gain, radar_noise and flash_rate must be non-negative".into()));
        }
        if !self.drift.0.is_finite() || !self.drift.1.is_finite() {
            return Err(Error::Config("drift must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Storm {
    birth: i64,
    life: usize,
    row: f64,
    col: f64,
    v_row: f64,
    v_col: f64,
    sigma: f64,
    amp: f64,
}

impl Storm {
    /// Rise-and-decay envelope; zero outside the lifetime.
    fn envelope(&self, t: i64) -> f64 {
        let age = t - self.birth;
        if age < 0 || age >= self.life as i64 {
            return 0.0;
        }
        (PI * (age as f64 + 0.5) / self.life as f64).sin()
    }
}

/// All seven input features, one row-major frame per hour each.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub grid: GridSpec,
    pub hours: usize,
    /// Noise-free storm intensity.
    pub intensity: Vec<Vec<f32>>,
    pub frames: Vec<(FeatureId, Vec<Vec<f32>>)>,
}

impl SyntheticScene {
    pub fn feature(&self, feature: FeatureId) -> &[Vec<f32>] {
        &self
            .frames
            .iter()
            .find(|(f, _)| *f == feature)
            .unwrap_or_else(|| panic!("scene lacks {feature}"))
            .1
    }

    /// Fraction of occurrence cells that are positive.
    pub fn positive_rate(&self) -> f64 {
        let occ = self.feature(FeatureId::Occurrence);
        let pos: usize = occ.iter().map(|f| f.iter().filter(|&&v| v > 0.0).count()).sum();
        pos as f64 / (self.hours * self.grid.cells()) as f64
    }
}

fn spawn_storms(grid: &GridSpec, hours: usize, params: &StormParams, rng: &mut ChaCha8Rng) -> Vec<Storm> {
    let (rows, cols) = (grid.rows as f64, grid.cols as f64);
    let span = hours as i64 + params.cloud_lead as i64;
    let mut storms = Vec::new();
    for _ in 0..params.n_storms {
        let mut t = -(rng.random_range(0..=params.lifetime) as i64) - params.cloud_lead as i64;
        while t < span {
            let life = ((params.lifetime as f64 * rng.random_range(0.75..1.25)).round() as usize).max(1);
            let sigma = params.blob_sigma * rng.random_range(0.5..1.5);
            let v_row = params.drift.0 + rng.random_range(-0.3..0.3);
            let v_col = params.drift.1 + rng.random_range(-0.3..0.3);
            // Start upstream so the storm crosses the grid mid-life.
            let half = life as f64 / 2.0;
            let row = rng.random_range(0.0..rows) - v_row * half;
            let col = rng.random_range(0.0..cols) - v_col * half;
            let amp = rng.random_range(0.7..1.0);
            storms.push(Storm {
                birth: t,
                life,
                row,
                col,
                v_row,
                v_col,
                sigma,
                amp,
            });
            t += life as i64 + rng.random_range(0..=params.lifetime) as i64;
        }
    }
    storms
}

fn intensity_at(grid: &GridSpec, storms: &[Storm], t: i64) -> Vec<f32> {
    let mut out = vec![0.0f64; grid.cells()];
    for s in storms {
        let env = s.envelope(t);
        if env == 0.0 {
            continue;
        }
        let dt = (t - s.birth) as f64;
        let (cr, cc) = (s.row + s.v_row * dt, s.col + s.v_col * dt);
        let reach = 4.0 * s.sigma;
        let r0 = (cr - reach).floor().max(0.0) as usize;
        let r1 = ((cr + reach).ceil().max(-1.0) as i64).min(grid.rows as i64 - 1);
        let c0 = (cc - reach).floor().max(0.0) as usize;
        let c1 = ((cc + reach).ceil().max(-1.0) as i64).min(grid.cols as i64 - 1);
        if r1 < 0 || c1 < 0 {
            continue;
        }
        for r in r0..=r1 as usize {
            for c in c0..=c1 as usize {
                let d2 = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
                out[r * grid.cols + c] += s.amp * env * (-d2 / (2.0 * s.sigma * s.sigma)).exp();
            }
        }
    }
    out.into_iter().map(|v| v as f32).collect()
}

/// Simulate `hours` frames in memory.
pub fn simulate(grid: &GridSpec, hours: usize, params: &StormParams) -> Result<SyntheticScene> {
    grid.validate()?;
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let storms = spawn_storms(grid, hours, params, &mut rng);
    let lead = params.cloud_lead as i64;
    let field: Vec<Vec<f32>> = (-lead..hours as i64).map(|t| intensity_at(grid, &storms, t)).collect();
    let intensity: Vec<Vec<f32>> = field[params.cloud_lead..].to_vec();

    let noise = Normal::new(0.0, params.radar_noise).map_err(|e| Error::Config(e.to_string()))?;
    let energy_noise = LogNormal::new(0.0, 0.5).expect("valid lognormal");
    let n = grid.cells();
    let mut occurrence = Vec::with_capacity(hours);
    let mut count = Vec::with_capacity(hours);
    let mut energy = Vec::with_capacity(hours);
    let mut radar = Vec::with_capacity(hours);
    for t in 0..hours {
        let lagged = &field[t];
        let (mut occ, mut cnt, mut en) = (vec![0.0f32; n], vec![0.0f32; n], vec![0.0f32; n]);
        for i in 0..n {
            let driven = params.gain * lagged[i] as f64;
            let p = (driven + params.base_rate).min(1.0);
            if rng.random::<f64>() < p {
                occ[i] = 1.0;
                let lambda = params.flash_rate * driven;
                let extra = if lambda > 0.0 {
                    Poisson::new(lambda).expect("positive rate").sample(&mut rng)
                } else {
                    0.0
                };
                cnt[i] = (1.0 + extra) as f32;
                en[i] = cnt[i] * energy_noise.sample(&mut rng) as f32;
            }
        }
        let rad: Vec<f32> = intensity[t]
            .iter()
            .map(|&v| if v > 0.0 { (v as f64 + noise.sample(&mut rng)).max(0.0) as f32 } else { 0.0 })
            .collect();
        occurrence.push(occ);
        count.push(cnt);
        energy.push(en);
        radar.push(rad);
    }
    let frames = vec![
        (FeatureId::Occurrence, occurrence),
        (FeatureId::FlashCount, count),
        (FeatureId::FlashEnergy, energy),
        (FeatureId::Reflectivity, radar),
        (FeatureId::CloudTopHeight, intensity.clone()),
        (FeatureId::CloudTopPressure, intensity.clone()),
        (FeatureId::CloudOpticalDepth, intensity.clone()),
    ];
    Ok(SyntheticScene {
        grid: *grid,
        hours,
        intensity,
        frames,
    })
}

/// Simulate and write a dataset container under `out`.
pub fn generate_dataset(
    out: &Path,
    grid: &GridSpec,
    hours: usize,
    params: &StormParams,
    force: bool,
) -> Result<DatasetManifest> {
    if hours == 0 {
        return Err(Error::Config("hours must be positive".into()));
    }
    let scene = simulate(grid, hours, params)?;
    write_scene(out, &scene, default_start(), force)
}

pub fn write_scene(out: &Path, scene: &SyntheticScene, start: DateTime<Utc>, force: bool) -> Result<DatasetManifest> {
    let times = (0..scene.hours).map(|i| start + Duration::hours(i as i64)).collect();
    let splits = Split::assign(scene.hours, TRAIN_FRAC, VAL_FRAC);
    let mut writer = DatasetWriter::create(out, scene.grid, &FeatureId::INPUTS, times, splits, force)?;
    for (feature, frames) in &scene.frames {
        for (hour, values) in frames.iter().enumerate() {
            writer.write(*feature, hour, values)?;
        }
    }
    writer.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Dataset;

    fn fixture(hours: usize, params: &StormParams) -> SyntheticScene {
        simulate(&GridSpec::dallas_square(32), hours, params).unwrap()
    }

    #[test]
    fn empty_scene() {
        let params = StormParams {
            n_storms: 0,
            ..StormParams::default()
        };
        let scene = fixture(24, &params);
        for (_, frames) in &scene.frames {
            assert!(frames.iter().flatten().all(|&v| v == 0.0));
        }
        assert_eq!(scene.positive_rate(), 0.0);
    }

    #[test]
    fn identical_seeds_give_identical_datasets() {
        let dir = tempfile::tempdir().unwrap();
        let grid = GridSpec::dallas_square(16);
        let params = StormParams::default();
        let a = generate_dataset(&dir.path().join("a"), &grid, 30, &params, false).unwrap();
        let b = generate_dataset(&dir.path().join("b"), &grid, 30, &params, false).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        for entry in std::fs::read_dir(dir.path().join("a")).unwrap() {
            let name = entry.unwrap().file_name();
            let x = std::fs::read(dir.path().join("a").join(&name)).unwrap();
            let y = std::fs::read(dir.path().join("b").join(&name)).unwrap();
            assert_eq!(x, y, "{name:?} differs");
        }
        let c = simulate(&grid, 30, &StormParams { seed: 8, ..params }).unwrap();
        assert_ne!(c, simulate(&grid, 30, &StormParams::default()).unwrap());
    }

    #[test]
    fn reference_fixture_positive_rate() {
        let rate = fixture(400, &StormParams::default()).positive_rate();
        assert!(rate > 0.001 && rate < 0.10, "positive rate {rate}");
        assert!((rate - REFERENCE_RATE).abs() < 1e-9, "positive rate {rate}");
    }

    // Measured on the seed-7, 32×32, 400-hour fixture.
    const REFERENCE_RATE: f64 = 0.057802734375;

    #[test]
    fn flash_fields_are_consistent() {
        let scene = fixture(120, &StormParams::default());
        let occ = scene.feature(FeatureId::Occurrence);
        let cnt = scene.feature(FeatureId::FlashCount);
        let en = scene.feature(FeatureId::FlashEnergy);
        for t in 0..scene.hours {
            for i in 0..scene.grid.cells() {
                assert_eq!(occ[t][i] > 0.0, cnt[t][i] >= 1.0);
                if cnt[t][i] == 0.0 {
                    assert_eq!(en[t][i], 0.0);
                } else {
                    assert!(en[t][i] > 0.0);
                }
            }
        }
        assert!(scene.feature(FeatureId::Reflectivity).iter().flatten().all(|&v| v >= 0.0));
        assert_eq!(scene.feature(FeatureId::CloudTopHeight), &scene.intensity[..]);
    }

    fn correlation(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn cloud_signal_leads_lightning() {
        let params = StormParams::default();
        let scene = fixture(300, &params);
        let cloud = scene.feature(FeatureId::CloudOpticalDepth);
        let occ = scene.feature(FeatureId::Occurrence);
        let lead = params.cloud_lead;
        let pairs = |shift: usize| -> (Vec<f64>, Vec<f64>) {
            let mut x = Vec::new();
            let mut y = Vec::new();
            for t in 0..scene.hours - lead {
                for i in 0..scene.grid.cells() {
                    x.push(cloud[t][i] as f64);
                    y.push(occ[t + shift][i] as f64);
                }
            }
            (x, y)
        };
        let (x0, y0) = pairs(0);
        let (x1, y1) = pairs(lead);
        let (same, lagged) = (correlation(&x0, &y0), correlation(&x1, &y1));
        assert!(lagged > same, "lagged {lagged} vs same-hour {same}");
    }

    #[test]
    fn written_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let grid = GridSpec::dallas_square(8);
        let params = StormParams::default();
        let manifest = generate_dataset(dir.path(), &grid, 20, &params, false).unwrap();
        assert_eq!(manifest.hours[0], default_start());
        assert_eq!(manifest.features.len(), 7);
        let scene = simulate(&grid, 20, &params).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        for (feature, frames) in &scene.frames {
            for (h, values) in frames.iter().enumerate() {
                assert_eq!(&ds.load_frame(*feature, h).unwrap().values, values);
            }
        }
        assert!(matches!(
            generate_dataset(dir.path(), &grid, 20, &params, false),
            Err(Error::WouldOverwrite(_))
        ));
    }

    #[test]
    fn invalid_params_rejected() {
        let grid = GridSpec::dallas_square(8);
        for p in [
            StormParams { blob_sigma: 0.0, ..StormParams::default() },
            StormParams { lifetime: 0, ..StormParams::default() },
            StormParams { base_rate: 1.5, ..StormParams::default() },
        ] {
            assert!(simulate(&grid, 10, &p).is_err());
        }
    }
}
