//! Gridding of decoded point products into a dataset container.
//!
//! Decoded products are read from a directory of hourly CSV files:
//!
//! ```text
//! <dir>/reflectivity/2023040115.csv        lat,lon,value   (dBZ)
//! <dir>/cloud_top_height/2023040115.csv    lat,lon,value   (m)
//! <dir>/cloud_top_pressure/2023040115.csv  lat,lon,value   (hPa)
//! <dir>/cloud_optical_depth/2023040115.csv lat,lon,value
//! <dir>/flashes/2023040115.csv             lat,lon,energy[,time]
//! ```
//!
//! An empty `value` cell marks a missing retrieval. A missing file gap-marks
//! that feature for the hour; an existing flash file with no rows means no
//! lightning.

use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{cap_reflectivity, interpolate_to_grid, rasterize_flashes, FlashEvent, PointObservation, RasterReport};
use crate::dataset::{DatasetManifest, DatasetWriter, Split};
use crate::error::{Error, Result};
use crate::grid::{FeatureFrame, FeatureId, GridSpec};

pub const FLASH_DIR: &str = "flashes";

/// Hours processed concurrently before being flushed to disk.
const CHUNK_HOURS: usize = 64;

pub fn hour_file(dir: &Path, group: &str, hour: DateTime<Utc>) -> PathBuf {
    dir.join(group).join(format!("{}.csv", hour.format("%Y%m%d%H")))
}

#[derive(Debug, Deserialize)]
struct PointRow {
    lat: f64,
    lon: f64,
    value: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct FlashRow {
    lat: f64,
    lon: f64,
    energy: f64,
    time: Option<DateTime<Utc>>,
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::storage(path, e.to_string())
}

pub fn read_points(path: &Path, time: DateTime<Utc>) -> Result<Vec<PointObservation>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    reader
        .deserialize::<PointRow>()
        .map(|row| {
            let row = row.map_err(|e| csv_error(path, e))?;
            Ok(PointObservation {
                lat: row.lat,
                lon: row.lon,
                value: row.value.unwrap_or(f64::NAN),
                time,
            })
        })
        .collect()
}

/// Flash rows without a `time` column are stamped at the start of `hour`.
pub fn read_flashes(path: &Path, hour: DateTime<Utc>) -> Result<Vec<FlashEvent>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    reader
        .deserialize::<FlashRow>()
        .map(|row| {
            let row = row.map_err(|e| csv_error(path, e))?;
            if !(row.energy >= 0.0) {
                return Err(Error::storage(path, format!("negative flash energy {}", row.energy)));
            }
            Ok(FlashEvent {
                lat: row.lat,
                lon: row.lon,
                energy: row.energy,
                time: row.time.unwrap_or(hour),
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct GriddingOptions {
    pub grid: GridSpec,
    pub start: DateTime<Utc>,
    /// Number of consecutive hours from `start`.
    pub hours: usize,
    pub train_frac: f64,
    pub val_frac: f64,
    pub force: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GriddingSummary {
    pub hours: usize,
    pub gaps: usize,
    pub flashes: RasterReport,
}

/// Grid every hour of point products under `points_dir` into a dataset at `out`.
pub fn grid_point_products(points_dir: &Path, out: &Path, opts: &GriddingOptions) -> Result<(DatasetManifest, GriddingSummary)> {
    if opts.hours == 0 {
        return Err(Error::Config("no hours requested".into()));
    }
    let hours: Vec<DateTime<Utc>> = (0..opts.hours).map(|i| opts.start + Duration::hours(i as i64)).collect();
    let splits = Split::assign(opts.hours, opts.train_frac, opts.val_frac);
    let mut writer = DatasetWriter::create(out, opts.grid, &FeatureId::INPUTS, hours.clone(), splits, opts.force)?;
    let mut summary = GriddingSummary {
        hours: opts.hours,
        ..Default::default()
    };
    for (chunk_idx, chunk) in hours.chunks(CHUNK_HOURS).enumerate() {
        let frames: Vec<Result<(Vec<FeatureFrame>, RasterReport)>> =
            chunk.par_iter().map(|&t| grid_hour(points_dir, &opts.grid, t)).collect();
        for (k, result) in frames.into_iter().enumerate() {
            let hour = chunk_idx * CHUNK_HOURS + k;
            let (frames, report) = result?;
            summary.flashes.binned += report.binned;
            summary.flashes.outside_footprint += report.outside_footprint;
            summary.flashes.outside_hour += report.outside_hour;
            for frame in &frames {
                if !frame.valid {
                    summary.gaps += 1;
                }
                writer.write_frame(hour, frame)?;
            }
        }
    }
    Ok((writer.finish()?, summary))
}

/// All seven input frames for one hour, gap-marked where no product exists.
fn grid_hour(dir: &Path, grid: &GridSpec, t: DateTime<Utc>) -> Result<(Vec<FeatureFrame>, RasterReport)> {
    let mut frames = Vec::with_capacity(FeatureId::INPUTS.len());
    let flash_path = hour_file(dir, FLASH_DIR, t);
    let mut report = RasterReport::default();
    if flash_path.exists() {
        let events = read_flashes(&flash_path, t)?;
        let out = rasterize_flashes(&events, grid, t);
        report = out.report;
        frames.extend([out.occurrence, out.flash_count, out.flash_energy]);
    } else {
        frames.extend(FeatureId::LIGHTNING.map(|f| FeatureFrame::gap(f, t, grid)));
    }
    for feature in FeatureId::AUXILIARY {
        let path = hour_file(dir, feature.name(), t);
        let frame = if path.exists() {
            match interpolate_to_grid(&read_points(&path, t)?, grid, feature, t) {
                Ok(f) if feature == FeatureId::Reflectivity => cap_reflectivity(f),
                Ok(f) => f,
                Err(Error::Coverage(msg)) => {
                    log::warn!("{msg}; gap-marking");
                    FeatureFrame::gap(feature, t, grid)
                }
                Err(e) => return Err(e),
            }
        } else {
            FeatureFrame::gap(feature, t, grid)
        };
        frames.push(frame);
    }
    Ok((frames, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Dataset;
    use chrono::TimeZone;
    use std::fs;

    fn write(path: PathBuf, body: &str) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(path, body).unwrap();
    }

    #[test]
    fn csv_products_become_a_dataset() {
        let src = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let grid = GridSpec::new(4, 4, (30.0, 34.0), (-100.0, -96.0), 4.0).unwrap();
        let t0 = Utc.with_ymd_and_hms(2023, 4, 1, 0, 0, 0).unwrap();
        let corners = "lat,lon,value\n30,-100,-10\n34,-100,-10\n30,-96,30\n34,-96,30\n";
        for h in 0..3 {
            let t = t0 + Duration::hours(h);
            write(hour_file(src.path(), "reflectivity", t), corners);
            write(hour_file(src.path(), "cloud_top_height", t), "lat,lon,value\n32,-98,9000\n");
            write(hour_file(src.path(), "cloud_top_pressure", t), "lat,lon,value\n32,-98,\n");
            write(hour_file(src.path(), "cloud_optical_depth", t), "lat,lon,value\n32,-98,4.5\n");
        }
        write(hour_file(src.path(), FLASH_DIR, t0), "lat,lon,energy\n31.5,-97.5,2e-15\n31.6,-97.4,1e-15\n50,-97,1\n");
        write(hour_file(src.path(), FLASH_DIR, t0 + Duration::hours(1)), "lat,lon,energy\n");
        let opts = GriddingOptions {
            grid,
            start: t0,
            hours: 3,
            train_frac: 1.0,
            val_frac: 0.0,
            force: false,
        };
        let (manifest, summary) = grid_point_products(src.path(), out.path(), &opts).unwrap();
        assert_eq!(summary.flashes.binned, 2);
        assert_eq!(summary.flashes.outside_footprint, 1);
        // CTP empty at all three hours, lightning missing at hour 2.
        assert_eq!(summary.gaps, 3 + 3);
        assert!(manifest.is_gap(FeatureId::CloudTopPressure, 0));
        assert!(manifest.is_gap(FeatureId::Occurrence, 2));

        let ds = Dataset::open(out.path()).unwrap();
        let count = ds.load_frame(FeatureId::FlashCount, 0).unwrap();
        assert_eq!(count.get(1, 2), 2.0);
        let refl = ds.load_frame(FeatureId::Reflectivity, 1).unwrap();
        assert!(refl.values.iter().all(|&v| (0.0..=30.0).contains(&v)));
        assert_eq!(refl.get(0, 0), 0.0);
        let cth = ds.load_frame(FeatureId::CloudTopHeight, 2).unwrap();
        assert!(cth.values.iter().all(|&v| v == 9000.0));
        assert!(ds.load_frame(FeatureId::Occurrence, 1).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn negative_energy_is_rejected() {
        let src = tempfile::tempdir().unwrap();
        let t0 = Utc.with_ymd_and_hms(2023, 4, 1, 0, 0, 0).unwrap();
        let path = hour_file(src.path(), FLASH_DIR, t0);
        write(path.clone(), "lat,lon,energy\n31,-97,-1\n");
        assert!(matches!(read_flashes(&path, t0), Err(Error::Storage { .. })));
    }
}
