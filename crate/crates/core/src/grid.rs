//! Spatial grid and per-hour feature frames.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A fixed equirectangular raster. Row 0 is the southernmost row, column 0
/// the westernmost column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
    pub cell_km: f64,
}

impl GridSpec {
    pub fn new(
        rows: usize,
        cols: usize,
        (lat_min, lat_max): (f64, f64),
        (lon_min, lon_max): (f64, f64),
        cell_km: f64,
    ) -> Result<Self> {
        let grid = GridSpec {
            rows,
            cols,
            lat_min,
            lat_max,
            lon_min,
            lon_max,
            cell_km,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// The Dallas-centred 159 × 159 grid of 4 km cells.
    pub fn dallas() -> Self {
        GridSpec {
            rows: 159,
            cols: 159,
            lat_min: 30.2,
            lat_max: 35.93,
            lon_min: -100.3,
            lon_max: -93.52,
            cell_km: 4.0,
        }
    }

    /// A square `n × n` grid over the Dallas footprint, for desk-scale runs.
    pub fn dallas_square(n: usize) -> Self {
        let base = Self::dallas();
        GridSpec {
            rows: n,
            cols: n,
            cell_km: base.cell_km * base.rows as f64 / n as f64,
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.rows >= 1
            && self.cols >= 1
            && self.lat_min < self.lat_max
            && self.lon_min < self.lon_max
            && self.cell_km > 0.0
            && [self.lat_min, self.lat_max, self.lon_min, self.lon_max, self.cell_km]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid grid {self:?}")))
        }
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn lat_step(&self) -> f64 {
        (self.lat_max - self.lat_min) / self.rows as f64
    }

    pub fn lon_step(&self) -> f64 {
        (self.lon_max - self.lon_min) / self.cols as f64
    }

    /// Cell containing `(lat, lon)` under half-open binning
    /// `[lat_min + r·Δ, lat_min + (r+1)·Δ)`; `None` outside the footprint.
    pub fn cell_of(&self, lat: f64, lon: f64) -> Option<(usize, usize)> {
        if !(lat.is_finite() && lon.is_finite()) {
            return None;
        }
        let r = ((lat - self.lat_min) / self.lat_step()).floor();
        let c = ((lon - self.lon_min) / self.lon_step()).floor();
        if r < 0.0 || c < 0.0 || r >= self.rows as f64 || c >= self.cols as f64 {
            return None;
        }
        Some((r as usize, c as usize))
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.lat_min + (row as f64 + 0.5) * self.lat_step(),
            self.lon_min + (col as f64 + 0.5) * self.lon_step(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureId {
    Occurrence,
    FlashCount,
    FlashEnergy,
    Reflectivity,
    CloudTopHeight,
    CloudTopPressure,
    CloudOpticalDepth,
    /// Forecast output written by `predict`; never a model input.
    Probability,
}

impl FeatureId {
    /// Lightning encoder channels, in channel order.
    pub const LIGHTNING: [FeatureId; 3] = [FeatureId::Occurrence, FeatureId::FlashCount, FeatureId::FlashEnergy];

    /// Auxiliary encoder channels, in channel order: radar first, then cloud.
    pub const AUXILIARY: [FeatureId; 4] = [
        FeatureId::Reflectivity,
        FeatureId::CloudTopHeight,
        FeatureId::CloudTopPressure,
        FeatureId::CloudOpticalDepth,
    ];

    pub const INPUTS: [FeatureId; 7] = [
        FeatureId::Occurrence,
        FeatureId::FlashCount,
        FeatureId::FlashEnergy,
        FeatureId::Reflectivity,
        FeatureId::CloudTopHeight,
        FeatureId::CloudTopPressure,
        FeatureId::CloudOpticalDepth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeatureId::Occurrence => "occurrence",
            FeatureId::FlashCount => "flash_count",
            FeatureId::FlashEnergy => "flash_energy",
            FeatureId::Reflectivity => "reflectivity",
            FeatureId::CloudTopHeight => "cloud_top_height",
            FeatureId::CloudTopPressure => "cloud_top_pressure",
            FeatureId::CloudOpticalDepth => "cloud_optical_depth",
            FeatureId::Probability => "probability",
        }
    }
}

impl fmt::Display for FeatureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureId::INPUTS
            .iter()
            .chain(std::iter::once(&FeatureId::Probability))
            .copied()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown feature '{s}'")))
    }
}

/// One feature on the grid for one hour.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFrame {
    pub feature: FeatureId,
    pub timestamp: DateTime<Utc>,
    pub rows: usize,
    pub cols: usize,
    /// Row-major, `rows × cols`.
    pub values: Vec<f32>,
    /// False for gap-marked hours; values are then all zero.
    pub valid: bool,
}

impl FeatureFrame {
    pub fn new(feature: FeatureId, timestamp: DateTime<Utc>, grid: &GridSpec, values: Vec<f32>) -> Result<Self> {
        if values.len() != grid.cells() {
            return Err(Error::Config(format!(
                "{feature} frame has {} values, grid needs {}",
                values.len(),
                grid.cells()
            )));
        }
        Ok(FeatureFrame {
            feature,
            timestamp,
            rows: grid.rows,
            cols: grid.cols,
            values,
            valid: true,
        })
    }

    pub fn zeros(feature: FeatureId, timestamp: DateTime<Utc>, grid: &GridSpec) -> Self {
        FeatureFrame {
            feature,
            timestamp,
            rows: grid.rows,
            cols: grid.cols,
            values: vec![0.0; grid.cells()],
            valid: true,
        }
    }

    pub fn gap(feature: FeatureId, timestamp: DateTime<Utc>, grid: &GridSpec) -> Self {
        FeatureFrame {
            valid: false,
            ..Self::zeros(feature, timestamp, grid)
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        self.values[row * self.cols + col] = value;
    }
}
