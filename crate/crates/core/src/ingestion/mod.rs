//! Raw product acquisition and regridding.

pub mod fetch;
pub mod points;
pub mod triangulate;

use chrono::{DateTime, Duration, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FeatureFrame, FeatureId, GridSpec};
use triangulate::{Location, Triangulation};

pub use fetch::{fetch_products, FetchConfig, FetchReport, HttpTransport, Product, Source, Transport};

/// A scalar product sample. Non-finite `value` marks a missing retrieval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointObservation {
    pub lat: f64,
    pub lon: f64,
    pub value: f64,
    pub time: DateTime<Utc>,
}

impl PointObservation {
    pub fn is_missing(&self) -> bool {
        !self.value.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlashEvent {
    pub lat: f64,
    pub lon: f64,
    /// Joules.
    pub energy: f64,
    pub time: DateTime<Utc>,
}

/// Interpolate scattered samples to cell centres: linear over a Delaunay
/// triangulation inside the convex hull, nearest sample outside it.
pub fn interpolate_to_grid(
    points: &[PointObservation],
    grid: &GridSpec,
    feature: FeatureId,
    timestamp: DateTime<Utc>,
) -> Result<FeatureFrame> {
    let mut usable: Vec<(f64, f64, f64)> = points
        .iter()
        .filter(|p| !p.is_missing() && p.lat.is_finite() && p.lon.is_finite())
        .map(|p| (p.lat, p.lon, p.value))
        .collect();
    if usable.is_empty() {
        return Err(Error::Coverage(format!("no usable {feature} samples at {timestamp}")));
    }
    usable.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    // Merge exact duplicates by averaging.
    let mut merged: Vec<(f64, f64, f64, usize)> = Vec::with_capacity(usable.len());
    for (lat, lon, v) in usable {
        match merged.last_mut() {
            Some(last) if last.0 == lat && last.1 == lon => {
                last.2 += v;
                last.3 += 1;
            }
            _ => merged.push((lat, lon, v, 1)),
        }
    }
    let coords: Vec<(f64, f64)> = merged.iter().map(|m| (m.1, m.0)).collect();
    let values: Vec<f64> = merged.iter().map(|m| m.2 / m.3 as f64).collect();
    let tri = Triangulation::new(&coords);

    let mut out = vec![0f32; grid.cells()];
    out.par_chunks_mut(grid.cols).enumerate().for_each(|(r, row)| {
        for (c, cell) in row.iter_mut().enumerate() {
            let (lat, lon) = grid.cell_center(r, c);
            let v = match tri.locate_point(lon, lat) {
                Location::Inside { vertices, weights } => {
                    (0..3).map(|k| weights[k] * values[vertices[k]]).sum::<f64>()
                }
                Location::Outside => values[nearest(&coords, lon, lat)],
            };
            *cell = v as f32;
        }
    });
    FeatureFrame::new(feature, timestamp, grid, out)
}

fn nearest(coords: &[(f64, f64)], x: f64, y: f64) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, &(px, py)) in coords.iter().enumerate() {
        let d = (px - x).powi(2) + (py - y).powi(2);
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// Replace negative reflectivity with zero.
pub fn cap_reflectivity(mut frame: FeatureFrame) -> FeatureFrame {
    for v in &mut frame.values {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    frame
}

/// Events that did not land on the grid.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RasterReport {
    pub binned: usize,
    pub outside_footprint: usize,
    pub outside_hour: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LightningFrames {
    pub occurrence: FeatureFrame,
    pub flash_count: FeatureFrame,
    pub flash_energy: FeatureFrame,
    pub report: RasterReport,
}

/// Bin flash events of `[hour, hour + 1h)` into count, energy and
/// occurrence frames.
pub fn rasterize_flashes(events: &[FlashEvent], grid: &GridSpec, hour: DateTime<Utc>) -> LightningFrames {
    let mut count = FeatureFrame::zeros(FeatureId::FlashCount, hour, grid);
    let mut energy = vec![0f64; grid.cells()];
    let mut report = RasterReport::default();
    let end = hour + Duration::hours(1);
    for e in events {
        if e.time < hour || e.time >= end {
            report.outside_hour += 1;
            continue;
        }
        match grid.cell_of(e.lat, e.lon) {
            Some((r, c)) => {
                let i = r * grid.cols + c;
                count.values[i] += 1.0;
                energy[i] += e.energy.max(0.0);
                report.binned += 1;
            }
            None => report.outside_footprint += 1,
        }
    }
    let mut occurrence = FeatureFrame::zeros(FeatureId::Occurrence, hour, grid);
    for (o, &n) in occurrence.values.iter_mut().zip(&count.values) {
        *o = (n > 0.0) as u8 as f32;
    }
    let mut flash_energy = FeatureFrame::zeros(FeatureId::FlashEnergy, hour, grid);
    for (dst, &e) in flash_energy.values.iter_mut().zip(&energy) {
        *dst = e as f32;
    }
    LightningFrames {
        occurrence,
        flash_count: count,
        flash_energy,
        report,
    }
}
