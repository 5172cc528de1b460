//! Side-by-side PNG rendering of observed occurrence and forecast probability.

use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use deeplight::dataset::Dataset;
use deeplight::grid::FeatureId;
use image::{Rgb, RgbImage};

/// Side of each square panel in pixels.
pub const PANEL: u32 = 256;
/// Blank columns between the two panels.
pub const GAP: u32 = 8;
pub const WIDTH: u32 = 2 * PANEL + GAP;
pub const HEIGHT: u32 = PANEL;

const GAP_COLOR: Rgb<u8> = Rgb([255, 255, 255]);
const MISSING: Rgb<u8> = Rgb([128, 128, 128]);

/// Black → red → yellow → white.
pub fn heat(p: f32) -> Rgb<u8> {
    let p = p.clamp(0.0, 1.0) * 3.0;
    let ch = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([ch(p), ch(p - 1.0), ch(p - 2.0)])
}

fn truth_color(v: f32) -> Rgb<u8> {
    if v > 0.0 {
        Rgb([255, 255, 255])
    } else {
        Rgb([0, 0, 0])
    }
}

fn draw_panel(img: &mut RgbImage, x0: u32, rows: usize, cols: usize, color: impl Fn(usize) -> Rgb<u8>) {
    for py in 0..PANEL {
        let r = py as usize * rows / PANEL as usize;
        for px in 0..PANEL {
            let c = px as usize * cols / PANEL as usize;
            img.put_pixel(x0 + px, py, color(r * cols + c));
        }
    }
}

pub fn lead_file(out: &Path, lead: usize) -> PathBuf {
    out.join(format!("lead_{lead:02}.png"))
}

/// One `WIDTH × HEIGHT` image per forecast frame: truth on the left,
/// probability on the right. Hours absent from the truth are drawn grey.
pub fn plot(pred_dir: &Path, truth_dir: &Path, out: &Path, force: bool) -> Result<Vec<PathBuf>> {
    let pred = Dataset::open(pred_dir)?;
    let truth = Dataset::open(truth_dir)?;
    let grid = pred.manifest().grid;
    let tg = truth.manifest().grid;
    if (grid.rows, grid.cols) != (tg.rows, tg.cols) {
        bail!("forecast grid {}x{} does not match truth grid {}x{}", grid.rows, grid.cols, tg.rows, tg.cols);
    }
    let n = pred.manifest().hours.len();
    let files: Vec<PathBuf> = (1..=n).map(|k| lead_file(out, k)).collect();
    if !force {
        if let Some(f) = files.iter().find(|f| f.exists()) {
            bail!(deeplight::Error::WouldOverwrite(f.clone()));
        }
    }
    std::fs::create_dir_all(out)?;
    for (k, file) in files.iter().enumerate() {
        let probs = pred.load_frame(FeatureId::Probability, k)?;
        let observed = match truth.manifest().hour_index(probs.timestamp) {
            Some(i) => Some(truth.load_frame(FeatureId::Occurrence, i)?).filter(|f| f.valid),
            None => None,
        };
        let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, GAP_COLOR);
        match &observed {
            Some(f) => draw_panel(&mut img, 0, grid.rows, grid.cols, |i| truth_color(f.values[i])),
            None => draw_panel(&mut img, 0, grid.rows, grid.cols, |_| MISSING),
        }
        draw_panel(&mut img, PANEL + GAP, grid.rows, grid.cols, |i| heat(probs.values[i]));
        img.save(file)?;
    }
    Ok(files)
}
