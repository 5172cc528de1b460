//! On-disk dataset container.
//!
//! A dataset is a directory holding `manifest.json` and one raw file per
//! (feature, split) named `<feature>.<split>.f32`. Each raw file is a
//! sequence of little-endian `f32` frames in row-major `[hour][row][col]`
//! order; the manifest lists which hour indices each file stores, in file
//! order. Hours without usable data are listed under `gaps` instead.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FeatureFrame, FeatureId, GridSpec};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

/// Floor applied to standard deviations before dividing.
pub const STDEV_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    /// Contiguous chronological split by fractions for train and validation.
    pub fn assign(hours: usize, train_frac: f64, val_frac: f64) -> Vec<Split> {
        let n_train = (hours as f64 * train_frac).round() as usize;
        let n_val = (hours as f64 * val_frac).round() as usize;
        (0..hours)
            .map(|i| {
                if i < n_train {
                    Split::Train
                } else if i < n_train + n_val {
                    Split::Val
                } else {
                    Split::Test
                }
            })
            .collect()
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split '{s}'")))
    }
}

/// Per-feature input scaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Normalization {
    Identity,
    Standardize { mean: f64, stdev: f64 },
    Log1pStandardize { mean: f64, stdev: f64 },
}

impl Normalization {
    pub fn apply(&self, x: f32) -> f32 {
        match *self {
            Normalization::Identity => x,
            Normalization::Standardize { mean, stdev } => ((x as f64 - mean) / stdev.max(STDEV_FLOOR)) as f32,
            Normalization::Log1pStandardize { mean, stdev } => {
                (((x as f64).ln_1p() - mean) / stdev.max(STDEV_FLOOR)) as f32
            }
        }
    }

    pub fn invert(&self, z: f32) -> f32 {
        match *self {
            Normalization::Identity => z,
            Normalization::Standardize { mean, stdev } => (z as f64 * stdev.max(STDEV_FLOOR) + mean) as f32,
            Normalization::Log1pStandardize { mean, stdev } => {
                (z as f64 * stdev.max(STDEV_FLOOR) + mean).exp_m1() as f32
            }
        }
    }

    /// Transform applied to `feature` once statistics are known.
    fn for_feature(feature: FeatureId, stats: &Moments) -> Self {
        let (mean, stdev) = stats.mean_stdev();
        match feature {
            FeatureId::Occurrence | FeatureId::Probability => Normalization::Identity,
            FeatureId::FlashCount | FeatureId::FlashEnergy => Normalization::Log1pStandardize { mean, stdev },
            _ => Normalization::Standardize { mean, stdev },
        }
    }

    fn uses_log1p(feature: FeatureId) -> bool {
        matches!(feature, FeatureId::FlashCount | FeatureId::FlashEnergy)
    }
}

pub type NormalizationStats = BTreeMap<FeatureId, Normalization>;

/// Streaming first and second moments in f64.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    count: u64,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn push(&mut self, v: f64) {
        self.count += 1;
        self.sum += v;
        self.sum_sq += v * v;
    }

    fn mean_stdev(&self) -> (f64, f64) {
        if self.count == 0 {
            return (0.0, 1.0);
        }
        let n = self.count as f64;
        let mean = self.sum / n;
        let var = (self.sum_sq / n - mean * mean).max(0.0);
        (mean, var.sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredBlock {
    pub file: String,
    /// Hour indices stored in the file, in file order.
    pub hours: Vec<usize>,
    /// `[frames, rows, cols]`.
    pub shape: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub grid: GridSpec,
    pub features: Vec<FeatureId>,
    pub hours: Vec<DateTime<Utc>>,
    /// Split tag of every hour, parallel to `hours`.
    pub splits: Vec<Split>,
    #[serde(default)]
    pub gaps: BTreeMap<FeatureId, Vec<usize>>,
    pub normalization: NormalizationStats,
    pub storage: BTreeMap<FeatureId, BTreeMap<Split, StoredBlock>>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Manifest(m));
        self.grid.validate().map_err(|e| Error::Manifest(e.to_string()))?;
        if self.format_version != FORMAT_VERSION {
            return bad(format!("unsupported format version {}", self.format_version));
        }
        if self.splits.len() != self.hours.len() {
            return bad(format!("{} hours but {} split tags", self.hours.len(), self.splits.len()));
        }
        if self.hours.windows(2).any(|w| w[0] >= w[1]) {
            return bad("hours are not strictly increasing".into());
        }
        for &feature in &self.features {
            let mut seen = vec![false; self.hours.len()];
            let mut mark = |h: usize| -> Result<()> {
                match seen.get_mut(h) {
                    None => bad(format!("{feature}: hour index {h} out of range")),
                    Some(true) => bad(format!("{feature}: hour index {h} listed twice")),
                    Some(s) => {
                        *s = true;
                        Ok(())
                    }
                }
            };
            for &h in self.gaps.get(&feature).into_iter().flatten() {
                mark(h)?;
            }
            for (split, block) in self.storage.get(&feature).into_iter().flatten() {
                if block.shape != [block.hours.len(), self.grid.rows, self.grid.cols] {
                    return bad(format!("{feature}/{}: shape {:?} disagrees with grid", split.name(), block.shape));
                }
                if block.hours.windows(2).any(|w| w[0] >= w[1]) {
                    return bad(format!("{feature}/{}: stored hours out of order", split.name()));
                }
                for &h in &block.hours {
                    if self.splits.get(h) != Some(split) {
                        return bad(format!("{feature}: hour {h} stored under the wrong split"));
                    }
                    mark(h)?;
                }
            }
            if let Some(h) = seen.iter().position(|s| !s) {
                return bad(format!("{feature}: hour index {h} has neither a frame nor a gap marker"));
            }
        }
        Ok(())
    }

    pub fn is_gap(&self, feature: FeatureId, hour: usize) -> bool {
        self.gaps.get(&feature).is_some_and(|g| g.contains(&hour))
    }

    /// Storage block and frame position of `hour`, if stored.
    pub fn locate(&self, feature: FeatureId, hour: usize) -> Option<(&StoredBlock, usize)> {
        let split = *self.splits.get(hour)?;
        let block = self.storage.get(&feature)?.get(&split)?;
        block.hours.binary_search(&hour).ok().map(|pos| (block, pos))
    }

    pub fn hour_index(&self, time: DateTime<Utc>) -> Option<usize> {
        self.hours.binary_search(&time).ok()
    }

    /// True if `hours[a..b]` are consecutive whole hours.
    pub fn contiguous(&self, a: usize, b: usize) -> bool {
        self.hours[a..b].windows(2).all(|w| w[1] - w[0] == Duration::hours(1))
    }
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::storage(&path, e.to_string()))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    manifest.validate()?;
    Ok(manifest)
}

/// Decode one frame from the container; gap hours yield an invalid frame.
pub fn load_frame(manifest: &DatasetManifest, root: &Path, feature: FeatureId, hour: usize) -> Result<FeatureFrame> {
    let Some(&timestamp) = manifest.hours.get(hour) else {
        return Err(Error::Manifest(format!("hour index {hour} not in manifest")));
    };
    if manifest.is_gap(feature, hour) {
        return Ok(FeatureFrame::gap(feature, timestamp, &manifest.grid));
    }
    let (block, pos) = manifest
        .locate(feature, hour)
        .ok_or_else(|| Error::Manifest(format!("{feature} hour {hour} is neither stored nor gap-marked")))?;
    let path = root.join(&block.file);
    let mut file = open_checked(&path, block, &manifest.grid)?;
    let cells = manifest.grid.cells();
    file.seek(SeekFrom::Start((pos * cells * 4) as u64))?;
    let mut raw = vec![0u8; cells * 4];
    file.read_exact(&mut raw).map_err(|e| Error::storage(&path, e.to_string()))?;
    FeatureFrame::new(feature, timestamp, &manifest.grid, decode_f32(&raw))
}

fn open_checked(path: &Path, block: &StoredBlock, grid: &GridSpec) -> Result<File> {
    if block.shape[1] != grid.rows || block.shape[2] != grid.cols {
        return Err(Error::storage(
            path,
            format!("block shape {:?} does not match grid {}x{}", block.shape, grid.rows, grid.cols),
        ));
    }
    let file = File::open(path).map_err(|e| Error::storage(path, e.to_string()))?;
    let expected = (block.shape.iter().product::<usize>() * 4) as u64;
    let actual = file.metadata()?.len();
    if actual != expected {
        return Err(Error::storage(
            path,
            format!(
                "file holds {} values, manifest shape {:?} needs {}",
                actual / 4,
                block.shape,
                expected / 4
            ),
        ));
    }
    Ok(file)
}

fn decode_f32(raw: &[u8]) -> Vec<f32> {
    raw.chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect()
}

/// An opened dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let manifest = read_manifest(&root)?;
        Ok(Dataset { root, manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn load_frame(&self, feature: FeatureId, hour: usize) -> Result<FeatureFrame> {
        load_frame(&self.manifest, &self.root, feature, hour)
    }

    /// Every frame of `feature`, indexed by hour; `None` for gaps.
    pub fn load_feature(&self, feature: FeatureId) -> Result<Vec<Option<Vec<f32>>>> {
        let mut out: Vec<Option<Vec<f32>>> = vec![None; self.manifest.hours.len()];
        let cells = self.manifest.grid.cells();
        for block in self.manifest.storage.get(&feature).into_iter().flat_map(|m| m.values()) {
            let path = self.root.join(&block.file);
            let mut file = open_checked(&path, block, &self.manifest.grid)?;
            let mut raw = Vec::new();
            file.read_to_end(&mut raw)?;
            let values = decode_f32(&raw);
            for (pos, &h) in block.hours.iter().enumerate() {
                out[h] = Some(values[pos * cells..(pos + 1) * cells].to_vec());
            }
        }
        Ok(out)
    }

    /// Normalisation statistics recomputed from the hours of `split`.
    pub fn compute_stats(&self, split: Split) -> Result<NormalizationStats> {
        let mut stats = NormalizationStats::new();
        for &feature in &self.manifest.features {
            let frames = self.load_feature(feature)?;
            let mut m = Moments::default();
            for (h, frame) in frames.iter().enumerate() {
                if self.manifest.splits[h] != split {
                    continue;
                }
                if let Some(values) = frame {
                    push_frame(&mut m, feature, values);
                }
            }
            stats.insert(feature, Normalization::for_feature(feature, &m));
        }
        Ok(stats)
    }
}

fn push_frame(m: &mut Moments, feature: FeatureId, values: &[f32]) {
    let log = Normalization::uses_log1p(feature);
    for &v in values {
        let v = v as f64;
        m.push(if log { v.ln_1p() } else { v });
    }
}

/// Streams frames into a new dataset directory.
///
/// Frames of each feature must arrive in increasing hour order; every hour
/// must be written (or gap-marked) exactly once per feature before
/// [`DatasetWriter::finish`]. Normalisation statistics are accumulated from
/// training-split frames only.
pub struct DatasetWriter {
    root: PathBuf,
    manifest: DatasetManifest,
    sinks: BTreeMap<(FeatureId, Split), BufWriter<File>>,
    next_hour: BTreeMap<FeatureId, usize>,
    moments: BTreeMap<FeatureId, Moments>,
}

impl DatasetWriter {
    pub fn create(
        root: impl AsRef<Path>,
        grid: GridSpec,
        features: &[FeatureId],
        hours: Vec<DateTime<Utc>>,
        splits: Vec<Split>,
        force: bool,
    ) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        grid.validate()?;
        if root.join(MANIFEST_FILE).exists() {
            if !force {
                return Err(Error::WouldOverwrite(root));
            }
            for entry in fs::read_dir(&root)? {
                let path = entry?.path();
                let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
                if name == MANIFEST_FILE || name.ends_with(".f32") {
                    fs::remove_file(&path)?;
                }
            }
        }
        fs::create_dir_all(&root)?;
        let manifest = DatasetManifest {
            format_version: FORMAT_VERSION,
            grid,
            features: features.to_vec(),
            hours,
            splits,
            gaps: BTreeMap::new(),
            normalization: NormalizationStats::new(),
            storage: BTreeMap::new(),
        };
        if manifest.splits.len() != manifest.hours.len() {
            return Err(Error::Manifest("split tags must parallel hours".into()));
        }
        if manifest.hours.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Manifest("hours are not strictly increasing".into()));
        }
        Ok(DatasetWriter {
            root,
            manifest,
            sinks: BTreeMap::new(),
            next_hour: features.iter().map(|&f| (f, 0)).collect(),
            moments: BTreeMap::new(),
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.manifest.grid
    }

    pub fn hours(&self) -> &[DateTime<Utc>] {
        &self.manifest.hours
    }

    fn advance(&mut self, feature: FeatureId, hour: usize) -> Result<()> {
        let next = self
            .next_hour
            .get_mut(&feature)
            .ok_or_else(|| Error::Manifest(format!("{feature} is not a dataset feature")))?;
        if hour != *next {
            return Err(Error::Manifest(format!(
                "{feature}: expected hour index {}, got {hour}",
                *next
            )));
        }
        *next += 1;
        Ok(())
    }

    /// Store a frame for `hour`.
    pub fn write(&mut self, feature: FeatureId, hour: usize, values: &[f32]) -> Result<()> {
        if values.len() != self.manifest.grid.cells() {
            return Err(Error::Manifest(format!(
                "{feature}: frame has {} values, grid needs {}",
                values.len(),
                self.manifest.grid.cells()
            )));
        }
        self.advance(feature, hour)?;
        let split = self.manifest.splits[hour];
        let file = format!("{}.{}.f32", feature.name(), split.name());
        let key = (feature, split);
        if !self.sinks.contains_key(&key) {
            let sink = BufWriter::new(File::create(self.root.join(&file))?);
            self.sinks.insert(key, sink);
        }
        let sink = self.sinks.get_mut(&key).expect("sink just inserted");
        for v in values {
            sink.write_all(&v.to_le_bytes())?;
        }
        let grid = self.manifest.grid;
        let block = self
            .manifest
            .storage
            .entry(feature)
            .or_default()
            .entry(split)
            .or_insert_with(|| StoredBlock {
                file,
                hours: Vec::new(),
                shape: [0, grid.rows, grid.cols],
            });
        block.hours.push(hour);
        block.shape[0] += 1;
        if split == Split::Train {
            push_frame(self.moments.entry(feature).or_default(), feature, values);
        }
        Ok(())
    }

    /// Gap-mark `hour` for `feature`.
    pub fn write_gap(&mut self, feature: FeatureId, hour: usize) -> Result<()> {
        self.advance(feature, hour)?;
        self.manifest.gaps.entry(feature).or_default().push(hour);
        Ok(())
    }

    pub fn write_frame(&mut self, hour: usize, frame: &FeatureFrame) -> Result<()> {
        if frame.valid {
            self.write(frame.feature, hour, &frame.values)
        } else {
            self.write_gap(frame.feature, hour)
        }
    }

    pub fn finish(mut self) -> Result<DatasetManifest> {
        for sink in self.sinks.values_mut() {
            sink.flush()?;
        }
        for &feature in &self.manifest.features {
            let m = self.moments.get(&feature).copied().unwrap_or_default();
            self.manifest
                .normalization
                .insert(feature, Normalization::for_feature(feature, &m));
        }
        self.manifest.validate()?;
        let json = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(self.root.join(MANIFEST_FILE), json)?;
        Ok(self.manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn hours(n: usize) -> Vec<DateTime<Utc>> {
        let t0 = Utc.with_ymd_and_hms(2023, 4, 1, 0, 0, 0).unwrap();
        (0..n).map(|i| t0 + Duration::hours(i as i64)).collect()
    }

    fn tiny_grid() -> GridSpec {
        GridSpec::new(3, 4, (0.0, 3.0), (0.0, 4.0), 1.0).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let grid = tiny_grid();
        let n = 5;
        let mut w = DatasetWriter::create(
            dir.path(),
            grid,
            &[FeatureId::Reflectivity],
            hours(n),
            Split::assign(n, 0.6, 0.2),
            false,
        )
        .unwrap();
        let frames: Vec<Vec<f32>> = (0..n)
            .map(|h| (0..12).map(|i| ((h * 31 + i * 7) as f32).sin() * 1e3 + 1e-7).collect())
            .collect();
        for (h, f) in frames.iter().enumerate() {
            if h == 2 {
                w.write_gap(FeatureId::Reflectivity, h).unwrap();
            } else {
                w.write(FeatureId::Reflectivity, h, f).unwrap();
            }
        }
        w.finish().unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        for (h, f) in frames.iter().enumerate() {
            let frame = ds.load_frame(FeatureId::Reflectivity, h).unwrap();
            if h == 2 {
                assert!(!frame.valid);
            } else {
                assert!(frame.valid);
                let same = frame.values.iter().zip(f).all(|(a, b)| a.to_bits() == b.to_bits());
                assert!(same, "hour {h} not bit-identical");
            }
        }
    }

    #[test]
    fn shape_mismatch_is_a_storage_error() {
        let dir = tempfile::tempdir().unwrap();
        let grid = GridSpec::dallas();
        let mut w = DatasetWriter::create(
            dir.path(),
            grid,
            &[FeatureId::Occurrence],
            hours(1),
            vec![Split::Train],
            false,
        )
        .unwrap();
        w.write(FeatureId::Occurrence, 0, &vec![0.0; grid.cells()]).unwrap();
        w.finish().unwrap();
        // Drop one 159-value row: the file now holds 158 x 159 values.
        let path = dir.path().join("occurrence.train.f32");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..158 * 159 * 4]).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert!(matches!(ds.load_frame(FeatureId::Occurrence, 0), Err(Error::Storage { .. })));
    }

    #[test]
    fn missing_file_is_a_storage_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = DatasetWriter::create(
            dir.path(),
            tiny_grid(),
            &[FeatureId::Occurrence],
            hours(1),
            vec![Split::Train],
            false,
        )
        .unwrap();
        w.write(FeatureId::Occurrence, 0, &[0.0; 12]).unwrap();
        w.finish().unwrap();
        fs::remove_file(dir.path().join("occurrence.train.f32")).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert!(matches!(ds.load_frame(FeatureId::Occurrence, 0), Err(Error::Storage { .. })));
    }

    #[test]
    fn incomplete_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = DatasetWriter::create(
            dir.path(),
            tiny_grid(),
            &[FeatureId::Occurrence],
            hours(2),
            vec![Split::Train; 2],
            false,
        )
        .unwrap();
        w.write(FeatureId::Occurrence, 0, &[0.0; 12]).unwrap();
        assert!(matches!(w.finish(), Err(Error::Manifest(_))));
    }

    #[test]
    fn out_of_order_writes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = DatasetWriter::create(
            dir.path(),
            tiny_grid(),
            &[FeatureId::Occurrence],
            hours(3),
            vec![Split::Train; 3],
            false,
        )
        .unwrap();
        assert!(w.write(FeatureId::Occurrence, 1, &[0.0; 12]).is_err());
    }

    #[test]
    fn existing_dataset_requires_force() {
        let dir = tempfile::tempdir().unwrap();
        let make = |force| {
            DatasetWriter::create(
                dir.path(),
                tiny_grid(),
                &[FeatureId::Occurrence],
                hours(1),
                vec![Split::Train],
                force,
            )
        };
        let mut w = make(false).unwrap();
        w.write(FeatureId::Occurrence, 0, &[0.0; 12]).unwrap();
        w.finish().unwrap();
        assert!(matches!(make(false), Err(Error::WouldOverwrite(_))));
        assert!(make(true).is_ok());
    }

    #[test]
    fn stats_come_from_training_hours_only() {
        let dir = tempfile::tempdir().unwrap();
        let n = 4;
        let splits = vec![Split::Train, Split::Train, Split::Val, Split::Test];
        let mut w = DatasetWriter::create(
            dir.path(),
            tiny_grid(),
            &[FeatureId::CloudTopHeight, FeatureId::FlashCount],
            hours(n),
            splits,
            false,
        )
        .unwrap();
        for h in 0..n {
            let v = if h < 2 { 1.0 + h as f32 } else { 100.0 };
            w.write(FeatureId::CloudTopHeight, h, &[v; 12]).unwrap();
            w.write(FeatureId::FlashCount, h, &[v; 12]).unwrap();
        }
        let manifest = w.finish().unwrap();
        match manifest.normalization[&FeatureId::CloudTopHeight] {
            Normalization::Standardize { mean, stdev } => {
                assert!((mean - 1.5).abs() < 1e-12);
                assert!((stdev - 0.5).abs() < 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
        match manifest.normalization[&FeatureId::FlashCount] {
            Normalization::Log1pStandardize { mean, .. } => {
                assert!((mean - (2f64.ln() + 3f64.ln()) / 2.0).abs() < 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
        let ds = Dataset::open(dir.path()).unwrap();
        let val = ds.compute_stats(Split::Val).unwrap();
        assert_ne!(val[&FeatureId::CloudTopHeight], manifest.normalization[&FeatureId::CloudTopHeight]);
        assert_eq!(ds.manifest().normalization, manifest.normalization);
        assert_eq!(ds.compute_stats(Split::Train).unwrap(), manifest.normalization);
    }

    #[test]
    fn normalization_inverts() {
        let n = Normalization::Log1pStandardize { mean: 0.3, stdev: 2.0 };
        for x in [0.0f32, 1.0, 17.0, 250.5] {
            assert!((n.invert(n.apply(x)) - x).abs() <= 1e-4 * (1.0 + x));
        }
        let flat = Normalization::Standardize { mean: 5.0, stdev: 0.0 };
        assert_eq!(flat.apply(5.0), 0.0);
    }
}
