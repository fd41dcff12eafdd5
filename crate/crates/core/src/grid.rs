//! Raster data model and the on-disk dataset format.
//!
//! A dataset on disk is a directory with one `manifest.json` plus one raw
//! payload file per frame at `<root>/<channel>/<timestamp>.raw`. Payloads are
//! headerless 32-bit IEEE-754 little-endian floats in row-major order, so they
//! are trivially readable from any language and bit-exact to test.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::{Error, Result};

/// Regular lat/lon grid geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub rows: usize,
    pub cols: usize,
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
    /// Degrees per cell.
    pub resolution: f64,
}

impl GridGeometry {
    /// Geometry spanning `rows`×`cols` cells at `resolution` degrees starting
    /// from the given south-west corner.
    pub fn from_origin(rows: usize, cols: usize, lat_min: f64, lon_min: f64, resolution: f64) -> Self {
        GridGeometry {
            rows,
            cols,
            lat_min,
            lat_max: lat_min + rows as f64 * resolution,
            lon_min,
            lon_max: lon_min + cols as f64 * resolution,
            resolution,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution <= 0.0 {
            return Err(Error::Geometry("resolution must be > 0".into()));
        }
        if self.lat_max <= self.lat_min || self.lon_max <= self.lon_min {
            return Err(Error::Geometry("extent must be non-empty".into()));
        }
        let rows = ((self.lat_max - self.lat_min) / self.resolution).round() as usize;
        let cols = ((self.lon_max - self.lon_min) / self.resolution).round() as usize;
        if rows != self.rows || cols != self.cols {
            return Err(Error::Geometry(format!(
                "rows/cols ({},{}) inconsistent with extent/resolution ({},{})",
                self.rows, self.cols, rows, cols
            )));
        }
        Ok(())
    }

    /// Latitude of the center of row `r` (row 0 is the southernmost row).
    pub fn lat_at(&self, r: usize) -> f64 {
        self.lat_min + (r as f64 + 0.5) * self.resolution
    }

    pub fn lon_at(&self, c: usize) -> f64 {
        self.lon_min + (c as f64 + 0.5) * self.resolution
    }
}

/// Data channel of a raster frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    PrecipMmPerH,
    TempProfileType,
    ReliefM,
}

impl Channel {
    pub fn dir_name(&self) -> &'static str {
        match self {
            Channel::PrecipMmPerH => "precip_mm_per_h",
            Channel::TempProfileType => "temp_profile_type",
            Channel::ReliefM => "relief_m",
        }
    }

    pub fn unit(&self) -> &'static str {
        match self {
            Channel::PrecipMmPerH => "mm/h",
            Channel::TempProfileType => "category",
            Channel::ReliefM => "m",
        }
    }

    /// Categorical channels are resampled by nearest-neighbor and never averaged.
    pub fn is_categorical(&self) -> bool {
        matches!(self, Channel::TempProfileType)
    }
}

/// One timestamped 2D grid of a single channel.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterFrame {
    /// Minutes since epoch.
    pub timestamp: i64,
    pub channel: Channel,
    pub values: Array2<f32>,
}

impl RasterFrame {
    pub fn validate(&self, geometry: &GridGeometry) -> Result<()> {
        let (r, c) = self.values.dim();
        if r != geometry.rows || c != geometry.cols {
            return Err(Error::Shape(format!(
                "frame t={} is {}x{}, geometry is {}x{}",
                self.timestamp, r, c, geometry.rows, geometry.cols
            )));
        }
        match self.channel {
            Channel::PrecipMmPerH => {
                if self.values.iter().any(|v| *v < 0.0 || !v.is_finite()) {
                    return Err(Error::Data(format!(
                        "precipitation frame t={} has negative or non-finite values",
                        self.timestamp
                    )));
                }
            }
            Channel::TempProfileType => {
                if self
                    .values
                    .iter()
                    .any(|v| *v < 0.0 || v.fract() != 0.0 || *v > 255.0)
                {
                    return Err(Error::Data(format!(
                        "categorical frame t={} has non-category values",
                        self.timestamp
                    )));
                }
            }
            Channel::ReliefM => {
                if self.values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Data(format!(
                        "relief frame t={} has non-finite values",
                        self.timestamp
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Ordered frames of one channel at a fixed cadence.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub frames: Vec<RasterFrame>,
    /// Minutes between consecutive frames.
    pub cadence: i64,
    pub geometry: GridGeometry,
}

impl FrameSequence {
    pub fn new(frames: Vec<RasterFrame>, cadence: i64, geometry: GridGeometry) -> Result<Self> {
        let seq = FrameSequence {
            frames,
            cadence,
            geometry,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.cadence <= 0 {
            return Err(Error::Data("cadence must be > 0".into()));
        }
        for f in &self.frames {
            f.validate(&self.geometry)?;
        }
        for w in self.frames.windows(2) {
            if w[0].channel != w[1].channel {
                return Err(Error::Data("mixed channels in one sequence".into()));
            }
            let dt = w[1].timestamp - w[0].timestamp;
            if dt != self.cadence {
                return Err(Error::Cadence(w[0].timestamp, w[1].timestamp, self.cadence));
            }
        }
        Ok(())
    }

    pub fn channel(&self) -> Option<Channel> {
        self.frames.first().map(|f| f.channel)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// One entry of the manifest frame index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub timestamp: i64,
    pub channel: Channel,
    pub path: String,
}

/// Human-readable description of a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub geometry: GridGeometry,
    pub channels: Vec<Channel>,
    /// Sorted by (channel, timestamp), no duplicates.
    pub frame_index: Vec<FrameEntry>,
    /// Cadence in minutes, per channel.
    pub cadence: BTreeMap<Channel, i64>,
    pub units: BTreeMap<Channel, String>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Writes one raw file per frame plus `manifest.json` under `root`.
pub fn write_dataset(sequences: &[FrameSequence], root: &Path) -> Result<DatasetManifest> {
    if sequences.is_empty() || sequences.iter().all(|s| s.is_empty()) {
        return Err(Error::Data("no frames".into()));
    }
    let geometry = sequences[0].geometry.clone();
    for s in sequences {
        s.validate()?;
        if s.geometry != geometry {
            return Err(Error::Geometry("geometry mismatch between channels".into()));
        }
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root.display().to_string(), e))?;

    let mut frame_index = Vec::new();
    let mut channels = Vec::new();
    let mut cadence = BTreeMap::new();
    let mut units = BTreeMap::new();
    for s in sequences {
        let ch = s
            .channel()
            .ok_or_else(|| Error::Data("no frames".into()))?;
        if channels.contains(&ch) {
            return Err(Error::Data(format!("duplicate channel {:?}", ch)));
        }
        channels.push(ch);
        cadence.insert(ch, s.cadence);
        units.insert(ch, ch.unit().to_string());
        let dir = root.join(ch.dir_name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        for f in &s.frames {
            let rel = format!("{}/{}.raw", ch.dir_name(), f.timestamp);
            let path = root.join(&rel);
            write_raw(&path, &f.values)?;
            frame_index.push(FrameEntry {
                timestamp: f.timestamp,
                channel: ch,
                path: rel,
            });
        }
    }
    frame_index.sort_by_key(|e| (e.channel, e.timestamp));

    let manifest = DatasetManifest {
        geometry,
        channels,
        frame_index,
        cadence,
        units,
    };
    let path = root.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Manifest(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(manifest)
}

fn write_raw(path: &Path, values: &Array2<f32>) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file =
        fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&buf)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_raw(path: &Path, rows: usize, cols: usize) -> Result<Array2<f32>> {
    let mut file =
        fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let expected = rows * cols * 4;
    if buf.len() != expected {
        return Err(Error::Data(format!(
            "{}: payload is {} bytes, expected {}",
            path.display(),
            buf.len(),
            expected
        )));
    }
    let mut values = Vec::with_capacity(rows * cols);
    for chunk in buf.chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::Shape(e.to_string()))
}

/// Reads `manifest.json` under `root` without loading payloads.
pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST_NAME);
    let text =
        fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))
}

/// Loads every channel of a dataset, verifying payload sizes and cadence.
pub fn read_dataset(root: &Path) -> Result<Vec<FrameSequence>> {
    let manifest = read_manifest(root)?;
    manifest.geometry.validate()?;
    let mut out = Vec::new();
    for ch in &manifest.channels {
        let mut entries: Vec<&FrameEntry> = manifest
            .frame_index
            .iter()
            .filter(|e| e.channel == *ch)
            .collect();
        entries.sort_by_key(|e| e.timestamp);
        let mut frames = Vec::with_capacity(entries.len());
        for e in entries {
            let path = root.join(&e.path);
            if !path.exists() {
                return Err(Error::Manifest(format!(
                    "manifest references absent file {}",
                    e.path
                )));
            }
            let values = read_raw(&path, manifest.geometry.rows, manifest.geometry.cols)?;
            frames.push(RasterFrame {
                timestamp: e.timestamp,
                channel: *ch,
                values,
            });
        }
        let cadence = *manifest
            .cadence
            .get(ch)
            .ok_or_else(|| Error::Manifest(format!("no cadence for {:?}", ch)))?;
        out.push(FrameSequence::new(
            frames,
            cadence,
            manifest.geometry.clone(),
        )?);
    }
    Ok(out)
}

/// Resolves a dataset frame path for a (channel, timestamp) pair.
pub fn frame_path(root: &Path, channel: Channel, timestamp: i64) -> PathBuf {
    root.join(channel.dir_name()).join(format!("{timestamp}.raw"))
}

/// Thins a sequence to a coarser cadence by keeping every (target/input)-th
/// frame. Selection is nearest-in-time, which for divisible cadences means the
/// frame exactly on the target timestamp; categorical channels are never
/// averaged.
pub fn resample_to_cadence(seq: &FrameSequence, target: i64) -> Result<FrameSequence> {
    if target <= 0 {
        return Err(Error::Data("target cadence must be > 0".into()));
    }
    if seq.cadence == target {
        return Ok(seq.clone());
    }
    if target % seq.cadence != 0 {
        return Err(Error::Data(format!(
            "cadence {} does not divide target {}",
            seq.cadence, target
        )));
    }
    let stride = (target / seq.cadence) as usize;
    let frames: Vec<RasterFrame> = seq.frames.iter().step_by(stride).cloned().collect();
    FrameSequence::new(frames, target, seq.geometry.clone())
}

/// Bilinear interpolation of a static field onto a target geometry.
///
/// Samples the source at the target cell centers using source cell-center
/// coordinates; exact for affine fields when target centers lie inside the
/// source center hull.
pub fn interpolate_relief(source: &RasterFrame, source_geom: &GridGeometry, target_geom: &GridGeometry) -> Result<RasterFrame> {
    source_geom.validate()?;
    target_geom.validate()?;
    source.validate(source_geom)?;
    if target_geom.lat_min < source_geom.lat_min
        || target_geom.lat_max > source_geom.lat_max
        || target_geom.lon_min < source_geom.lon_min
        || target_geom.lon_max > source_geom.lon_max
    {
        return Err(Error::Geometry(
            "target extent outside source extent".into(),
        ));
    }
    let mut out = Array2::<f32>::zeros((target_geom.rows, target_geom.cols));
    let src = &source.values;
    let (sr, sc) = src.dim();
    for r in 0..target_geom.rows {
        let lat = target_geom.lat_at(r);
        // fractional source row index of this latitude (cell-center based)
        let fr = (lat - source_geom.lat_min) / source_geom.resolution - 0.5;
        let (r0, r1, wr) = clamp_lerp(fr, sr);
        for c in 0..target_geom.cols {
            let lon = target_geom.lon_at(c);
            let fc = (lon - source_geom.lon_min) / source_geom.resolution - 0.5;
            let (c0, c1, wc) = clamp_lerp(fc, sc);
            let v00 = src[[r0, c0]] as f64;
            let v01 = src[[r0, c1]] as f64;
            let v10 = src[[r1, c0]] as f64;
            let v11 = src[[r1, c1]] as f64;
            let v = v00 * (1.0 - wr) * (1.0 - wc)
                + v01 * (1.0 - wr) * wc
                + v10 * wr * (1.0 - wc)
                + v11 * wr * wc;
            out[[r, c]] = v as f32;
        }
    }
    Ok(RasterFrame {
        timestamp: 0,
        channel: source.channel,
        values: out,
    })
}

fn clamp_lerp(f: f64, n: usize) -> (usize, usize, f64) {
    if f <= 0.0 {
        return (0, 0, 0.0);
    }
    if f >= (n - 1) as f64 {
        return (n - 1, n - 1, 0.0);
    }
    let i = f.floor() as usize;
    (i, i + 1, f - i as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use tempfile::TempDir;

    fn geom(rows: usize, cols: usize) -> GridGeometry {
        GridGeometry::from_origin(rows, cols, 41.0, -10.5, 0.01)
    }

    fn precip_seq(n: usize, rows: usize, cols: usize) -> FrameSequence {
        let g = geom(rows, cols);
        let frames = (0..n)
            .map(|i| RasterFrame {
                timestamp: i as i64 * 15,
                channel: Channel::PrecipMmPerH,
                values: Array2::from_shape_fn((rows, cols), |(r, c)| {
                    (i * 100 + r * 10 + c) as f32 * 0.1
                }),
            })
            .collect();
        FrameSequence::new(frames, 15, g).unwrap()
    }

    #[test]
    fn write_two_small_frames_manifest_sizes() {
        let dir = TempDir::new().unwrap();
        let seq = precip_seq(2, 4, 4);
        let manifest = write_dataset(&[seq], dir.path()).unwrap();
        assert_eq!(manifest.frame_index.len(), 2);
        for e in &manifest.frame_index {
            let meta = std::fs::metadata(dir.path().join(&e.path)).unwrap();
            assert_eq!(meta.len(), 64); // 4x4x4 bytes
        }
    }

    #[test]
    fn empty_frame_list_errors() {
        let dir = TempDir::new().unwrap();
        let err = write_dataset(&[], dir.path()).unwrap_err();
        assert!(err.to_string().contains("no frames"));
    }

    #[test]
    fn round_trip_bit_exact() {
        let dir = TempDir::new().unwrap();
        let seq = precip_seq(3, 5, 7);
        write_dataset(&[seq.clone()], dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0], seq);
    }

    #[test]
    fn absent_file_named_in_error() {
        let dir = TempDir::new().unwrap();
        let seq = precip_seq(2, 4, 4);
        write_dataset(&[seq], dir.path()).unwrap();
        let victim = dir.path().join("precip_mm_per_h/15.raw");
        std::fs::remove_file(&victim).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("15.raw"), "{err}");
    }

    #[test]
    fn cadence_gap_reports_offending_pair() {
        let dir = TempDir::new().unwrap();
        let mut seq = precip_seq(3, 4, 4);
        // introduce a gap by moving the last frame
        seq.frames[2].timestamp = 60;
        let g = seq.geometry.clone();
        // bypass the constructor check so the gap reaches read_dataset
        let frames = seq.frames.clone();
        let bad = FrameSequence {
            frames,
            cadence: 15,
            geometry: g,
        };
        let dir2 = TempDir::new().unwrap();
        // write manually without validation
        std::fs::create_dir_all(dir2.path().join("precip_mm_per_h")).unwrap();
        let mut index = Vec::new();
        for f in &bad.frames {
            let rel = format!("precip_mm_per_h/{}.raw", f.timestamp);
            write_raw(&dir2.path().join(&rel), &f.values).unwrap();
            index.push(FrameEntry {
                timestamp: f.timestamp,
                channel: Channel::PrecipMmPerH,
                path: rel,
            });
        }
        let manifest = DatasetManifest {
            geometry: bad.geometry.clone(),
            channels: vec![Channel::PrecipMmPerH],
            frame_index: index,
            cadence: [(Channel::PrecipMmPerH, 15)].into_iter().collect(),
            units: BTreeMap::new(),
        };
        std::fs::write(
            dir2.path().join(MANIFEST_NAME),
            serde_json::to_string(&manifest).unwrap(),
        )
        .unwrap();
        let err = read_dataset(dir2.path()).unwrap_err();
        match err {
            Error::Cadence(a, b, step) => {
                assert_eq!((a, b, step), (15, 60, 15));
            }
            other => panic!("expected cadence error, got {other}"),
        }
        drop(dir);
    }

    #[test]
    fn resample_every_third() {
        let g = geom(4, 4);
        let frames = (0..9)
            .map(|i| RasterFrame {
                timestamp: i * 5,
                channel: Channel::TempProfileType,
                values: Array2::from_elem((4, 4), (i % 3) as f32),
            })
            .collect();
        let seq = FrameSequence::new(frames, 5, g).unwrap();
        let out = resample_to_cadence(&seq, 15).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(
            out.frames.iter().map(|f| f.timestamp).collect::<Vec<_>>(),
            vec![0, 15, 30]
        );
    }

    #[test]
    fn resample_identity_when_matching() {
        let seq = precip_seq(4, 4, 4);
        let out = resample_to_cadence(&seq, 15).unwrap();
        assert_eq!(out, seq);
    }

    #[test]
    fn resample_non_divisible_errors() {
        let g = geom(4, 4);
        let frames = (0..3)
            .map(|i| RasterFrame {
                timestamp: i * 7,
                channel: Channel::PrecipMmPerH,
                values: Array2::zeros((4, 4)),
            })
            .collect();
        let seq = FrameSequence::new(frames, 7, g).unwrap();
        assert!(resample_to_cadence(&seq, 15).is_err());
    }

    #[test]
    fn relief_constant_source() {
        let sg = GridGeometry::from_origin(10, 10, 41.0, -10.5, 0.00833);
        let tg = GridGeometry::from_origin(6, 6, 41.005, -10.495, 0.01);
        let src = RasterFrame {
            timestamp: 0,
            channel: Channel::ReliefM,
            values: Array2::from_elem((10, 10), 321.5),
        };
        let out = interpolate_relief(&src, &sg, &tg).unwrap();
        for v in out.values.iter() {
            assert!((v - 321.5).abs() < 1e-4);
        }
    }

    #[test]
    fn relief_planar_ramp_exact() {
        let sg = GridGeometry::from_origin(20, 20, 41.0, -10.5, 0.00833);
        let tg = GridGeometry::from_origin(8, 8, 41.02, -10.48, 0.01);
        let plane = |lat: f64, lon: f64| (1000.0 * lat + 500.0 * lon) as f32;
        let src = RasterFrame {
            timestamp: 0,
            channel: Channel::ReliefM,
            values: Array2::from_shape_fn((20, 20), |(r, c)| plane(sg.lat_at(r), sg.lon_at(c))),
        };
        let out = interpolate_relief(&src, &sg, &tg).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let want = plane(tg.lat_at(r), tg.lon_at(c));
                assert!((out.values[[r, c]] - want).abs() < 1e-2, "r={r} c={c}");
            }
        }
    }

    #[test]
    fn relief_2x2_to_3x3_center() {
        // corners 0,1,1,2 -> center is the bilinear midpoint = 1
        let sg = GridGeometry::from_origin(2, 2, 0.0, 0.0, 1.0);
        let tg = GridGeometry::from_origin(3, 3, 0.25, 0.25, 0.5);
        let src = RasterFrame {
            timestamp: 0,
            channel: Channel::ReliefM,
            values: array![[0.0, 1.0], [1.0, 2.0]],
        };
        let out = interpolate_relief(&src, &sg, &tg).unwrap();
        assert!((out.values[[1, 1]] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn relief_outside_extent_errors() {
        let sg = GridGeometry::from_origin(4, 4, 41.0, -10.5, 0.01);
        let tg = GridGeometry::from_origin(4, 4, 40.0, -10.5, 0.01);
        let src = RasterFrame {
            timestamp: 0,
            channel: Channel::ReliefM,
            values: Array2::zeros((4, 4)),
        };
        assert!(interpolate_relief(&src, &sg, &tg).is_err());
    }
}
