//! Deterministic synthetic radar-echo scenes.
//!
//! Scenes are sums of Gaussian rain cells advected by a velocity field with
//! per-step growth or decay. The domain is periodic, so cells that drift off
//! one edge re-enter the other and arbitrarily long scenes stay rainy.
//! Everything is a closed-form function of the timestep, so translated/scaled
//! frames can be checked analytically and the same seed always reproduces the
//! same sequence bit for bit.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grid::{Channel, FrameSequence, GridGeometry, RasterFrame};
use crate::{Error, Result};

/// Precipitation band edges used to derive the categorical channel, mm/h.
pub const TEMP_PROFILE_BANDS: [f32; 3] = [0.1, 1.0, 5.0];

/// Number of categories the band thresholds produce.
pub const TEMP_PROFILE_CATEGORIES: usize = TEMP_PROFILE_BANDS.len() + 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub seed: u64,
    pub n_cells: usize,
    /// Mean advection velocity in cells per step (col, row).
    pub velocity: (f64, f64),
    /// Uniform per-cell jitter added to the mean velocity, cells per step.
    pub velocity_jitter: f64,
    /// Per-step multiplicative amplitude factor range; (1.0, 1.0) = pure advection.
    pub growth_rate: (f64, f64),
    /// Peak cell amplitude range, mm/h.
    pub cell_amplitude: (f64, f64),
    /// Cell radius range (Gaussian sigma), cells.
    pub cell_radius: (f64, f64),
    pub frame_count: usize,
    pub rows: usize,
    pub cols: usize,
    /// Minutes between frames.
    pub cadence: i64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            seed: 0,
            n_cells: 12,
            velocity: (1.0, 0.5),
            velocity_jitter: 0.3,
            growth_rate: (0.97, 1.03),
            cell_amplitude: (2.0, 20.0),
            cell_radius: (3.0, 8.0),
            frame_count: 288,
            rows: 64,
            cols: 64,
            cadence: 15,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_count < 12 {
            return Err(Error::Config(
                "frame_count must be >= 12 (one input+output window)".into(),
            ));
        }
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Config("rows/cols must be > 0".into()));
        }
        if self.cell_amplitude.0 < 0.0 || self.cell_amplitude.1 < self.cell_amplitude.0 {
            return Err(Error::Config("invalid amplitude range".into()));
        }
        if self.cell_radius.0 <= 0.0 || self.cell_radius.1 < self.cell_radius.0 {
            return Err(Error::Config("radii must be > 0".into()));
        }
        if self.growth_rate.0 < 0.0 || self.growth_rate.1 < self.growth_rate.0 {
            return Err(Error::Config("invalid growth range".into()));
        }
        if self.cadence <= 0 {
            return Err(Error::Config("cadence must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Cell {
    row: f64,
    col: f64,
    v_row: f64,
    v_col: f64,
    amplitude: f64,
    radius: f64,
    growth: f64,
}

/// Generated channels of one scene.
#[derive(Debug, Clone)]
pub struct Scene {
    pub precipitation: FrameSequence,
    pub temp_profile: FrameSequence,
    /// Static, single frame at timestamp 0.
    pub relief: FrameSequence,
}

impl Scene {
    pub fn sequences(&self) -> Vec<FrameSequence> {
        vec![
            self.precipitation.clone(),
            self.temp_profile.clone(),
            self.relief.clone(),
        ]
    }
}

fn sample_range(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        rng.gen_range(range.0..range.1)
    } else {
        range.0
    }
}

/// Deterministic scene generation: same config (and seed) gives bit-identical
/// output.
pub fn generate_scene(cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cells: Vec<Cell> = (0..cfg.n_cells)
        .map(|_| Cell {
            row: rng.gen_range(0.0..cfg.rows as f64),
            col: rng.gen_range(0.0..cfg.cols as f64),
            v_row: cfg.velocity.1 + jitter(&mut rng, cfg.velocity_jitter),
            v_col: cfg.velocity.0 + jitter(&mut rng, cfg.velocity_jitter),
            amplitude: sample_range(&mut rng, cfg.cell_amplitude),
            radius: sample_range(&mut rng, cfg.cell_radius),
            growth: sample_range(&mut rng, cfg.growth_rate),
        })
        .collect();

    let geometry = GridGeometry::from_origin(cfg.rows, cfg.cols, 41.0, -10.5, 0.01);
    let mut precip_frames = Vec::with_capacity(cfg.frame_count);
    let mut temp_frames = Vec::with_capacity(cfg.frame_count);
    for t in 0..cfg.frame_count {
        let precip = precipitation_at(cfg, &cells, t);
        let temp = precip.mapv(categorize);
        let ts = t as i64 * cfg.cadence;
        precip_frames.push(RasterFrame {
            timestamp: ts,
            channel: Channel::PrecipMmPerH,
            values: precip,
        });
        temp_frames.push(RasterFrame {
            timestamp: ts,
            channel: Channel::TempProfileType,
            values: temp,
        });
    }

    let relief = RasterFrame {
        timestamp: 0,
        channel: Channel::ReliefM,
        values: ridge(cfg.rows, cfg.cols),
    };

    Ok(Scene {
        precipitation: FrameSequence::new(precip_frames, cfg.cadence, geometry.clone())?,
        temp_profile: FrameSequence::new(temp_frames, cfg.cadence, geometry.clone())?,
        relief: FrameSequence::new(vec![relief], cfg.cadence, geometry)?,
    })
}

fn jitter(rng: &mut ChaCha8Rng, j: f64) -> f64 {
    if j > 0.0 {
        rng.gen_range(-j..j)
    } else {
        0.0
    }
}

/// Shortest displacement from `a` to `b` on a ring of extent `n`.
fn torus_delta(a: f64, b: f64, n: f64) -> f64 {
    let d = (a - b).rem_euclid(n);
    if d > n / 2.0 {
        d - n
    } else {
        d
    }
}

fn precipitation_at(cfg: &SceneConfig, cells: &[Cell], t: usize) -> Array2<f32> {
    let tf = t as f64;
    let (nr, nc) = (cfg.rows as f64, cfg.cols as f64);
    let mut grid = Array2::<f32>::zeros((cfg.rows, cfg.cols));
    for cell in cells {
        // clamp the cumulative growth so long scenes neither die out nor blow up
        let amp = cell.amplitude * cell.growth.powf(tf).clamp(0.25, 4.0);
        // the domain is a torus: cells leaving one edge re-enter the other,
        // so the field stays statistically stationary over long scenes
        let cr = (cell.row + cell.v_row * tf).rem_euclid(nr);
        let cc = (cell.col + cell.v_col * tf).rem_euclid(nc);
        let inv2s2 = 1.0 / (2.0 * cell.radius * cell.radius);
        for r in 0..cfg.rows {
            let dr = torus_delta(r as f64, cr, nr);
            for c in 0..cfg.cols {
                let dc = torus_delta(c as f64, cc, nc);
                let v = amp * (-(dr * dr + dc * dc) * inv2s2).exp();
                grid[[r, c]] += v as f32;
            }
        }
    }
    grid.mapv_inplace(|v| v.max(0.0));
    grid
}

/// Thresholded precipitation band, a stand-in categorical channel.
pub fn categorize(p: f32) -> f32 {
    let mut band = 0u8;
    for edge in TEMP_PROFILE_BANDS {
        if p >= edge {
            band += 1;
        }
    }
    band as f32
}

/// Fixed smooth ridge used as the relief channel.
fn ridge(rows: usize, cols: usize) -> Array2<f32> {
    Array2::from_shape_fn((rows, cols), |(r, c)| {
        let x = c as f64 / cols as f64;
        let y = r as f64 / rows as f64;
        (400.0 + 600.0 * (std::f64::consts::PI * x).sin() * (0.5 + 0.5 * y)) as f32
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_cells_all_zero() {
        let cfg = SceneConfig {
            n_cells: 0,
            frame_count: 12,
            rows: 16,
            cols: 16,
            ..SceneConfig::default()
        };
        let scene = generate_scene(&cfg).unwrap();
        for f in &scene.precipitation.frames {
            assert!(f.values.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn pure_advection_shifts_one_column() {
        let cfg = SceneConfig {
            seed: 7,
            n_cells: 1,
            velocity: (1.0, 0.0),
            velocity_jitter: 0.0,
            growth_rate: (1.0, 1.0),
            cell_amplitude: (10.0, 10.0),
            cell_radius: (4.0, 4.0),
            frame_count: 12,
            rows: 48,
            cols: 48,
            cadence: 15,
        };
        let scene = generate_scene(&cfg).unwrap();
        let a = &scene.precipitation.frames[3].values;
        let b = &scene.precipitation.frames[4].values;
        // interior cells: frame t+1 at column c equals frame t at column c-1
        for r in 8..40 {
            for c in 9..40 {
                assert!(
                    (b[[r, c]] - a[[r, c - 1]]).abs() < 1e-5,
                    "r={r} c={c}: {} vs {}",
                    b[[r, c]],
                    a[[r, c - 1]]
                );
            }
        }
    }

    #[test]
    fn same_seed_identical() {
        let cfg = SceneConfig {
            frame_count: 12,
            rows: 24,
            cols: 24,
            ..SceneConfig::default()
        };
        let a = generate_scene(&cfg).unwrap();
        let b = generate_scene(&cfg).unwrap();
        assert_eq!(a.precipitation, b.precipitation);
        assert_eq!(a.temp_profile, b.temp_profile);
        assert_eq!(a.relief, b.relief);
    }

    #[test]
    fn nonnegative_everywhere() {
        let cfg = SceneConfig {
            frame_count: 24,
            rows: 32,
            cols: 32,
            ..SceneConfig::default()
        };
        let scene = generate_scene(&cfg).unwrap();
        for f in &scene.precipitation.frames {
            assert!(f.values.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn categories_in_range() {
        let cfg = SceneConfig {
            frame_count: 12,
            rows: 24,
            cols: 24,
            ..SceneConfig::default()
        };
        let scene = generate_scene(&cfg).unwrap();
        for f in &scene.temp_profile.frames {
            assert!(f
                .values
                .iter()
                .all(|v| *v >= 0.0 && *v < TEMP_PROFILE_CATEGORIES as f32));
        }
    }
}
