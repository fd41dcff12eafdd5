//! Value transforms: log(x+1) compression for precipitation and z-score
//! standardization, with exact inverses so predictions can be reported in
//! mm/h.
//!
//! Standardization statistics are fitted on the training split only (after the
//! log transform for precipitation) and then frozen. The categorical channel
//! is one-hot encoded, not z-scored.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Frozen per-channel standardization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    /// Population standard deviation; must be > 0.
    pub stdev: f64,
}

impl NormStats {
    /// Fits mean and population stdev over all cells of the given grids.
    pub fn fit<'a, I>(grids: I) -> Result<NormStats>
    where
        I: IntoIterator<Item = ArrayView2<'a, f64>>,
    {
        let mut n = 0usize;
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        for g in grids {
            for v in g.iter() {
                n += 1;
                sum += v;
                sum_sq += v * v;
            }
        }
        if n == 0 {
            return Err(Error::Data("cannot fit stats on empty data".into()));
        }
        let mean = sum / n as f64;
        let var = (sum_sq / n as f64 - mean * mean).max(0.0);
        let stdev = var.sqrt();
        if stdev == 0.0 {
            return Err(Error::Data("stdev is 0; channel cannot be z-scored".into()));
        }
        Ok(NormStats { mean, stdev })
    }
}

/// Elementwise ln(x + 1). Errors on negative input.
pub fn log1p_forward(x: &Array2<f64>) -> Result<Array2<f64>> {
    if x.iter().any(|v| *v < 0.0) {
        return Err(Error::Data("log1p input has negative values".into()));
    }
    Ok(x.mapv(f64::ln_1p))
}

/// Inverse of [`log1p_forward`]: exp(x) - 1, clamped at 0.
pub fn log1p_inverse(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.exp_m1().max(0.0))
}

/// (x - mean) / stdev.
pub fn zscore(x: &Array2<f64>, stats: &NormStats) -> Result<Array2<f64>> {
    if stats.stdev <= 0.0 {
        return Err(Error::Data("stdev must be > 0".into()));
    }
    Ok(x.mapv(|v| (v - stats.mean) / stats.stdev))
}

/// Inverse of [`zscore`].
pub fn zscore_inverse(x: &Array2<f64>, stats: &NormStats) -> Array2<f64> {
    x.mapv(|v| v * stats.stdev + stats.mean)
}

/// log1p followed by z-score: the precipitation path into the models.
pub fn precip_forward(x: &Array2<f64>, stats: &NormStats) -> Result<Array2<f64>> {
    zscore(&log1p_forward(x)?, stats)
}

/// Inverse of [`precip_forward`], clamping precipitation at 0 mm/h.
pub fn precip_inverse(x: &Array2<f64>, stats: &NormStats) -> Array2<f64> {
    log1p_inverse(&zscore_inverse(x, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn log1p_fixed_points() {
        let x = array![[0.0, std::f64::consts::E - 1.0]];
        let y = log1p_forward(&x).unwrap();
        assert!((y[[0, 0]]).abs() < 1e-12);
        assert!((y[[0, 1]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log1p_small_grid() {
        let x = array![[0.0, 1.0, 9.0]];
        let y = log1p_forward(&x).unwrap();
        assert!((y[[0, 1]] - 2.0f64.ln()).abs() < 1e-12);
        assert!((y[[0, 2]] - 10.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn log1p_rejects_negative() {
        let x = array![[-0.1]];
        assert!(log1p_forward(&x).is_err());
    }

    #[test]
    fn zscore_at_mean_is_zero() {
        let stats = NormStats { mean: 3.5, stdev: 2.0 };
        let x = array![[3.5]];
        assert_eq!(zscore(&x, &stats).unwrap()[[0, 0]], 0.0);
    }

    #[test]
    fn zscore_of_0_2_with_unit_stats() {
        // population stdev of {0, 2} is 1
        let x = array![[0.0, 2.0]];
        let stats = NormStats::fit([x.view()]).unwrap();
        assert!((stats.mean - 1.0).abs() < 1e-12);
        assert!((stats.stdev - 1.0).abs() < 1e-12);
        let z = zscore(&x, &stats).unwrap();
        assert!((z[[0, 0]] + 1.0).abs() < 1e-12);
        assert!((z[[0, 1]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_stdev_rejected() {
        let x = array![[5.0, 5.0]];
        assert!(NormStats::fit([x.view()]).is_err());
        let stats = NormStats { mean: 0.0, stdev: 0.0 };
        assert!(zscore(&x, &stats).is_err());
    }

    #[test]
    fn round_trip_up_to_300_mm_h() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let x = Array2::from_shape_fn((8, 8), |_| rng.gen_range(0.0..300.0));
            let stats = NormStats::fit([log1p_forward(&x).unwrap().view()]).unwrap();
            let z = precip_forward(&x, &stats).unwrap();
            let back = precip_inverse(&z, &stats);
            for (a, b) in x.iter().zip(back.iter()) {
                assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn training_stats_standardize_to_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grids: Vec<Array2<f64>> = (0..5)
            .map(|_| Array2::from_shape_fn((6, 6), |_| rng.gen_range(0.0..50.0)))
            .collect();
        let logs: Vec<Array2<f64>> =
            grids.iter().map(|g| log1p_forward(g).unwrap()).collect();
        let stats = NormStats::fit(logs.iter().map(|g| g.view())).unwrap();
        let mut n = 0usize;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for g in &logs {
            let z = zscore(g, &stats).unwrap();
            for v in z.iter() {
                n += 1;
                sum += v;
                sum_sq += v * v;
            }
        }
        let mean = sum / n as f64;
        let stdev = (sum_sq / n as f64 - mean * mean).sqrt();
        assert!(mean.abs() < 1e-6);
        assert!((stdev - 1.0).abs() < 1e-6);
    }

    #[test]
    fn monotone() {
        let stats = NormStats { mean: 0.7, stdev: 1.3 };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let a: f64 = rng.gen_range(0.0..300.0);
            let b: f64 = rng.gen_range(0.0..300.0);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            if lo == hi {
                continue;
            }
            let f = |v: f64| {
                precip_forward(&array![[v]], &stats).unwrap()[[0, 0]]
            };
            assert!(f(lo) < f(hi));
        }
    }
}
