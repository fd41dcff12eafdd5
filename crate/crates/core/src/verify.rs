//! Forecast verification: per-lead-time MAE and F1 scores, confusion counts,
//! the persistence baseline and score-table CSV emission.
//!
//! All metrics operate in mm/h, i.e. after the inverse transform back to
//! physical rates. Binarization uses `value >= threshold`. Degenerate F1
//! (no true and no predicted positives) is defined as 0 so aggregation never
//! produces NaN.

use std::path::Path;

use ndarray::{Array3, ArrayView2, ArrayView4, ArrayViewD};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// The two paper thresholds, mm/h.
pub const F1_THRESHOLDS: [f64; 2] = [0.1, 1.0];

/// Pooled confusion counts at one threshold.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    /// F1 from the pooled counts; 0 when no positives exist on either side.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

/// Mean absolute error between two same-shape grids.
pub fn mae(pred: &ArrayViewD<f64>, truth: &ArrayViewD<f64>) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::Shape(format!(
            "mae shapes {:?} vs {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Shape("mae on empty grids".into()));
    }
    let sum: f64 = pred
        .iter()
        .zip(truth.iter())
        .map(|(p, t)| (p - t).abs())
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Confusion counts after binarizing both grids at `threshold` (>=).
pub fn confusion(
    pred: &ArrayViewD<f64>,
    truth: &ArrayViewD<f64>,
    threshold: f64,
) -> Result<Confusion> {
    if pred.shape() != truth.shape() {
        return Err(Error::Shape(format!(
            "confusion shapes {:?} vs {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let mut c = Confusion::default();
    for (p, t) in pred.iter().zip(truth.iter()) {
        match (*p >= threshold, *t >= threshold) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// F1 score at one threshold.
pub fn f1(pred: &ArrayViewD<f64>, truth: &ArrayViewD<f64>, threshold: f64) -> Result<f64> {
    if threshold <= 0.0 {
        return Err(Error::Config("f1 threshold must be > 0".into()));
    }
    Ok(confusion(pred, truth, threshold)?.f1())
}

/// Repeats the last observed frame for every lead time.
pub fn persistence_baseline(last_input: &ArrayView2<f64>, out_frames: usize) -> Array3<f64> {
    let (h, w) = last_input.dim();
    Array3::from_shape_fn((out_frames, h, w), |(_, i, j)| last_input[(i, j)])
}

/// Scores of one lead time, pooled over every sample and pixel. The
/// confusion counts serialized to CSV are the ones at the 0.1 mm/h threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeadScore {
    pub lead_time_min: i64,
    pub mae: f64,
    #[serde(rename = "f1_0.1")]
    pub f1_low: f64,
    #[serde(rename = "f1_1.0")]
    pub f1_high: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreTable {
    pub rows: Vec<LeadScore>,
}

impl ScoreTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io_err = |e: csv::Error| Error::Data(format!("writing {}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| Error::Data(format!("creating {}: {e}", path.display())))?;
        for row in &self.rows {
            w.serialize(row).map_err(io_err)?;
        }
        w.flush().map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)
            .map_err(|e| Error::Data(format!("opening {}: {e}", path.display())))?;
        let mut rows = Vec::new();
        for rec in r.deserialize() {
            let row: LeadScore =
                rec.map_err(|e| Error::Data(format!("parsing {}: {e}", path.display())))?;
            rows.push(row);
        }
        Ok(ScoreTable { rows })
    }
}

/// Pools MAE and confusion counts per lead time over a (samples, lead, H, W)
/// stack of predictions and truths in mm/h. Lead times are labeled
/// `cadence_min`, `2*cadence_min`, ...
pub fn score_run(
    pred: &ArrayView4<f64>,
    truth: &ArrayView4<f64>,
    cadence_min: i64,
) -> Result<ScoreTable> {
    if pred.shape() != truth.shape() {
        return Err(Error::Shape(format!(
            "score_run shapes {:?} vs {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let (s, t, _, _) = pred.dim();
    if s == 0 || t == 0 {
        return Err(Error::Data("score_run on an empty stack".into()));
    }
    let mut rows = Vec::with_capacity(t);
    for lead in 0..t {
        let mut abs_sum = 0.0;
        let mut n_px = 0usize;
        let mut low = Confusion::default();
        let mut high = Confusion::default();
        for sample in 0..s {
            let p = pred.slice(ndarray::s![sample, lead, .., ..]);
            let tr = truth.slice(ndarray::s![sample, lead, .., ..]);
            abs_sum += p
                .iter()
                .zip(tr.iter())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>();
            n_px += p.len();
            low.merge(&confusion(
                &p.into_dyn(),
                &tr.into_dyn(),
                F1_THRESHOLDS[0],
            )?);
            high.merge(&confusion(
                &p.into_dyn(),
                &tr.into_dyn(),
                F1_THRESHOLDS[1],
            )?);
        }
        rows.push(LeadScore {
            lead_time_min: (lead as i64 + 1) * cadence_min,
            mae: abs_sum / n_px as f64,
            f1_low: low.f1(),
            f1_high: high.f1(),
            tp: low.tp,
            fp: low.fp,
            fn_: low.fn_,
            tn: low.tn,
        });
    }
    Ok(ScoreTable { rows })
}
