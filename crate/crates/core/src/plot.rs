//! Minimal PNG line plots: metric-vs-lead-time figures and learning curves.
//!
//! No font rendering; figures carry axes, tick marks and color-coded series
//! only, which is enough for a quick visual read of the score tables.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::trainer::CurvePoint;
use crate::verify::ScoreTable;
use crate::{Error, Result};

const MARGIN: u32 = 40;
const BG: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([0, 0, 0]);

/// Color cycle for successive series.
pub const PALETTE: [[u8; 3]; 6] = [
    [214, 39, 40],
    [31, 119, 180],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [23, 190, 207],
];

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub color: [u8; 3],
}

/// Renders one or more polylines with shared axes to a PNG file.
pub fn line_plot(series: &[Series], width: u32, height: u32, path: &Path) -> Result<()> {
    if series.iter().all(|s| s.points.is_empty()) {
        return Err(Error::Data("nothing to plot".into()));
    }
    if width <= 2 * MARGIN || height <= 2 * MARGIN {
        return Err(Error::Config("plot size too small".into()));
    }
    let xs: Vec<f64> = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .collect();
    let ys: Vec<f64> = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.1))
        .collect();
    let (x0, x1) = span(&xs);
    let (y0, y1) = span(&ys);

    let mut img = RgbImage::from_pixel(width, height, BG);
    let px = |x: f64| -> f64 {
        MARGIN as f64 + (x - x0) / (x1 - x0) * (width - 2 * MARGIN) as f64
    };
    let py = |y: f64| -> f64 {
        (height - MARGIN) as f64 - (y - y0) / (y1 - y0) * (height - 2 * MARGIN) as f64
    };

    // axes
    draw_line(
        &mut img,
        (MARGIN as f64, (height - MARGIN) as f64),
        ((width - MARGIN) as f64, (height - MARGIN) as f64),
        AXIS,
    );
    draw_line(
        &mut img,
        (MARGIN as f64, MARGIN as f64),
        (MARGIN as f64, (height - MARGIN) as f64),
        AXIS,
    );
    // tick marks
    for k in 0..=4 {
        let fx = px(x0 + (x1 - x0) * k as f64 / 4.0);
        draw_line(
            &mut img,
            (fx, (height - MARGIN) as f64),
            (fx, (height - MARGIN + 4) as f64),
            AXIS,
        );
        let fy = py(y0 + (y1 - y0) * k as f64 / 4.0);
        draw_line(&mut img, ((MARGIN - 4) as f64, fy), (MARGIN as f64, fy), AXIS);
    }

    for s in series {
        let color = Rgb(s.color);
        for pair in s.points.windows(2) {
            draw_line(
                &mut img,
                (px(pair[0].0), py(pair[0].1)),
                (px(pair[1].0), py(pair[1].1)),
                color,
            );
        }
        for p in &s.points {
            draw_marker(&mut img, px(p.0), py(p.1), color);
        }
    }

    img.save(path)
        .map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))?;
    Ok(())
}

fn span(vals: &[f64]) -> (f64, f64) {
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if (hi - lo).abs() < 1e-12 {
        (lo - 1.0, hi + 1.0)
    } else {
        (lo, hi)
    }
}

fn draw_marker(img: &mut RgbImage, x: f64, y: f64, color: Rgb<u8>) {
    for dx in -1i64..=1 {
        for dy in -1i64..=1 {
            put(img, x as i64 + dx, y as i64 + dy, color);
        }
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for k in 0..=steps {
        let t = k as f64 / steps as f64;
        let x = a.0 + (b.0 - a.0) * t;
        let y = a.1 + (b.1 - a.1) * t;
        put(img, x.round() as i64, y.round() as i64, color);
    }
}

/// Writes `<stem>_mae.png` and `<stem>_f1.png` next to each other and
/// returns the created paths.
pub fn plot_scores(table: &ScoreTable, out_dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    if table.rows.is_empty() {
        return Err(Error::Data("empty score table".into()));
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let leads: Vec<f64> = table.rows.iter().map(|r| r.lead_time_min as f64).collect();

    let mae_path = out_dir.join(format!("{stem}_mae.png"));
    line_plot(
        &[Series {
            label: "mae".into(),
            points: leads
                .iter()
                .zip(table.rows.iter())
                .map(|(x, r)| (*x, r.mae))
                .collect(),
            color: PALETTE[0],
        }],
        640,
        480,
        &mae_path,
    )?;

    let f1_path = out_dir.join(format!("{stem}_f1.png"));
    line_plot(
        &[
            Series {
                label: "f1 at 0.1 mm/h".into(),
                points: leads
                    .iter()
                    .zip(table.rows.iter())
                    .map(|(x, r)| (*x, r.f1_low))
                    .collect(),
                color: PALETTE[1],
            },
            Series {
                label: "f1 at 1.0 mm/h".into(),
                points: leads
                    .iter()
                    .zip(table.rows.iter())
                    .map(|(x, r)| (*x, r.f1_high))
                    .collect(),
                color: PALETTE[2],
            },
        ],
        640,
        480,
        &f1_path,
    )?;
    Ok(vec![mae_path, f1_path])
}

/// Loss-vs-step learning curve with one series per split.
pub fn plot_curve(curve: &[CurvePoint], path: &Path) -> Result<()> {
    let mut series = Vec::new();
    for (i, split) in [
        crate::partition::SplitId::Train,
        crate::partition::SplitId::Val,
    ]
    .iter()
    .enumerate()
    {
        let points: Vec<(f64, f64)> = curve
            .iter()
            .filter(|p| p.split == *split)
            .map(|p| (p.step as f64, p.loss_total))
            .collect();
        if !points.is_empty() {
            series.push(Series {
                label: split.as_str().to_string(),
                points,
                color: PALETTE[i],
            });
        }
    }
    line_plot(&series, 640, 480, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::SplitId;
    use crate::verify::LeadScore;
    use tempfile::TempDir;

    fn demo_table() -> ScoreTable {
        ScoreTable {
            rows: (1..=6)
                .map(|k| LeadScore {
                    lead_time_min: 15 * k,
                    mae: 0.1 * k as f64,
                    f1_low: 1.0 - 0.05 * k as f64,
                    f1_high: 0.8 - 0.05 * k as f64,
                    tp: 10,
                    fp: 2,
                    fn_: 3,
                    tn: 100,
                })
                .collect(),
        }
    }

    #[test]
    fn score_plots_are_valid_pngs() {
        let dir = TempDir::new().unwrap();
        let paths = plot_scores(&demo_table(), dir.path(), "test").unwrap();
        assert_eq!(paths.len(), 2);
        for p in paths {
            let img = image::open(&p).unwrap().to_rgb8();
            assert_eq!((img.width(), img.height()), (640, 480));
            // something other than background and axes was drawn
            let colored = img
                .pixels()
                .filter(|px| px.0 != [255, 255, 255] && px.0 != [0, 0, 0])
                .count();
            assert!(colored > 50, "only {colored} colored pixels");
        }
    }

    #[test]
    fn curve_plot_draws_both_splits() {
        let curve: Vec<CurvePoint> = (1..=5)
            .flat_map(|k| {
                [
                    CurvePoint {
                        step: k * 10,
                        split: SplitId::Train,
                        loss_total: 1.0 / k as f64,
                        loss_wssim: 0.0,
                        loss_wmse: 0.0,
                    },
                    CurvePoint {
                        step: k * 10,
                        split: SplitId::Val,
                        loss_total: 1.2 / k as f64,
                        loss_wssim: 0.0,
                        loss_wmse: 0.0,
                    },
                ]
            })
            .collect();
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("curve.png");
        plot_curve(&curve, &path).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        let has = |c: [u8; 3]| img.pixels().any(|p| p.0 == c);
        assert!(has(PALETTE[0]));
        assert!(has(PALETTE[1]));
    }

    #[test]
    fn degenerate_inputs_rejected() {
        let dir = TempDir::new().unwrap();
        assert!(line_plot(&[], 640, 480, &dir.path().join("x.png")).is_err());
        assert!(plot_scores(&ScoreTable::default(), dir.path(), "x").is_err());
    }
}
