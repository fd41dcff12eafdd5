//! Ring-interpolating patch extraction, the full-map-resize baseline, tiling
//! and reassembly.
//!
//! A patch is an `iSize`×`iSize` grid whose central `tSize`×`tSize` block is a
//! verbatim copy of the target region of the source map. Each of the `margin`
//! rings around the center summarizes a progressively wider band of the source
//! neighborhood: a band of source width `w` is area-averaged down to a 1-cell
//! ring of the patch, as four rectangles (upper, lower, left, right). The
//! source band width grows by `step` after every `freq` rings, so rings far
//! from the target compress more context into the same patch budget.
//!
//! Source cells outside the map are treated as zero (the no-rain background).
//! Within a ring the four rectangles are written in upper, lower, left, right
//! order, so the corner cells take the left/right value.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    /// Input patch side.
    pub i_size: usize,
    /// Target patch side.
    pub t_size: usize,
    /// Band width increment.
    pub step: usize,
    /// Rings between increments.
    pub freq: usize,
    /// Source-image offset of the nominal patch footprint; the target region
    /// starts at `origin + margin`. May be negative for edge tiles.
    pub origin: (i64, i64),
}

impl PatchSpec {
    pub fn new(i_size: usize, t_size: usize, step: usize, freq: usize) -> Self {
        PatchSpec {
            i_size,
            t_size,
            step,
            freq,
            origin: (0, 0),
        }
    }

    pub fn with_origin(mut self, x: i64, y: i64) -> Self {
        self.origin = (x, y);
        self
    }

    pub fn margin(&self) -> usize {
        (self.i_size - self.t_size) / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.i_size < 8 || self.t_size < 8 {
            return Err(Error::Config("iSize and tSize must be >= 8".into()));
        }
        if self.t_size >= self.i_size {
            return Err(Error::Config("tSize must be < iSize".into()));
        }
        if (self.i_size - self.t_size) % 2 != 0 {
            return Err(Error::Config("(iSize - tSize) must be even".into()));
        }
        if self.freq == 0 {
            return Err(Error::Config("freq must be > 0".into()));
        }
        Ok(())
    }

    /// Source cells consumed beyond the target region on each side: the sum of
    /// the band widths over all rings.
    pub fn reach(&self) -> usize {
        let mut w = 1usize;
        let mut total = 0usize;
        for k in 1..=self.margin() {
            total += w;
            if k % self.freq == 0 {
                w += self.step;
            }
        }
        total
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub values: Array2<f64>,
    pub spec: PatchSpec,
    /// Source rectangle actually consumed: (row0, col0, rows, cols), in
    /// source coordinates (may extend past the map; those cells read as 0).
    pub footprint: (i64, i64, usize, usize),
}

/// Target-tile placement of a patch within the full map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileRect {
    pub row: usize,
    pub col: usize,
    /// Valid (uncropped) extent; equals `t_size` except at the bottom/right map edge.
    pub rows: usize,
    pub cols: usize,
}

fn sample(grid: &ArrayView2<f64>, r: i64, c: i64) -> f64 {
    let (nr, nc) = grid.dim();
    if r < 0 || c < 0 || r >= nr as i64 || c >= nc as i64 {
        0.0
    } else {
        grid[[r as usize, c as usize]]
    }
}

/// Materializes a source rectangle (with zero padding outside the map).
fn read_rect(grid: &ArrayView2<f64>, r0: i64, c0: i64, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |(r, c)| {
        sample(grid, r0 + r as i64, c0 + c as i64)
    })
}

/// Area-average (box) resampling; conserves the mean exactly.
pub fn box_resample(src: &Array2<f64>, out_rows: usize, out_cols: usize) -> Array2<f64> {
    let (in_rows, in_cols) = src.dim();
    let sy = in_rows as f64 / out_rows as f64;
    let sx = in_cols as f64 / out_cols as f64;
    Array2::from_shape_fn((out_rows, out_cols), |(i, j)| {
        let y0 = i as f64 * sy;
        let y1 = (i + 1) as f64 * sy;
        let x0 = j as f64 * sx;
        let x1 = (j + 1) as f64 * sx;
        let mut acc = 0.0;
        let mut area = 0.0;
        let r_lo = y0.floor() as usize;
        let r_hi = (y1.ceil() as usize).min(in_rows);
        let c_lo = x0.floor() as usize;
        let c_hi = (x1.ceil() as usize).min(in_cols);
        for r in r_lo..r_hi {
            let ry = (y1.min((r + 1) as f64) - y0.max(r as f64)).max(0.0);
            if ry == 0.0 {
                continue;
            }
            for c in c_lo..c_hi {
                let rx = (x1.min((c + 1) as f64) - x0.max(c as f64)).max(0.0);
                if rx == 0.0 {
                    continue;
                }
                acc += src[[r, c]] * ry * rx;
                area += ry * rx;
            }
        }
        acc / area
    })
}

/// Extracts one ring-interpolated patch.
pub fn extract_patch(source: &ArrayView2<f64>, spec: &PatchSpec) -> Result<Patch> {
    Ok(extract_patch_with_coverage(source, spec)?.0)
}

/// Like [`extract_patch`], additionally returning a per-cell count of the
/// rings (or the center copy) that claimed each patch cell. Geometry is
/// correct iff the count is 1 everywhere.
pub fn extract_patch_with_coverage(
    source: &ArrayView2<f64>,
    spec: &PatchSpec,
) -> Result<(Patch, Array2<u32>)> {
    spec.validate()?;
    let margin = spec.margin() as i64;
    let t = spec.t_size as i64;
    let (x, y) = spec.origin;

    let mut patch = Array2::<f64>::zeros((spec.i_size, spec.i_size));
    let mut claims = Array2::<u32>::zeros((spec.i_size, spec.i_size));

    // source image indexes of the target region
    let mut ur_i = x + margin;
    let mut dr_i = x + margin + t;
    let mut lc_i = y + margin;
    let mut rc_i = y + margin + t;
    // patch indexes of the target region
    let mut ur_p = margin;
    let mut dr_p = margin + t;
    let mut lc_p = margin;
    let mut rc_p = margin + t;

    // copy the target patch
    for r in 0..spec.t_size {
        for c in 0..spec.t_size {
            patch[[(ur_p as usize) + r, (lc_p as usize) + c]] =
                sample(source, ur_i + r as i64, lc_i + c as i64);
            claims[[(ur_p as usize) + r, (lc_p as usize) + c]] += 1;
        }
    }

    let mut w = 1i64;
    for k in 1..=spec.margin() {
        let width = (rc_p - lc_p) as usize + 2; // patch strip length after growth
        let height = (dr_p - ur_p) as usize + 2;

        // upper
        let rect = read_rect(source, ur_i - w, lc_i - w, w as usize, (rc_i - lc_i + 2 * w) as usize);
        let strip = box_resample(&rect, 1, width);
        for (j, v) in strip.row(0).iter().enumerate() {
            patch[[(ur_p - 1) as usize, (lc_p - 1) as usize + j]] = *v;
        }
        // lower
        let rect = read_rect(source, dr_i, lc_i - w, w as usize, (rc_i - lc_i + 2 * w) as usize);
        let strip = box_resample(&rect, 1, width);
        for (j, v) in strip.row(0).iter().enumerate() {
            patch[[dr_p as usize, (lc_p - 1) as usize + j]] = *v;
        }
        // left (overwrites the two left corners)
        let rect = read_rect(source, ur_i - w, lc_i - w, (dr_i - ur_i + 2 * w) as usize, w as usize);
        let strip = box_resample(&rect, height, 1);
        for (i, v) in strip.column(0).iter().enumerate() {
            patch[[(ur_p - 1) as usize + i, (lc_p - 1) as usize]] = *v;
        }
        // right (overwrites the two right corners)
        let rect = read_rect(source, ur_i - w, rc_i, (dr_i - ur_i + 2 * w) as usize, w as usize);
        let strip = box_resample(&rect, height, 1);
        for (i, v) in strip.column(0).iter().enumerate() {
            patch[[(ur_p - 1) as usize + i, rc_p as usize]] = *v;
        }

        // one claim per ring for every cell of the 1-wide band
        for j in 0..width {
            claims[[(ur_p - 1) as usize, (lc_p - 1) as usize + j]] += 1;
            claims[[dr_p as usize, (lc_p - 1) as usize + j]] += 1;
        }
        for i in 1..height - 1 {
            claims[[(ur_p - 1) as usize + i, (lc_p - 1) as usize]] += 1;
            claims[[(ur_p - 1) as usize + i, rc_p as usize]] += 1;
        }

        // advance source indexes by the band width consumed this iteration,
        // then grow the band width
        ur_i -= w;
        dr_i += w;
        lc_i -= w;
        rc_i += w;
        ur_p -= 1;
        dr_p += 1;
        lc_p -= 1;
        rc_p += 1;
        if k % spec.freq == 0 {
            w += spec.step as i64;
        }
    }

    let reach = spec.reach() as i64;
    let footprint = (
        x + margin - reach,
        y + margin - reach,
        (t + 2 * reach) as usize,
        (t + 2 * reach) as usize,
    );
    Ok((
        Patch {
            values: patch,
            spec: *spec,
            footprint,
        },
        claims,
    ))
}

/// Non-overlapping `tSize` target tiling of the full map, one patch per tile.
/// The map is implicitly zero padded so the tiles cover it.
pub fn tile_map(source: &ArrayView2<f64>, spec: &PatchSpec) -> Result<Vec<(Patch, TileRect)>> {
    spec.validate()?;
    let (rows, cols) = source.dim();
    let t = spec.t_size;
    let n_tr = rows.div_ceil(t);
    let n_tc = cols.div_ceil(t);
    let margin = spec.margin() as i64;
    let mut out = Vec::with_capacity(n_tr * n_tc);
    for ti in 0..n_tr {
        for tj in 0..n_tc {
            let r0 = ti * t;
            let c0 = tj * t;
            let tile_spec = spec.with_origin(r0 as i64 - margin, c0 as i64 - margin);
            let patch = extract_patch(source, &tile_spec)?;
            out.push((
                patch,
                TileRect {
                    row: r0,
                    col: c0,
                    rows: t.min(rows - r0),
                    cols: t.min(cols - c0),
                },
            ));
        }
    }
    Ok(out)
}

/// Concatenates per-tile `tSize`×`tSize` predictions back into a full map,
/// cropping the padding region.
pub fn reassemble(tiles: &[(Array2<f64>, TileRect)], rows: usize, cols: usize) -> Result<Array2<f64>> {
    let mut out = Array2::<f64>::zeros((rows, cols));
    let mut covered = Array2::<u8>::zeros((rows, cols));
    for (values, rect) in tiles {
        let (vr, vc) = values.dim();
        if vr < rect.rows || vc < rect.cols {
            return Err(Error::Shape(format!(
                "tile at ({},{}) is {}x{}, needs at least {}x{}",
                rect.row, rect.col, vr, vc, rect.rows, rect.cols
            )));
        }
        for r in 0..rect.rows {
            for c in 0..rect.cols {
                if covered[[rect.row + r, rect.col + c]] != 0 {
                    return Err(Error::Data(format!(
                        "overlapping tiles at cell ({},{})",
                        rect.row + r,
                        rect.col + c
                    )));
                }
                covered[[rect.row + r, rect.col + c]] = 1;
                out[[rect.row + r, rect.col + c]] = values[[r, c]];
            }
        }
    }
    if covered.iter().any(|v| *v == 0) {
        return Err(Error::Data("missing tiles: map not fully covered".into()));
    }
    Ok(out)
}

/// Bilinear resize of a full map (the no-patches baseline).
///
/// Uses corner-aligned sampling, so same-size resize is the identity and
/// affine fields are reproduced exactly.
pub fn resize_full_map(source: &ArrayView2<f64>, out_rows: usize, out_cols: usize) -> Array2<f64> {
    let (in_rows, in_cols) = source.dim();
    let fy = |i: usize| {
        if out_rows > 1 {
            i as f64 * (in_rows - 1) as f64 / (out_rows - 1) as f64
        } else {
            (in_rows - 1) as f64 / 2.0
        }
    };
    let fx = |j: usize| {
        if out_cols > 1 {
            j as f64 * (in_cols - 1) as f64 / (out_cols - 1) as f64
        } else {
            (in_cols - 1) as f64 / 2.0
        }
    };
    Array2::from_shape_fn((out_rows, out_cols), |(i, j)| {
        let y = fy(i);
        let x = fx(j);
        let r0 = (y.floor() as usize).min(in_rows - 1);
        let r1 = (r0 + 1).min(in_rows - 1);
        let c0 = (x.floor() as usize).min(in_cols - 1);
        let c1 = (c0 + 1).min(in_cols - 1);
        let wy = y - r0 as f64;
        let wx = x - c0 as f64;
        source[[r0, c0]] * (1.0 - wy) * (1.0 - wx)
            + source[[r0, c1]] * (1.0 - wy) * wx
            + source[[r1, c0]] * wy * (1.0 - wx)
            + source[[r1, c1]] * wy * wx
    })
}
