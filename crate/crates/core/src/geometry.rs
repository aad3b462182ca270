//! Coordinate grid, Gaussian kernel, pixel shifting and medoids.
//!
//! Convention: `x` indexes columns and is normalized by the width, `y`
//! indexes rows and is normalized by the height. Everything downstream
//! (losses, clustering, linking, augmentation) relies on this.

use crate::error::{Error, Result};
use crate::fields::{NormalizedPoint, VectorField};

/// Normalized position of pixel `(row, col)` in an `h x w` image.
pub fn normalize_coords(row: usize, col: usize, h: usize, w: usize) -> Result<NormalizedPoint> {
    if row >= h || col >= w {
        return Err(Error::usage(format!(
            "pixel ({row}, {col}) outside {h}x{w} image"
        )));
    }
    Ok(pixel_position(row * w + col, h, w))
}

/// Normalized position of flat pixel index `idx`. No bounds check.
#[inline]
pub(crate) fn pixel_position(idx: usize, h: usize, w: usize) -> NormalizedPoint {
    let (row, col) = (idx / w, idx % w);
    NormalizedPoint::new_unchecked(col as f64 / w as f64, row as f64 / h as f64)
}

/// `exp(w_s * mean_bw)` per component.
pub fn scale_bandwidth(mean_bw: [f64; 2], w_s: f64) -> [f64; 2] {
    [(w_s * mean_bw[0]).exp(), (w_s * mean_bw[1]).exp()]
}

/// Gaussian kernel between two points with per-axis bandwidths.
pub fn gaussian_distance(
    center: NormalizedPoint,
    point: NormalizedPoint,
    bw: [f64; 2],
) -> Result<f64> {
    if !(bw[0] > 0.0 && bw[1] > 0.0) {
        return Err(Error::usage(format!("bandwidth must be positive, got {bw:?}")));
    }
    Ok(kernel(
        center.x() - point.x(),
        center.y() - point.y(),
        bw[0],
        bw[1],
    ))
}

#[inline]
pub(crate) fn kernel(dx: f64, dy: f64, sx: f64, sy: f64) -> f64 {
    (-(dx * dx) / sx - (dy * dy) / sy).exp()
}

/// Radius along one axis at which the kernel drops to `level`:
/// `sqrt(s * ln(1 / level))`. For `level = 0.5` this is `sqrt(s ln 2)`.
pub fn contour_radius(s: f64, level: f64) -> f64 {
    (s * (1.0 / level).ln()).sqrt()
}

/// Adds offsets to pixel positions: `e_i = p_i + o_i`.
///
/// With `mask = None` every pixel is shifted in flat index order; otherwise
/// only the listed flat indices, in the given order. Results are not clamped.
pub fn shift_pixels(field: &VectorField, mask: Option<&[usize]>) -> Vec<NormalizedPoint> {
    let (h, w) = (field.height(), field.width());
    let shift = |idx: usize| {
        let p = pixel_position(idx, h, w);
        let (ox, oy) = field.at(idx);
        NormalizedPoint::new_unchecked(p.x() + ox, p.y() + oy)
    };
    match mask {
        Some(idx) => idx.iter().map(|&i| shift(i)).collect(),
        None => (0..h * w).map(shift).collect(),
    }
}

/// Nearest grid index for a normalized coordinate along an axis of length
/// `n`. Halfway cases round toward the lower index. `None` when outside.
#[inline]
pub(crate) fn grid_index(v: f64, n: usize) -> Option<usize> {
    let k = (v * n as f64 - 0.5).ceil();
    if k >= 0.0 && k < n as f64 {
        Some(k as usize)
    } else {
        None
    }
}

/// Flat pixel index hit by a shifted point, if it lands inside the frame.
#[inline]
pub(crate) fn grid_cell(p: NormalizedPoint, h: usize, w: usize) -> Option<usize> {
    let col = grid_index(p.x(), w)?;
    let row = grid_index(p.y(), h)?;
    Some(row * w + col)
}

/// Member minimizing the summed Euclidean distance to all members.
///
/// Ties go to the lexicographically smallest `(row, col)`. The result does
/// not depend on input order.
pub fn medoid(pixels: &[(usize, usize)]) -> Result<(usize, usize)> {
    if pixels.is_empty() {
        return Err(Error::usage("medoid of an empty pixel set"));
    }
    let mut pts = pixels.to_vec();
    pts.sort_unstable();
    pts.dedup();
    if pts.len() == 1 {
        return Ok(pts[0]);
    }
    let coords: Vec<(f64, f64)> = pts.iter().map(|&(r, c)| (r as f64, c as f64)).collect();
    let mut best: (usize, f64) = (usize::MAX, f64::INFINITY);
    for (i, &(ri, ci)) in coords.iter().enumerate() {
        let mut sum = 0.0;
        for &(rj, cj) in &coords {
            sum += ((ri - rj).powi(2) + (ci - cj).powi(2)).sqrt();
            if sum > best.1 {
                break;
            }
        }
        // Equal sums can differ in the last bits; keep the earlier member.
        if best.0 == usize::MAX || sum < best.1 - 1e-12 * best.1.max(1.0) {
            best = (i, sum);
        }
    }
    Ok(pts[best.0])
}

/// Medoid of a set of flat pixel indices, returned as a flat index.
pub fn medoid_of_indices(indices: &[usize], width: usize) -> Result<usize> {
    let pts: Vec<(usize, usize)> = indices.iter().map(|&i| (i / width, i % width)).collect();
    medoid(&pts).map(|(r, c)| r * width + c)
}
