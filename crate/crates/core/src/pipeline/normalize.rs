//! Per-image percentile normalization.

use crate::error::{Error, Result};

/// Percentile of already sorted values with linear interpolation between
/// closest ranks (position `p / 100 * (n - 1)`).
pub fn percentile(sorted: &[f64], p: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::usage("percentile of an empty array"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::usage(format!("percentile {p} outside [0, 100]")));
    }
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

/// Maps `image` to `(v - p_low) / (p_high - p_low)` clipped to `[0, 1]`.
///
/// A degenerate image (`p_low == p_high`) yields all zeros and a warning.
pub fn percentile_normalize(image: &[f64], low: f64, high: f64) -> Result<Vec<f64>> {
    if !(0.0 <= low && low < high && high <= 100.0) {
        return Err(Error::usage(format!(
            "percentiles must satisfy 0 <= low < high <= 100, got ({low}, {high})"
        )));
    }
    if image.iter().any(|v| !v.is_finite()) {
        return Err(Error::usage("image contains non-finite values"));
    }
    let mut sorted = image.to_vec();
    sorted.sort_by(f64::total_cmp);
    let p_lo = percentile(&sorted, low)?;
    let p_hi = percentile(&sorted, high)?;
    if p_hi <= p_lo {
        log::warn!("degenerate image: percentiles {low} and {high} coincide at {p_lo}");
        return Ok(vec![0.0; image.len()]);
    }
    let range = p_hi - p_lo;
    Ok(image.iter().map(|&v| ((v - p_lo) / range).clamp(0.0, 1.0)).collect())
}
