//! Seeded bandwidth clustering of one frame.
//!
//! Foreground pixels (seediness above threshold) are shifted by their
//! offsets and voted into a pixel grid. Grid cells with enough votes in
//! their 3x3 neighbourhood become candidate centers, processed in order of
//! decreasing seediness. Each candidate claims the shifted pixels within
//! its kernel acceptance ellipse, using the smoothed bandwidth at the
//! candidate. Pixels on boundaries may move to a later cluster when their
//! kernel score improves.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::fields::{BandwidthField, LabelImage, NormalizedPoint, ScalarField, VectorField};
use crate::geometry::{contour_radius, grid_cell, kernel, pixel_position, scale_bandwidth};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterConfig {
    /// Pixels with seediness strictly above this are foreground.
    pub seediness_threshold: f64,
    /// Pixels join a cluster when their kernel score is strictly above this.
    pub kernel_accept_threshold: f64,
    /// A grid cell is a candidate when its 3x3 vote sum is strictly above this.
    pub min_neighbor_votes: usize,
    pub min_mask_size: usize,
    pub w_s: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            seediness_threshold: 0.5,
            kernel_accept_threshold: 0.5,
            min_neighbor_votes: 5,
            min_mask_size: DEFAULT_MIN_MASK_SIZE,
            w_s: crate::DEFAULT_BANDWIDTH_SCALE,
        }
    }
}

/// Minimum mask size used when no training statistics are available.
pub const DEFAULT_MIN_MASK_SIZE: usize = 2;

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("seediness_threshold", self.seediness_threshold),
            ("kernel_accept_threshold", self.kernel_accept_threshold),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::usage(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if self.min_mask_size < 1 {
            return Err(Error::usage("min_mask_size must be at least 1"));
        }
        if !self.w_s.is_finite() {
            return Err(Error::usage("w_s must be finite"));
        }
        Ok(())
    }
}

/// Half of the 1% percentile of training mask sizes (nearest rank), at least 1.
pub fn min_mask_size_from_training(sizes: &[usize]) -> Option<usize> {
    if sizes.is_empty() {
        return None;
    }
    let mut s = sizes.to_vec();
    s.sort_unstable();
    let rank = ((0.01 * s.len() as f64).ceil() as usize).clamp(1, s.len());
    Some((s[rank - 1] / 2).max(1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterOutcome {
    /// Labels `1..=k` in order of cluster creation.
    pub labels: LabelImage,
    /// Kernel center used for each label.
    pub centers: BTreeMap<u32, NormalizedPoint>,
    /// Seediness of the founding candidate of each label.
    pub scores: BTreeMap<u32, f64>,
    /// Clusters discarded for being smaller than `min_mask_size`.
    pub rejected: usize,
}

/// A potential cell center: a grid cell and the pixel that founded it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    /// Flat index of the grid cell.
    pub cell: usize,
    /// Highest seediness among pixels voting into the cell's 3x3 neighbourhood.
    pub score: f64,
    /// Flat index of the pixel carrying `score`.
    pub founder: usize,
}

/// 3x3 box mean of both bandwidth channels. Border pixels average over the
/// part of the window inside the image.
pub fn smooth_bandwidths(bw: &BandwidthField) -> BandwidthField {
    let (h, w) = (bw.height(), bw.width());
    let n = h * w;
    let mut out = vec![0.0; 2 * n];
    for (ch, plane) in [bw.x(), bw.y()].into_iter().enumerate() {
        for r in 0..h {
            let (r0, r1) = (r.saturating_sub(1), (r + 1).min(h - 1));
            for c in 0..w {
                let (c0, c1) = (c.saturating_sub(1), (c + 1).min(w - 1));
                let mut sum = 0.0;
                for rr in r0..=r1 {
                    sum += plane[rr * w + c0..=rr * w + c1].iter().sum::<f64>();
                }
                let count = ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64;
                out[ch * n + r * w + c] = sum / count;
            }
        }
    }
    BandwidthField::from_raw(h, w, out)
}

/// Flat indices with seediness strictly above the threshold, ascending.
pub fn select_foreground(seediness: &ScalarField, cfg: &ClusterConfig) -> Vec<usize> {
    seediness
        .values()
        .iter()
        .enumerate()
        .filter(|(_, &d)| d > cfg.seediness_threshold)
        .map(|(i, _)| i)
        .collect()
}

/// Votes shifted foreground pixels into the grid and returns candidate
/// centers sorted by decreasing founding seediness (ties: lower cell index).
///
/// `shifted` pairs each voting pixel's flat index with its shifted position.
/// Votes landing outside the frame are dropped.
pub fn find_candidate_centers(
    shifted: &[(usize, NormalizedPoint)],
    seediness: &ScalarField,
    cfg: &ClusterConfig,
) -> Vec<Candidate> {
    let (h, w) = (seediness.height(), seediness.width());
    let d = seediness.values();
    let mut votes = vec![0usize; h * w];
    // Best voter per cell: (seediness, pixel).
    let mut best: Vec<Option<(f64, usize)>> = vec![None; h * w];
    for &(pixel, p) in shifted {
        let Some(cell) = grid_cell(p, h, w) else {
            continue;
        };
        votes[cell] += 1;
        best[cell] = better(best[cell], (d[pixel], pixel));
    }

    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let mut sum = 0;
            let mut founder = None;
            for rr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
                for cc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                    let cell = rr * w + cc;
                    sum += votes[cell];
                    if let Some(b) = best[cell] {
                        founder = better(founder, b);
                    }
                }
            }
            if sum > cfg.min_neighbor_votes {
                if let Some((score, pixel)) = founder {
                    out.push(Candidate {
                        cell: r * w + c,
                        score,
                        founder: pixel,
                    });
                }
            }
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.cell.cmp(&b.cell)));
    out
}

fn better(cur: Option<(f64, usize)>, new: (f64, usize)) -> Option<(f64, usize)> {
    match cur {
        Some(c) if c.0 > new.0 || (c.0 == new.0 && c.1 <= new.1) => Some(c),
        _ => Some(new),
    }
}

/// Clusters one frame's predictions into instance masks.
pub fn cluster_frame(
    off: &VectorField,
    bw: &BandwidthField,
    seediness: &ScalarField,
    cfg: &ClusterConfig,
) -> Result<ClusterOutcome> {
    cfg.validate()?;
    let (h, w) = (off.height(), off.width());
    for (name, dims) in [
        ("bandwidth", (bw.height(), bw.width())),
        ("seediness", (seediness.height(), seediness.width())),
    ] {
        if dims != (h, w) {
            return Err(Error::shape(
                format!("{name} {h}x{w}"),
                format!("{}x{}", dims.0, dims.1),
            ));
        }
    }
    let n = h * w;
    let smooth = smooth_bandwidths(bw);

    // In-frame shifted foreground pixels; everything else is background.
    let mut shifted: Vec<(usize, NormalizedPoint)> = Vec::new();
    let mut voter_cell = vec![usize::MAX; n];
    for idx in select_foreground(seediness, cfg) {
        let p = pixel_position(idx, h, w);
        let (ox, oy) = off.at(idx);
        let e = NormalizedPoint::new_unchecked(p.x() + ox, p.y() + oy);
        if let Some(cell) = grid_cell(e, h, w) {
            voter_cell[idx] = cell;
            shifted.push((idx, e));
        }
    }
    let candidates = find_candidate_centers(&shifted, seediness, cfg);

    // Voters bucketed by grid cell (CSR) for bounded scans.
    let mut start = vec![0usize; n + 1];
    for &(idx, _) in &shifted {
        start[voter_cell[idx] + 1] += 1;
    }
    for i in 0..n {
        start[i + 1] += start[i];
    }
    let mut fill = start.clone();
    let mut bucket = vec![(0usize, NormalizedPoint::new_unchecked(0.0, 0.0)); shifted.len()];
    for &(idx, e) in &shifted {
        let cell = voter_cell[idx];
        bucket[fill[cell]] = (idx, e);
        fill[cell] += 1;
    }

    let level = (1.0 / cfg.kernel_accept_threshold).ln();
    let mut assigned = vec![0u32; n];
    let mut best_score = vec![0.0f64; n];
    let mut centers = BTreeMap::new();
    let mut scores = BTreeMap::new();
    let mut rejected = 0usize;
    let mut next_label = 1u32;
    let mut members: Vec<(usize, f64)> = Vec::new();

    for cand in &candidates {
        if assigned[cand.cell] != 0 {
            continue;
        }
        let anchor = if voter_cell[cand.cell] != usize::MAX {
            cand.cell
        } else {
            cand.founder
        };
        let p = pixel_position(anchor, h, w);
        let (ox, oy) = off.at(anchor);
        let (cx, cy) = (p.x() + ox, p.y() + oy);
        let (bx, by) = smooth.at(anchor);
        let [sx, sy] = scale_bandwidth([bx, by], cfg.w_s);
        let (rx, ry) = (
            contour_radius(sx, cfg.kernel_accept_threshold),
            contour_radius(sy, cfg.kernel_accept_threshold),
        );
        let span = |center: f64, radius: f64, len: usize| {
            let lo = ((center - radius) * len as f64).floor() - 1.0;
            let hi = ((center + radius) * len as f64).ceil() + 1.0;
            (lo.max(0.0) as usize, hi.min(len as f64 - 1.0).max(-1.0))
        };
        let (c0, c1) = span(cx, rx, w);
        let (r0, r1) = span(cy, ry, h);
        if c1 < 0.0 || r1 < 0.0 {
            continue;
        }
        let (c1, r1) = (c1 as usize, r1 as usize);

        members.clear();
        for r in r0..=r1 {
            for c in c0..=c1 {
                let cell = r * w + c;
                for &(idx, e) in &bucket[start[cell]..start[cell + 1]] {
                    let (dx, dy) = (cx - e.x(), cy - e.y());
                    if dx * dx / sx + dy * dy / sy >= level {
                        continue;
                    }
                    let d = kernel(dx, dy, sx, sy);
                    if d > cfg.kernel_accept_threshold {
                        members.push((idx, d));
                    }
                }
            }
        }
        if members.len() < cfg.min_mask_size {
            rejected += 1;
            continue;
        }
        let previously = members.iter().filter(|(i, _)| assigned[*i] != 0).count();
        if 2 * previously >= members.len() {
            continue;
        }
        let label = next_label;
        next_label += 1;
        for &(i, d) in &members {
            if assigned[i] == 0 || d > best_score[i] {
                assigned[i] = label;
                best_score[i] = d;
            }
        }
        centers.insert(label, NormalizedPoint::new_unchecked(cx, cy));
        scores.insert(label, cand.score);
    }

    // Reassignment can shrink earlier clusters below the minimum size.
    let mut sizes = vec![0usize; next_label as usize];
    for &l in &assigned {
        sizes[l as usize] += 1;
    }
    let mut remap = vec![0u32; next_label as usize];
    let mut k = 0u32;
    for l in 1..next_label as usize {
        if sizes[l] >= cfg.min_mask_size {
            k += 1;
            remap[l] = k;
        } else {
            if sizes[l] > 0 {
                rejected += 1;
            } else {
                // Fully absorbed by later clusters.
                log::debug!("cluster {l} lost all its pixels");
            }
            centers.remove(&(l as u32));
            scores.remove(&(l as u32));
        }
    }
    for l in assigned.iter_mut() {
        *l = remap[*l as usize];
    }
    let centers = centers
        .into_iter()
        .map(|(l, c)| (remap[l as usize], c))
        .collect();
    let scores = scores
        .into_iter()
        .map(|(l, s)| (remap[l as usize], s))
        .collect();

    Ok(ClusterOutcome {
        labels: LabelImage::new(h, w, assigned)?,
        centers,
        scores,
        rejected,
    })
}
