//! Overlapping square crops and stitching of per-crop predictions.
//!
//! Crops are always `crop x crop`. Images smaller than the crop along an
//! axis are reflect-padded and the padding is dropped again on stitching.
//! Offsets inside a crop are in crop-normalized units (displacement in
//! pixels divided by `crop`); stitching converts them to image units.

use crate::error::{Error, Result};
use crate::fields::{BandwidthField, PredictionSet, ScalarField, SegPrediction, VectorField};

/// The part of the image a crop covers, anchored at `(row0, col0)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tile {
    pub row0: usize,
    pub col0: usize,
    /// Rows of the crop that lie inside the image.
    pub height: usize,
    /// Columns of the crop that lie inside the image.
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CropPlan {
    pub image_height: usize,
    pub image_width: usize,
    pub crop: usize,
    /// Row-major tile order.
    pub tiles: Vec<Tile>,
    /// Number of tiles covering each pixel.
    pub coverage: Vec<u32>,
}

fn starts(n: usize, crop: usize, step: usize) -> Vec<usize> {
    if n <= crop {
        return vec![0];
    }
    let mut out = Vec::new();
    let mut s = 0;
    while s + crop < n {
        out.push(s);
        s += step;
    }
    out.push(n - crop);
    out
}

/// Regular grid with step `crop - overlap`; the last tile on each axis is
/// snapped so that it ends at the image border.
pub fn plan_crops(h: usize, w: usize, crop: usize, overlap: usize) -> Result<CropPlan> {
    if h == 0 || w == 0 {
        return Err(Error::usage("cannot tile an empty image"));
    }
    if crop == 0 || overlap >= crop {
        return Err(Error::usage(format!(
            "need 0 <= overlap < crop, got crop {crop} and overlap {overlap}"
        )));
    }
    let step = crop - overlap;
    let mut tiles = Vec::new();
    let mut coverage = vec![0u32; h * w];
    for &row0 in &starts(h, crop, step) {
        for &col0 in &starts(w, crop, step) {
            let tile = Tile {
                row0,
                col0,
                height: crop.min(h),
                width: crop.min(w),
            };
            for r in row0..row0 + tile.height {
                for c in col0..col0 + tile.width {
                    coverage[r * w + c] += 1;
                }
            }
            tiles.push(tile);
        }
    }
    Ok(CropPlan {
        image_height: h,
        image_width: w,
        crop,
        tiles,
        coverage,
    })
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Cuts the `crop x crop` window of `tile` out of a row-major `h x w`
/// plane, reflecting beyond the image border.
pub fn crop_plane<T: Copy>(data: &[T], h: usize, w: usize, tile: &Tile, crop: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(crop * crop);
    for i in 0..crop {
        let r = reflect(tile.row0 + i, h);
        for j in 0..crop {
            out.push(data[r * w + reflect(tile.col0 + j, w)]);
        }
    }
    out
}

fn crop_vector(f: &VectorField, tile: &Tile, crop: usize, to_crop: bool) -> VectorField {
    let (h, w) = (f.height(), f.width());
    let (sx, sy) = if to_crop {
        (w as f64 / crop as f64, h as f64 / crop as f64)
    } else {
        (1.0, 1.0)
    };
    let mut data: Vec<f64> = crop_plane(f.x(), h, w, tile, crop).into_iter().map(|v| v * sx).collect();
    data.extend(crop_plane(f.y(), h, w, tile, crop).into_iter().map(|v| v * sy));
    VectorField::from_raw(crop, crop, data)
}

fn crop_seg(s: &SegPrediction, tile: &Tile, crop: usize) -> SegPrediction {
    let (h, w) = (s.height(), s.width());
    let bw = &s.bandwidth;
    let mut b = crop_plane(bw.x(), h, w, tile, crop);
    b.extend(crop_plane(bw.y(), h, w, tile, crop));
    SegPrediction {
        offsets: crop_vector(&s.offsets, tile, crop, true),
        bandwidth: BandwidthField::from_raw(crop, crop, b),
        seediness: ScalarField::from_raw(crop, crop, crop_plane(s.seediness.values(), h, w, tile, crop)),
    }
}

/// The crop of a full-image prediction, with offsets in crop units.
pub fn crop_prediction(full: &PredictionSet, tile: &Tile, crop: usize) -> PredictionSet {
    PredictionSet {
        seg_t: crop_seg(&full.seg_t, tile, crop),
        seg_tm1: crop_seg(&full.seg_tm1, tile, crop),
        track: crop_vector(&full.track, tile, crop, true),
    }
}

/// Accumulates one plane per tile into a per-pixel mean.
struct Plane {
    base: Vec<f64>,
    seen: Vec<bool>,
    dev: Vec<f64>,
}

impl Plane {
    fn new(n: usize) -> Self {
        Self {
            base: vec![0.0; n],
            seen: vec![false; n],
            dev: vec![0.0; n],
        }
    }

    fn add(&mut self, tile: &Tile, crop: usize, w: usize, values: &[f64], scale: f64) {
        for i in 0..tile.height {
            for j in 0..tile.width {
                let v = values[i * crop + j] * scale;
                let p = (tile.row0 + i) * w + tile.col0 + j;
                if self.seen[p] {
                    self.dev[p] += v - self.base[p];
                } else {
                    self.seen[p] = true;
                    self.base[p] = v;
                }
            }
        }
    }

    fn finish(self, coverage: &[u32]) -> Vec<f64> {
        self.base
            .iter()
            .zip(&self.dev)
            .zip(coverage)
            .map(|((&b, &d), &n)| b + d / n as f64)
            .collect()
    }
}

/// Per-pixel mean of canonical crop predictions over all covering tiles,
/// with offsets converted from crop to image units.
pub fn stitch(crops: &[PredictionSet], plan: &CropPlan) -> Result<PredictionSet> {
    if crops.len() != plan.tiles.len() {
        return Err(Error::usage(format!(
            "{} tiles planned but {} crop predictions given",
            plan.tiles.len(),
            crops.len()
        )));
    }
    let c = plan.crop;
    for p in crops {
        if (p.height(), p.width()) != (c, c) {
            return Err(Error::shape(format!("{c}x{c}"), format!("{}x{}", p.height(), p.width())));
        }
    }
    if let Some(gap) = plan.coverage.iter().position(|&n| n == 0) {
        return Err(Error::Internal(format!("crop plan leaves pixel {gap} uncovered")));
    }
    let (h, w) = (plan.image_height, plan.image_width);
    let n = h * w;
    let cn = c * c;
    let (sx, sy) = (c as f64 / w as f64, c as f64 / h as f64);
    // Planes: for each slot, offsets x/y, bandwidth x/y, seediness; then track x/y.
    let mut planes: Vec<Plane> = (0..12).map(|_| Plane::new(n)).collect();
    for (tile, p) in plan.tiles.iter().zip(crops) {
        for (k, s) in [&p.seg_t, &p.seg_tm1].into_iter().enumerate() {
            let o = s.offsets.data();
            let b = s.bandwidth.data();
            planes[5 * k].add(tile, c, w, &o[..cn], sx);
            planes[5 * k + 1].add(tile, c, w, &o[cn..], sy);
            planes[5 * k + 2].add(tile, c, w, &b[..cn], 1.0);
            planes[5 * k + 3].add(tile, c, w, &b[cn..], 1.0);
            planes[5 * k + 4].add(tile, c, w, s.seediness.values(), 1.0);
        }
        let t = p.track.data();
        planes[10].add(tile, c, w, &t[..cn], sx);
        planes[11].add(tile, c, w, &t[cn..], sy);
    }
    let mut out: Vec<Vec<f64>> = planes.into_iter().map(|pl| pl.finish(&plan.coverage)).collect();
    let mut take_pair = |a: usize, clamp: bool| {
        let mut v = std::mem::take(&mut out[a]);
        v.extend_from_slice(&out[a + 1]);
        if clamp {
            v.iter_mut().for_each(|x| *x = x.clamp(-1.0, 1.0));
        }
        v
    };
    let seg_t_off = take_pair(0, true);
    let seg_t_bw = take_pair(2, false);
    let seg_tm1_off = take_pair(5, true);
    let seg_tm1_bw = take_pair(7, false);
    let track = take_pair(10, true);
    Ok(PredictionSet {
        seg_t: SegPrediction {
            offsets: VectorField::from_raw(h, w, seg_t_off),
            bandwidth: BandwidthField::from_raw(h, w, seg_t_bw),
            seediness: ScalarField::from_raw(h, w, std::mem::take(&mut out[4])),
        },
        seg_tm1: SegPrediction {
            offsets: VectorField::from_raw(h, w, seg_tm1_off),
            bandwidth: BandwidthField::from_raw(h, w, seg_tm1_bw),
            seediness: ScalarField::from_raw(h, w, std::mem::take(&mut out[9])),
        },
        track: VectorField::from_raw(h, w, track),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{ideal_predictions, BandwidthRecipe};
    use crate::LabelImage;

    fn starts_of(plan: &CropPlan) -> (Vec<usize>, Vec<usize>) {
        let mut rows: Vec<usize> = plan.tiles.iter().map(|t| t.row0).collect();
        let mut cols: Vec<usize> = plan.tiles.iter().map(|t| t.col0).collect();
        rows.dedup();
        cols.sort_unstable();
        cols.dedup();
        (rows, cols)
    }

    #[test]
    fn single_tile_for_matching_size() {
        let plan = plan_crops(256, 256, 256, 64).unwrap();
        assert_eq!(plan.tiles.len(), 1);
        assert!(plan.coverage.iter().all(|&n| n == 1));
    }

    #[test]
    fn grid_512_with_overlap_64() {
        let plan = plan_crops(512, 512, 256, 64).unwrap();
        let (rows, cols) = starts_of(&plan);
        assert_eq!(rows, vec![0, 192, 256]);
        assert_eq!(cols, vec![0, 192, 256]);
        assert!(plan.coverage.iter().all(|&n| n >= 1));
    }

    #[test]
    fn last_row_tile_snaps_to_border() {
        let plan = plan_crops(300, 256, 256, 64).unwrap();
        let (rows, cols) = starts_of(&plan);
        assert_eq!(rows, vec![0, 44]);
        assert_eq!(cols, vec![0]);
    }

    #[test]
    fn small_images_are_padded() {
        let plan = plan_crops(10, 300, 16, 4).unwrap();
        assert!(plan.tiles.iter().all(|t| t.height == 10 && t.width == 16));
        let data: Vec<u32> = (0..10 * 300).collect();
        let window = crop_plane(&data, 10, 300, &plan.tiles[0], 16);
        // Row 10 mirrors row 8.
        assert_eq!(window[10 * 16], data[8 * 300]);
        assert_eq!(reflect(5, 1), 0);
    }

    fn sample(h: usize, w: usize) -> PredictionSet {
        let mut v = vec![0u32; h * w];
        for r in 3..9 {
            for c in 4..12 {
                v[r * w + c] = 1;
            }
        }
        for r in 14..h - 2 {
            for c in w - 9..w - 3 {
                v[r * w + c] = 2;
            }
        }
        let l = LabelImage::new(h, w, v).unwrap();
        let links = std::collections::BTreeMap::from([(1, 1), (2, 2)]);
        ideal_predictions(&l, &l, &links, &BandwidthRecipe::default(), -10.0).unwrap()
    }

    #[test]
    fn stitching_crops_of_one_prediction_is_identity() {
        // Crop 16 on a 32x32 image: unit conversions are by powers of two.
        let full = sample(32, 32);
        let plan = plan_crops(32, 32, 16, 6).unwrap();
        let crops: Vec<_> = plan.tiles.iter().map(|t| crop_prediction(&full, t, 16)).collect();
        assert_eq!(stitch(&crops, &plan).unwrap(), full);
    }

    #[test]
    fn stitching_pads_and_unpads() {
        let full = sample(20, 24);
        let plan = plan_crops(20, 24, 32, 8).unwrap();
        let crops: Vec<_> = plan.tiles.iter().map(|t| crop_prediction(&full, t, 32)).collect();
        let out = stitch(&crops, &plan).unwrap();
        for (a, b) in out.track.data().iter().zip(full.track.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(out.seg_t.seediness, full.seg_t.seediness);
    }

    #[test]
    fn disagreeing_tiles_average() {
        let plan = plan_crops(1, 6, 4, 2).unwrap();
        assert_eq!(plan.tiles.len(), 2);
        let tile = |s: f64| {
            let seg = SegPrediction {
                offsets: VectorField::zeros(4, 4),
                bandwidth: BandwidthField::filled(4, 4, 0.5, 0.5).unwrap(),
                seediness: ScalarField::new(4, 4, vec![s; 16]).unwrap(),
            };
            PredictionSet::new(seg.clone(), seg, VectorField::zeros(4, 4)).unwrap()
        };
        let out = stitch(&[tile(0.2), tile(0.0)], &plan).unwrap();
        let s = out.seg_t.seediness.values();
        assert_eq!(&s[..2], &[0.2, 0.2]);
        assert!((s[2] - 0.1).abs() < 1e-15 && (s[3] - 0.1).abs() < 1e-15);
        assert_eq!(&s[4..], &[0.0, 0.0]);
    }

    #[test]
    fn stitch_rejects_wrong_inputs() {
        let plan = plan_crops(8, 8, 8, 2).unwrap();
        assert!(stitch(&[], &plan).is_err());
        let wrong = sample(20, 24);
        assert!(stitch(&[wrong], &plan).is_err());
    }
}
