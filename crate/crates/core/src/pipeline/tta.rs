//! Symmetry ops for test-time augmentation and the merge of their outputs.

use crate::error::{Error, Result};
use crate::fields::{BandwidthField, PredictionSet, ScalarField, SegPrediction, VectorField};

/// A dihedral symmetry of the pixel grid. Rotations are clockwise in image
/// coordinates (row axis pointing down).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SymmetryOp {
    Identity,
    FlipH,
    FlipV,
    Rot90,
    Rot180,
    Rot270,
}

impl SymmetryOp {
    pub const ALL: [SymmetryOp; 6] = [
        SymmetryOp::Identity,
        SymmetryOp::FlipH,
        SymmetryOp::FlipV,
        SymmetryOp::Rot90,
        SymmetryOp::Rot180,
        SymmetryOp::Rot270,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SymmetryOp::Identity => "identity",
            SymmetryOp::FlipH => "flip_h",
            SymmetryOp::FlipV => "flip_v",
            SymmetryOp::Rot90 => "rot90",
            SymmetryOp::Rot180 => "rot180",
            SymmetryOp::Rot270 => "rot270",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|op| op.name() == s.trim())
            .ok_or_else(|| Error::usage(format!("unknown TTA op {s:?}")))
    }

    /// Comma-separated list; `all` selects every op.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        if s.trim() == "all" {
            return Ok(Self::ALL.to_vec());
        }
        s.split(',').filter(|p| !p.trim().is_empty()).map(Self::parse).collect()
    }

    pub fn inverse(self) -> Self {
        match self {
            SymmetryOp::Rot90 => SymmetryOp::Rot270,
            SymmetryOp::Rot270 => SymmetryOp::Rot90,
            op => op,
        }
    }

    fn transposes(self) -> bool {
        matches!(self, SymmetryOp::Rot90 | SymmetryOp::Rot270)
    }

    /// Output dimensions for an `h x w` input.
    pub fn output_dims(self, h: usize, w: usize) -> (usize, usize) {
        if self.transposes() {
            (w, h)
        } else {
            (h, w)
        }
    }

    /// Destination of source pixel `(r, c)` of an `h x w` grid.
    pub fn map_pixel(self, r: usize, c: usize, h: usize, w: usize) -> (usize, usize) {
        match self {
            SymmetryOp::Identity => (r, c),
            SymmetryOp::FlipH => (r, w - 1 - c),
            SymmetryOp::FlipV => (h - 1 - r, c),
            SymmetryOp::Rot90 => (c, h - 1 - r),
            SymmetryOp::Rot180 => (h - 1 - r, w - 1 - c),
            SymmetryOp::Rot270 => (w - 1 - c, r),
        }
    }

    /// How a displacement `(x, y)` transforms.
    pub fn map_vector(self, x: f64, y: f64) -> (f64, f64) {
        match self {
            SymmetryOp::Identity => (x, y),
            SymmetryOp::FlipH => (-x, y),
            SymmetryOp::FlipV => (x, -y),
            SymmetryOp::Rot90 => (-y, x),
            SymmetryOp::Rot180 => (-x, -y),
            SymmetryOp::Rot270 => (y, -x),
        }
    }

    /// Remaps a row-major `h x w` grid of values.
    pub fn remap<T: Copy + Default>(self, data: &[T], h: usize, w: usize) -> Vec<T> {
        debug_assert_eq!(data.len(), h * w);
        let (_, w_out) = self.output_dims(h, w);
        let mut out = vec![T::default(); h * w];
        for r in 0..h {
            for c in 0..w {
                let (rr, cc) = self.map_pixel(r, c, h, w);
                out[rr * w_out + cc] = data[r * w + c];
            }
        }
        out
    }

    pub fn apply_scalar(self, f: &ScalarField) -> ScalarField {
        let (h, w) = self.output_dims(f.height(), f.width());
        ScalarField::from_raw(h, w, self.remap(f.values(), f.height(), f.width()))
    }

    pub fn apply_vector(self, f: &VectorField) -> VectorField {
        let (h0, w0) = (f.height(), f.width());
        let (h, w) = self.output_dims(h0, w0);
        let xs = self.remap(f.x(), h0, w0);
        let ys = self.remap(f.y(), h0, w0);
        let mut data = vec![0.0; 2 * h * w];
        let n = h * w;
        for i in 0..n {
            let (x, y) = self.map_vector(xs[i], ys[i]);
            data[i] = x;
            data[n + i] = y;
        }
        VectorField::from_raw(h, w, data)
    }

    pub fn apply_bandwidth(self, f: &BandwidthField) -> BandwidthField {
        let (h0, w0) = (f.height(), f.width());
        let (h, w) = self.output_dims(h0, w0);
        let (mut xs, mut ys) = (self.remap(f.x(), h0, w0), self.remap(f.y(), h0, w0));
        if self.transposes() {
            std::mem::swap(&mut xs, &mut ys);
        }
        xs.extend_from_slice(&ys);
        BandwidthField::from_raw(h, w, xs)
    }

    pub fn apply_seg(self, s: &SegPrediction) -> SegPrediction {
        SegPrediction {
            offsets: self.apply_vector(&s.offsets),
            bandwidth: self.apply_bandwidth(&s.bandwidth),
            seediness: self.apply_scalar(&s.seediness),
        }
    }

    /// Transforms every field of a prediction set.
    pub fn apply(self, p: &PredictionSet) -> PredictionSet {
        PredictionSet {
            seg_t: self.apply_seg(&p.seg_t),
            seg_tm1: self.apply_seg(&p.seg_tm1),
            track: self.apply_vector(&p.track),
        }
    }
}

/// Element-wise mean written as `a + sum(x - a) / n`, which is exact when
/// all inputs agree.
pub(crate) fn mean_of(slices: &[&[f64]]) -> Vec<f64> {
    let first = slices[0];
    let n = slices.len() as f64;
    (0..first.len())
        .map(|i| {
            let a = first[i];
            let dev: f64 = slices[1..].iter().map(|s| s[i] - a).sum();
            a + dev / n
        })
        .collect()
}

/// Maps each augmented output back to the canonical frame and averages.
pub fn tta_merge(outputs: &[(SymmetryOp, PredictionSet)]) -> Result<PredictionSet> {
    let canon: Vec<PredictionSet> = outputs.iter().map(|(op, p)| op.inverse().apply(p)).collect();
    let first = canon
        .first()
        .ok_or_else(|| Error::usage("tta_merge needs at least one output"))?;
    let (h, w) = (first.height(), first.width());
    for p in &canon[1..] {
        if (p.height(), p.width()) != (h, w) {
            return Err(Error::shape(format!("{h}x{w}"), format!("{}x{}", p.height(), p.width())));
        }
    }
    let seg = |pick: fn(&PredictionSet) -> &SegPrediction| SegPrediction {
        offsets: VectorField::from_raw(
            h,
            w,
            mean_of(&canon.iter().map(|p| pick(p).offsets.data()).collect::<Vec<_>>()),
        ),
        bandwidth: BandwidthField::from_raw(
            h,
            w,
            mean_of(&canon.iter().map(|p| pick(p).bandwidth.data()).collect::<Vec<_>>()),
        ),
        seediness: ScalarField::from_raw(
            h,
            w,
            mean_of(&canon.iter().map(|p| pick(p).seediness.values()).collect::<Vec<_>>()),
        ),
    };
    Ok(PredictionSet {
        seg_t: seg(|p| &p.seg_t),
        seg_tm1: seg(|p| &p.seg_tm1),
        track: VectorField::from_raw(
            h,
            w,
            mean_of(&canon.iter().map(|p| p.track.data()).collect::<Vec<_>>()),
        ),
    })
}
