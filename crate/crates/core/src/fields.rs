//! Field containers shared by every stage.
//!
//! All fields are row-major. Two-channel fields store the x plane first and
//! the y plane second, each `height * width` long. Pixel `(row, col)` lives at
//! flat index `row * width + col`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Position in normalized image coordinates: `x = col / width`,
/// `y = row / height`.
///
/// Shifted points may leave `[0, 1]`; see [`NormalizedPoint::in_frame`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedPoint {
    x: f64,
    y: f64,
}

impl NormalizedPoint {
    pub fn new(x: f64, y: f64) -> Result<Self> {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::usage(format!("non-finite point ({x}, {y})")));
        }
        Ok(Self { x, y })
    }

    pub(crate) fn new_unchecked(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    /// True when the point lies inside the unit square `[0, 1)²`.
    pub fn in_frame(&self) -> bool {
        (0.0..1.0).contains(&self.x) && (0.0..1.0).contains(&self.y)
    }
}

fn check_range(name: &str, data: &[f64], lo: f64, hi: f64) -> Result<()> {
    if let Some((i, v)) = data
        .iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite() || **v < lo || **v > hi)
    {
        return Err(Error::usage(format!(
            "{name}: value {v} at flat index {i} outside [{lo}, {hi}]"
        )));
    }
    Ok(())
}

macro_rules! two_channel_field {
    ($name:ident, $lo:expr, $hi:expr) => {
        impl $name {
            /// Builds a field from planar data (`[x plane, y plane]`).
            pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
                if data.len() != 2 * height * width {
                    return Err(Error::shape(
                        format!("2x{height}x{width} = {}", 2 * height * width),
                        data.len(),
                    ));
                }
                check_range(stringify!($name), &data, $lo, $hi)?;
                Ok(Self {
                    height,
                    width,
                    data,
                })
            }

            pub(crate) fn from_raw(height: usize, width: usize, data: Vec<f64>) -> Self {
                debug_assert_eq!(data.len(), 2 * height * width);
                Self {
                    height,
                    width,
                    data,
                }
            }

            pub fn filled(height: usize, width: usize, x: f64, y: f64) -> Result<Self> {
                let n = height * width;
                let mut data = vec![x; 2 * n];
                data[n..].fill(y);
                Self::new(height, width, data)
            }

            pub fn height(&self) -> usize {
                self.height
            }

            pub fn width(&self) -> usize {
                self.width
            }

            pub fn len(&self) -> usize {
                self.height * self.width
            }

            pub fn is_empty(&self) -> bool {
                self.len() == 0
            }

            pub fn x(&self) -> &[f64] {
                &self.data[..self.len()]
            }

            pub fn y(&self) -> &[f64] {
                &self.data[self.len()..]
            }

            /// `(x, y)` at flat pixel index `idx`.
            #[inline]
            pub fn at(&self, idx: usize) -> (f64, f64) {
                (self.data[idx], self.data[self.len() + idx])
            }

            pub fn data(&self) -> &[f64] {
                &self.data
            }

            pub fn into_data(self) -> Vec<f64> {
                self.data
            }
        }
    };
}

/// Offset field (segmentation or tracking), normalized units, tanh range.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// Raw (sigmoid) clustering bandwidths in `[0, 1]`, before exponential scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthField {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

two_channel_field!(VectorField, -1.0, 1.0);
two_channel_field!(BandwidthField, 0.0, 1.0);

impl VectorField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::from_raw(height, width, vec![0.0; 2 * height * width])
    }
}

/// Single-channel map in `[0, 1]`, used for the seediness prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ScalarField {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!("{height}x{width}"), data.len()));
        }
        check_range("ScalarField", &data, 0.0, 1.0)?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        Self {
            height,
            width,
            data,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::from_raw(height, width, vec![0.0; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn into_values(self) -> Vec<f64> {
        self.data
    }
}

/// Instance label image. Label 0 is background; labels need not be contiguous.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelImage {
    height: usize,
    width: usize,
    labels: Vec<u32>,
}

impl LabelImage {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape(format!("{height}x{width}"), labels.len()));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u32] {
        &mut self.labels
    }

    pub fn into_labels(self) -> Vec<u32> {
        self.labels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }

    /// Flat pixel indices per positive label, ascending in both.
    pub fn instances(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut out: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            if l != 0 {
                out.entry(l).or_default().push(i);
            }
        }
        out
    }

    /// Sorted positive labels present in the image.
    pub fn label_ids(&self) -> Vec<u32> {
        self.instances().into_keys().collect()
    }

    /// Pixel counts per positive label.
    pub fn sizes(&self) -> BTreeMap<u32, usize> {
        let mut out = BTreeMap::new();
        for &l in &self.labels {
            if l != 0 {
                *out.entry(l).or_insert(0) += 1;
            }
        }
        out
    }

    /// Applies `map` to every positive label; unmapped labels become background.
    pub fn relabel(&self, map: &BTreeMap<u32, u32>) -> LabelImage {
        let labels = self
            .labels
            .iter()
            .map(|&l| if l == 0 { 0 } else { map.get(&l).copied().unwrap_or(0) })
            .collect();
        LabelImage {
            height: self.height,
            width: self.width,
            labels,
        }
    }
}

/// Segmentation predictions for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SegPrediction {
    pub offsets: VectorField,
    pub bandwidth: BandwidthField,
    pub seediness: ScalarField,
}

impl SegPrediction {
    pub fn new(offsets: VectorField, bandwidth: BandwidthField, seediness: ScalarField) -> Result<Self> {
        let s = Self {
            offsets,
            bandwidth,
            seediness,
        };
        s.check_shape()?;
        Ok(s)
    }

    pub fn height(&self) -> usize {
        self.offsets.height()
    }

    pub fn width(&self) -> usize {
        self.offsets.width()
    }

    fn check_shape(&self) -> Result<()> {
        let (h, w) = (self.offsets.height(), self.offsets.width());
        let shapes = [
            (self.bandwidth.height(), self.bandwidth.width()),
            (self.seediness.height(), self.seediness.width()),
        ];
        for (sh, sw) in shapes {
            if (sh, sw) != (h, w) {
                return Err(Error::shape(format!("{h}x{w}"), format!("{sh}x{sw}")));
            }
        }
        Ok(())
    }
}

/// Network output for one frame pair `(t, t-1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub seg_t: SegPrediction,
    pub seg_tm1: SegPrediction,
    /// Offsets from pixels at `t` to their cell centers at `t-1`.
    pub track: VectorField,
}

impl PredictionSet {
    pub fn new(seg_t: SegPrediction, seg_tm1: SegPrediction, track: VectorField) -> Result<Self> {
        seg_t.check_shape()?;
        seg_tm1.check_shape()?;
        let dims = (seg_t.height(), seg_t.width());
        for other in [(seg_tm1.height(), seg_tm1.width()), (track.height(), track.width())] {
            if other != dims {
                return Err(Error::shape(
                    format!("{}x{}", dims.0, dims.1),
                    format!("{}x{}", other.0, other.1),
                ));
            }
        }
        Ok(Self {
            seg_t,
            seg_tm1,
            track,
        })
    }

    pub fn height(&self) -> usize {
        self.seg_t.height()
    }

    pub fn width(&self) -> usize {
        self.seg_t.width()
    }
}
