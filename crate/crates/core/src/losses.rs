//! Training losses with hand-derived gradients.
//!
//! Every loss returns its value together with the gradient with respect to
//! the prediction tensors it consumes. Gradients are dense and share the
//! layout of the corresponding field (planar x/y for two-channel fields).
//!
//! Subgradient choices at non-differentiable points: a hinge error of
//! exactly zero contributes nothing, and equal hinge errors are ordered by
//! pixel index.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::fields::{BandwidthField, LabelImage, PredictionSet, ScalarField, SegPrediction, VectorField};
use crate::geometry::{kernel, medoid_of_indices, pixel_position, scale_bandwidth};
use crate::par;

/// Weights of the loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w_instance: f64,
    pub w_var: f64,
    pub w_seed: f64,
    pub w_fg: f64,
    pub w_seg: f64,
    pub w_track: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_instance: 1.0,
            w_var: 10.0,
            w_seed: 1.0,
            w_fg: 1.0,
            w_seg: 1.0,
            w_track: 1.0,
        }
    }
}

/// Unweighted loss terms. Segmentation terms are summed over both frames.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub var: f64,
    pub instance: f64,
    pub seed: f64,
    /// `w_instance * instance + w_var * var + w_seed * seed`.
    pub seg: f64,
    pub track: f64,
}

impl LossComponents {
    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("var", self.var),
            ("instance", self.instance),
            ("seed", self.seed),
            ("seg", self.seg),
            ("track", self.track),
        ]
    }
}

/// Gradients with respect to one frame's segmentation predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct SegGradients {
    pub offsets: Vec<f64>,
    pub bandwidth: Vec<f64>,
    pub seediness: Vec<f64>,
}

impl SegGradients {
    fn zeros(n: usize) -> Self {
        Self {
            offsets: vec![0.0; 2 * n],
            bandwidth: vec![0.0; 2 * n],
            seediness: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionGradients {
    pub seg_t: SegGradients,
    pub seg_tm1: SegGradients,
    pub track: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub components: LossComponents,
    pub gradients: PredictionGradients,
    /// Linked labels at `t` whose predecessor mask was missing at `t-1`.
    pub skipped_links: Vec<u32>,
}

/// A scalar loss and its gradient with respect to a single input.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Result of a kernel-based Lovász loss (instance or tracking).
#[derive(Debug, Clone, PartialEq)]
pub struct KernelLoss {
    pub value: f64,
    /// Contribution of every evaluated instance, keyed by label.
    pub per_instance: BTreeMap<u32, f64>,
    pub grad_offsets: Vec<f64>,
    pub grad_bandwidth: Vec<f64>,
    /// Labels that could not be evaluated (tracking only).
    pub skipped: Vec<u32>,
}

/// An instance mask with its medoid, both as flat pixel indices.
#[derive(Debug, Clone)]
pub(crate) struct Instance {
    pub label: u32,
    pub pixels: Vec<usize>,
    pub medoid: usize,
}

pub(crate) fn instances_of(labels: &LabelImage) -> Result<Vec<Instance>> {
    let groups: Vec<(u32, Vec<usize>)> = labels.instances().into_iter().collect();
    let width = labels.width();
    par::map(&groups, |(label, pixels)| {
        medoid_of_indices(pixels, width).map(|medoid| Instance {
            label: *label,
            pixels: pixels.clone(),
            medoid,
        })
    })
    .into_iter()
    .collect()
}

fn check_dims(what: &str, h: usize, w: usize, eh: usize, ew: usize) -> Result<()> {
    if (h, w) != (eh, ew) {
        return Err(Error::shape(format!("{what} {eh}x{ew}"), format!("{h}x{w}")));
    }
    Ok(())
}

/// Componentwise mean of the raw bandwidths over `mask_pixels`.
pub fn mean_bandwidth(bw: &BandwidthField, mask_pixels: &[usize]) -> Result<[f64; 2]> {
    if mask_pixels.is_empty() {
        return Err(Error::usage("mean bandwidth of an empty mask"));
    }
    if let Some(&i) = mask_pixels.iter().find(|&&i| i >= bw.len()) {
        return Err(Error::usage(format!("pixel index {i} outside field")));
    }
    Ok(mean_bandwidth_unchecked(bw, mask_pixels))
}

fn mean_bandwidth_unchecked(bw: &BandwidthField, pixels: &[usize]) -> [f64; 2] {
    let (mut sx, mut sy) = (0.0, 0.0);
    for &i in pixels {
        let (x, y) = bw.at(i);
        sx += x;
        sy += y;
    }
    let n = pixels.len() as f64;
    [sx / n, sy / n]
}

/// Per-instance bandwidth variance, summed over x and y, averaged over the
/// pixels of each instance and then over instances.
pub fn variance_loss(bw: &BandwidthField, labels: &LabelImage) -> Result<LossValue> {
    check_dims("labels", labels.height(), labels.width(), bw.height(), bw.width())?;
    let instances = labels.instances();
    let n = bw.len();
    let mut grad = vec![0.0; 2 * n];
    if instances.is_empty() {
        return Ok(LossValue { value: 0.0, grad });
    }
    let m = instances.len() as f64;
    let mut value = 0.0;
    for pixels in instances.values() {
        let mean = mean_bandwidth_unchecked(bw, pixels);
        let count = pixels.len() as f64;
        let mut acc = 0.0;
        for &k in pixels {
            let (x, y) = bw.at(k);
            let (dx, dy) = (x - mean[0], y - mean[1]);
            acc += dx * dx + dy * dy;
            // d/ds_k of (1/n) sum_j (mean - s_j)^2 reduces to 2 (s_k - mean) / n.
            grad[k] = 2.0 * dx / (count * m);
            grad[n + k] = 2.0 * dy / (count * m);
        }
        value += acc / count;
    }
    Ok(LossValue {
        value: value / m,
        grad,
    })
}

/// Lovász hinge for labels in `{-1, +1}`.
///
/// Hinge errors `max(0, 1 - y m)` are sorted in descending order and dotted
/// with the discrete derivative of the Jaccard loss along that order.
pub fn lovasz_hinge(margins: &[f64], labels: &[f64]) -> Result<LossValue> {
    if margins.is_empty() {
        return Err(Error::usage("Lovász hinge of an empty vector"));
    }
    if margins.len() != labels.len() {
        return Err(Error::shape(margins.len(), labels.len()));
    }
    let positive = labels
        .iter()
        .map(|&y| {
            if y == 1.0 {
                Ok(true)
            } else if y == -1.0 {
                Ok(false)
            } else {
                Err(Error::usage(format!("label {y} is not +1 or -1")))
            }
        })
        .collect::<Result<Vec<bool>>>()?;
    let (value, grad) = lovasz_hinge_bool(margins, &positive);
    Ok(LossValue { value, grad })
}

pub(crate) fn lovasz_hinge_bool(margins: &[f64], positive: &[bool]) -> (f64, Vec<f64>) {
    let n = margins.len();
    let sign = |i: usize| if positive[i] { 1.0 } else { -1.0 };
    let errors: Vec<f64> = (0..n).map(|i| 1.0 - sign(i) * margins[i]).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));

    let gts = positive.iter().filter(|&&p| p).count() as f64;
    let mut grad = vec![0.0; n];
    let (mut cum_pos, mut cum_neg) = (0.0, 0.0);
    let mut prev_jaccard = 0.0;
    let mut value = 0.0;
    for &i in &order {
        if positive[i] {
            cum_pos += 1.0;
        } else {
            cum_neg += 1.0;
        }
        let jaccard = 1.0 - (gts - cum_pos) / (gts + cum_neg);
        let weight = jaccard - prev_jaccard;
        prev_jaccard = jaccard;
        if errors[i] > 0.0 {
            value += errors[i] * weight;
            grad[i] = -sign(i) * weight;
        }
    }
    (value, grad)
}

/// Lovász hinge of `2 D - 1` against `2 B - 1`, where `D` is the kernel
/// between `center` and every shifted pixel and `B` marks `positives`.
///
/// Returns the loss, the dense offset gradient and the gradient with respect
/// to the mean raw bandwidth.
fn kernel_lovasz(
    offsets: &VectorField,
    center: usize,
    mean_bw: [f64; 2],
    positives: &[usize],
    w_s: f64,
) -> (f64, Vec<f64>, [f64; 2]) {
    let (h, w) = (offsets.height(), offsets.width());
    let n = h * w;
    let c = pixel_position(center, h, w);
    let [sx, sy] = scale_bandwidth(mean_bw, w_s);

    let mut dist = Vec::with_capacity(n);
    let mut dx = Vec::with_capacity(n);
    let mut dy = Vec::with_capacity(n);
    for i in 0..n {
        let p = pixel_position(i, h, w);
        let (ox, oy) = offsets.at(i);
        let (ex, ey) = (c.x() - (p.x() + ox), c.y() - (p.y() + oy));
        dx.push(ex);
        dy.push(ey);
        dist.push(kernel(ex, ey, sx, sy));
    }
    let mut positive = vec![false; n];
    for &k in positives {
        positive[k] = true;
    }
    let margins: Vec<f64> = dist.iter().map(|d| 2.0 * d - 1.0).collect();
    let (value, grad_margin) = lovasz_hinge_bool(&margins, &positive);

    let mut grad_off = vec![0.0; 2 * n];
    let (mut gsx, mut gsy) = (0.0, 0.0);
    for i in 0..n {
        let g = grad_margin[i];
        if g == 0.0 {
            continue;
        }
        let gd = 2.0 * g * dist[i];
        // e = p + o and the kernel depends on (c - e), hence the sign.
        grad_off[i] = gd * 2.0 * dx[i] / sx;
        grad_off[n + i] = gd * 2.0 * dy[i] / sy;
        gsx += gd * dx[i] * dx[i] / (sx * sx);
        gsy += gd * dy[i] * dy[i] / (sy * sy);
    }
    // ds/dmean = w_s * s.
    (value, grad_off, [gsx * w_s * sx, gsy * w_s * sy])
}

struct InstanceTerm {
    label: u32,
    value: f64,
    grad_off: Vec<f64>,
    grad_mean_bw: [f64; 2],
    bw_pixels: Vec<usize>,
}

fn accumulate(terms: Vec<InstanceTerm>, n: usize, skipped: Vec<u32>) -> KernelLoss {
    let mut out = KernelLoss {
        value: 0.0,
        per_instance: BTreeMap::new(),
        grad_offsets: vec![0.0; 2 * n],
        grad_bandwidth: vec![0.0; 2 * n],
        skipped,
    };
    for t in terms {
        out.value += t.value;
        out.per_instance.insert(t.label, t.value);
        for (g, a) in out.grad_offsets.iter_mut().zip(&t.grad_off) {
            *g += a;
        }
        let cnt = t.bw_pixels.len() as f64;
        for &k in &t.bw_pixels {
            out.grad_bandwidth[k] += t.grad_mean_bw[0] / cnt;
            out.grad_bandwidth[n + k] += t.grad_mean_bw[1] / cnt;
        }
    }
    out
}

pub(crate) fn instance_loss_with(
    off: &VectorField,
    bw: &BandwidthField,
    instances: &[Instance],
    w_s: f64,
) -> KernelLoss {
    let terms = par::map(instances, |inst| {
        let mean = mean_bandwidth_unchecked(bw, &inst.pixels);
        let (value, grad_off, grad_mean_bw) = kernel_lovasz(off, inst.medoid, mean, &inst.pixels, w_s);
        InstanceTerm {
            label: inst.label,
            value,
            grad_off,
            grad_mean_bw,
            bw_pixels: inst.pixels.clone(),
        }
    });
    accumulate(terms, off.len(), Vec::new())
}

/// Instance loss: one Lovász hinge per instance over the whole image, with
/// the instance medoid as center and its scaled mean bandwidth.
pub fn instance_loss(
    off: &VectorField,
    bw: &BandwidthField,
    labels: &LabelImage,
    w_s: f64,
) -> Result<KernelLoss> {
    check_dims("bandwidth", bw.height(), bw.width(), off.height(), off.width())?;
    check_dims("labels", labels.height(), labels.width(), off.height(), off.width())?;
    let instances = instances_of(labels)?;
    Ok(instance_loss_with(off, bw, &instances, w_s))
}

pub(crate) fn seed_loss_with(
    seediness: &ScalarField,
    off: &VectorField,
    bw: &BandwidthField,
    labels: &LabelImage,
    instances: &[Instance],
    w_fg: f64,
    w_s: f64,
) -> LossValue {
    let (h, w) = (off.height(), off.width());
    let d = seediness.values();
    let mut grad = vec![0.0; h * w];
    let mut value = 0.0;
    for inst in instances {
        let c = pixel_position(inst.medoid, h, w);
        let [sx, sy] = scale_bandwidth(mean_bandwidth_unchecked(bw, &inst.pixels), w_s);
        let cnt = inst.pixels.len() as f64;
        let mut acc = 0.0;
        for &k in &inst.pixels {
            let p = pixel_position(k, h, w);
            let (ox, oy) = off.at(k);
            // The kernel target is treated as a constant.
            let target = kernel(c.x() - p.x() - ox, c.y() - p.y() - oy, sx, sy);
            let r = target - d[k];
            acc += r * r;
            grad[k] = -2.0 * w_fg * r / cnt;
        }
        value += w_fg * acc / cnt;
    }
    let background: Vec<usize> = (0..h * w).filter(|&i| labels.labels()[i] == 0).collect();
    if !background.is_empty() {
        let cnt = background.len() as f64;
        let mut acc = 0.0;
        for &j in &background {
            acc += d[j] * d[j];
            grad[j] = 2.0 * d[j] / cnt;
        }
        value += acc / cnt;
    }
    LossValue { value, grad }
}

/// Seediness regression: kernel targets inside instances, zero on background.
/// The gradient is taken with respect to the seediness map only.
pub fn seed_loss(
    seediness: &ScalarField,
    off: &VectorField,
    bw: &BandwidthField,
    labels: &LabelImage,
    w_fg: f64,
    w_s: f64,
) -> Result<LossValue> {
    let (h, w) = (off.height(), off.width());
    check_dims("seediness", seediness.height(), seediness.width(), h, w)?;
    check_dims("bandwidth", bw.height(), bw.width(), h, w)?;
    check_dims("labels", labels.height(), labels.width(), h, w)?;
    let instances = instances_of(labels)?;
    Ok(seed_loss_with(seediness, off, bw, labels, &instances, w_fg, w_s))
}

pub(crate) fn tracking_loss_with(
    track_off: &VectorField,
    bw_t: &BandwidthField,
    instances_t: &[Instance],
    instances_tm1: &[Instance],
    links: &BTreeMap<u32, u32>,
    w_s: f64,
) -> KernelLoss {
    let predecessors: BTreeMap<u32, usize> =
        instances_tm1.iter().map(|i| (i.label, i.medoid)).collect();
    let mut jobs = Vec::new();
    let mut skipped = Vec::new();
    for inst in instances_t {
        let Some(prev) = links.get(&inst.label) else {
            continue;
        };
        match predecessors.get(prev) {
            Some(&center) => jobs.push((inst, center)),
            None => skipped.push(inst.label),
        }
    }
    if !skipped.is_empty() {
        log::warn!("tracking loss: no predecessor mask for labels {skipped:?}");
    }
    let terms = par::map(&jobs, |(inst, center)| {
        let mean = mean_bandwidth_unchecked(bw_t, &inst.pixels);
        let (value, grad_off, grad_mean_bw) =
            kernel_lovasz(track_off, *center, mean, &inst.pixels, w_s);
        InstanceTerm {
            label: inst.label,
            value,
            grad_off,
            grad_mean_bw,
            bw_pixels: inst.pixels.clone(),
        }
    });
    accumulate(terms, track_off.len(), skipped)
}

/// Tracking loss: pixels at `t` shifted by the tracking offsets are scored
/// against the medoid of the linked mask at `t-1`, using the bandwidth of
/// the instance at `t`.
///
/// `links` maps labels at `t` to labels at `t-1`. Instances without a link
/// are not evaluated; links to a missing mask are reported in `skipped`.
pub fn tracking_loss(
    track_off: &VectorField,
    bw_t: &BandwidthField,
    labels_t: &LabelImage,
    labels_tm1: &LabelImage,
    links: &BTreeMap<u32, u32>,
    w_s: f64,
) -> Result<KernelLoss> {
    let (h, w) = (track_off.height(), track_off.width());
    check_dims("bandwidth", bw_t.height(), bw_t.width(), h, w)?;
    check_dims("labels_t", labels_t.height(), labels_t.width(), h, w)?;
    check_dims("labels_tm1", labels_tm1.height(), labels_tm1.width(), h, w)?;
    let inst_t = instances_of(labels_t)?;
    let inst_tm1 = instances_of(labels_tm1)?;
    Ok(tracking_loss_with(track_off, bw_t, &inst_t, &inst_tm1, links, w_s))
}

struct FrameLoss {
    var: f64,
    instance: f64,
    seed: f64,
    grads: SegGradients,
}

fn frame_loss(
    seg: &SegPrediction,
    labels: &LabelImage,
    instances: &[Instance],
    weights: &LossWeights,
    w_s: f64,
) -> Result<FrameLoss> {
    let n = seg.height() * seg.width();
    let var = variance_loss(&seg.bandwidth, labels)?;
    let inst = instance_loss_with(&seg.offsets, &seg.bandwidth, instances, w_s);
    let seed = seed_loss_with(
        &seg.seediness,
        &seg.offsets,
        &seg.bandwidth,
        labels,
        instances,
        weights.w_fg,
        w_s,
    );
    let scale = weights.w_seg;
    let mut grads = SegGradients::zeros(n);
    for (g, (a, b)) in grads
        .bandwidth
        .iter_mut()
        .zip(var.grad.iter().zip(&inst.grad_bandwidth))
    {
        *g = scale * (weights.w_var * a + weights.w_instance * b);
    }
    for (g, a) in grads.offsets.iter_mut().zip(&inst.grad_offsets) {
        *g = scale * weights.w_instance * a;
    }
    for (g, a) in grads.seediness.iter_mut().zip(&seed.grad) {
        *g = scale * weights.w_seed * a;
    }
    Ok(FrameLoss {
        var: var.value,
        instance: inst.value,
        seed: seed.value,
        grads,
    })
}

/// Full pair loss: segmentation loss for both frames plus the tracking loss.
pub fn total_loss(
    pred: &PredictionSet,
    labels_t: &LabelImage,
    labels_tm1: &LabelImage,
    links: &BTreeMap<u32, u32>,
    weights: &LossWeights,
    w_s: f64,
) -> Result<LossReport> {
    let (h, w) = (pred.height(), pred.width());
    check_dims("labels_t", labels_t.height(), labels_t.width(), h, w)?;
    check_dims("labels_tm1", labels_tm1.height(), labels_tm1.width(), h, w)?;
    let inst_t = instances_of(labels_t)?;
    let inst_tm1 = instances_of(labels_tm1)?;

    let ft = frame_loss(&pred.seg_t, labels_t, &inst_t, weights, w_s)?;
    let ftm1 = frame_loss(&pred.seg_tm1, labels_tm1, &inst_tm1, weights, w_s)?;
    let track = tracking_loss_with(&pred.track, &pred.seg_t.bandwidth, &inst_t, &inst_tm1, links, w_s);

    let mut components = LossComponents {
        var: ft.var + ftm1.var,
        instance: ft.instance + ftm1.instance,
        seed: ft.seed + ftm1.seed,
        seg: 0.0,
        track: track.value,
    };
    components.seg = weights.w_instance * components.instance
        + weights.w_var * components.var
        + weights.w_seed * components.seed;
    let total = weights.w_seg * components.seg + weights.w_track * components.track;

    let mut seg_t = ft.grads;
    for (g, a) in seg_t.bandwidth.iter_mut().zip(&track.grad_bandwidth) {
        *g += weights.w_track * a;
    }
    let track_grad = track.grad_offsets.iter().map(|g| weights.w_track * g).collect();

    Ok(LossReport {
        total,
        components,
        gradients: PredictionGradients {
            seg_t,
            seg_tm1: ftm1.grads,
            track: track_grad,
        },
        skipped_links: track.skipped,
    })
}
