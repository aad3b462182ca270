//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use embedtrack::linker::{Lineage, Track, TrackGraph};
use embedtrack::{BandwidthField, LabelImage, ScalarField, VectorField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const W_S: f64 = -10.0;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- Lovász

/// Jaccard loss of the mistake set `a` (indices) given positives `p`.
pub fn jaccard_loss(a: &BTreeSet<usize>, positive: &[bool]) -> f64 {
    let p = positive.iter().filter(|&&x| x).count() as f64;
    let fn_ = a.iter().filter(|&&i| positive[i]).count() as f64;
    let fp = a.iter().filter(|&&i| !positive[i]).count() as f64;
    if p + fp == 0.0 {
        return 0.0;
    }
    1.0 - (p - fn_) / (p + fp)
}

/// Lovász extension of the Jaccard loss at `max(0, 1 - y m)`, evaluated as
/// the level-set integral `sum_j (v_j - v_{j+1}) * loss({x >= v_j})` over the
/// distinct positive values `v_1 > v_2 > ... > 0`.
pub fn brute_lovasz(margins: &[f64], positive: &[bool]) -> f64 {
    let x: Vec<f64> = margins
        .iter()
        .zip(positive)
        .map(|(&m, &p)| (1.0 - if p { m } else { -m }).max(0.0))
        .collect();
    let mut levels: Vec<f64> = x.iter().copied().filter(|&v| v > 0.0).collect();
    levels.sort_by(|a, b| b.total_cmp(a));
    levels.dedup();
    let mut total = 0.0;
    for (j, &v) in levels.iter().enumerate() {
        let next = levels.get(j + 1).copied().unwrap_or(0.0);
        let set: BTreeSet<usize> = (0..x.len()).filter(|&i| x[i] >= v).collect();
        total += (v - next) * jaccard_loss(&set, positive);
    }
    total
}

// ---------------------------------------------------------------- kernels

pub fn pos(i: usize, h: usize, w: usize) -> (f64, f64) {
    ((i % w) as f64 / w as f64, (i / w) as f64 / h as f64)
}

/// Brute-force medoid of flat indices, ties to the lowest (row, col).
pub fn medoid(pixels: &[usize], w: usize) -> usize {
    let mut best = (f64::INFINITY, usize::MAX);
    for &i in pixels {
        let (ri, ci) = ((i / w) as f64, (i % w) as f64);
        let s: f64 = pixels
            .iter()
            .map(|&j| {
                let (rj, cj) = ((j / w) as f64, (j % w) as f64);
                ((ri - rj).powi(2) + (ci - cj).powi(2)).sqrt()
            })
            .sum();
        let key = (i / w, i % w);
        let bkey = (best.1 / w.max(1), best.1 % w.max(1));
        if best.1 == usize::MAX || s < best.0 - 1e-9 || ((s - best.0).abs() <= 1e-9 && key < bkey) {
            best = (s, i);
        }
    }
    best.1
}

/// Hinge errors `1 - y (2 d - 1)` of one instance term, recomputed from
/// scratch: kernel between `center` and every shifted pixel.
pub fn instance_errors(
    off: &[f64],
    bw: &[f64],
    h: usize,
    w: usize,
    center: usize,
    bw_pixels: &[usize],
    positives: &[usize],
) -> Vec<f64> {
    let n = h * w;
    let mx: f64 = bw_pixels.iter().map(|&k| bw[k]).sum::<f64>() / bw_pixels.len() as f64;
    let my: f64 = bw_pixels.iter().map(|&k| bw[n + k]).sum::<f64>() / bw_pixels.len() as f64;
    let (sx, sy) = ((W_S * mx).exp(), (W_S * my).exp());
    let c = pos(center, h, w);
    let pset: BTreeSet<usize> = positives.iter().copied().collect();
    (0..n)
        .map(|i| {
            let p = pos(i, h, w);
            let ex = p.0 + off[i];
            let ey = p.1 + off[n + i];
            let d = (-(c.0 - ex).powi(2) / sx - (c.1 - ey).powi(2) / sy).exp();
            let y = if pset.contains(&i) { 1.0 } else { -1.0 };
            1.0 - y * (2.0 * d - 1.0)
        })
        .collect()
}

/// Descending order with index tie-break, plus the active (positive) set.
pub fn order_signature(errors: &[f64]) -> (Vec<usize>, Vec<bool>) {
    let mut order: Vec<usize> = (0..errors.len()).collect();
    order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));
    (order, errors.iter().map(|&e| e > 0.0).collect())
}

/// True when no two errors are closer than `gap` and none is within `gap`
/// of the hinge, so a perturbation of size below `gap` cannot reorder them.
pub fn well_separated(errors: &[f64], gap: f64) -> bool {
    let mut s = errors.to_vec();
    s.sort_by(f64::total_cmp);
    s.windows(2).all(|p| p[1] - p[0] > gap) && errors.iter().all(|e| e.abs() > gap)
}

// ---------------------------------------------------------------- fixtures

/// Random label image made of up to `k` axis-aligned rectangles.
pub fn random_labels(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize) -> LabelImage {
    let mut v = vec![0u32; h * w];
    for label in 1..=k as u32 {
        let rh = rng.gen_range(1..=h / 2);
        let rw = rng.gen_range(1..=w / 2);
        let r0 = rng.gen_range(0..=h - rh);
        let c0 = rng.gen_range(0..=w - rw);
        for r in r0..r0 + rh {
            for c in c0..c0 + rw {
                v[r * w + c] = label;
            }
        }
    }
    // Relabel to drop fully covered rectangles.
    LabelImage::new(h, w, v).unwrap()
}

pub fn random_offsets(rng: &mut ChaCha8Rng, h: usize, w: usize, amp: f64) -> VectorField {
    VectorField::new(h, w, (0..2 * h * w).map(|_| rng.gen_range(-amp..amp)).collect()).unwrap()
}

pub fn random_bandwidth(rng: &mut ChaCha8Rng, h: usize, w: usize, lo: f64, hi: f64) -> BandwidthField {
    BandwidthField::new(h, w, (0..2 * h * w).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

pub fn random_seediness(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ScalarField {
    ScalarField::new(h, w, (0..h * w).map(|_| rng.gen_range(0.05..0.95)).collect()).unwrap()
}

/// Unit random direction of length `n`.
pub fn direction(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn axpy(x: &[f64], a: f64, v: &[f64]) -> Vec<f64> {
    x.iter().zip(v).map(|(x, v)| x + a * v).collect()
}

/// `|fd - an| / max(|fd|, |an|)`.
pub fn rel_err(fd: f64, an: f64) -> f64 {
    let s = fd.abs().max(an.abs());
    if s == 0.0 {
        0.0
    } else {
        (fd - an).abs() / s
    }
}

// ---------------------------------------------------------------- AOGM

/// Builds a lineage from masks labelled by track id and a track list.
pub fn lineage(masks: Vec<LabelImage>, tracks: Vec<Track>) -> Lineage {
    let frame_labels = masks
        .iter()
        .map(|m| m.label_ids().into_iter().map(|l| (l, l)).collect())
        .collect();
    let graph = TrackGraph { tracks, frame_labels };
    graph.validate().unwrap();
    Lineage { graph, masks }
}

/// 1-row mask image from a string: digits are labels, `.` background.
pub fn row(s: &str) -> LabelImage {
    let v: Vec<u32> = s.chars().map(|c| c.to_digit(10).unwrap_or(0)).collect();
    LabelImage::new(1, v.len(), v).unwrap()
}

pub fn tr(id: u32, start: usize, end: usize, parent: u32) -> Track {
    Track { id, start, end, parent }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BruteCounts {
    pub ns: usize,
    pub fn_: usize,
    pub fp: usize,
    pub ed: usize,
    pub ea: usize,
    pub ec: usize,
    pub gt_vertices: usize,
    pub gt_edges: usize,
}

/// Edges `(frame, label) -> (frame, label)` with a parent-link flag,
/// enumerated from scratch: one per consecutive pair of frames a track is
/// present in, and one from each parent's last mask to its child's first.
type Vertex = (usize, u32);

fn edges(l: &Lineage) -> BTreeMap<(Vertex, Vertex), bool> {
    let mut out = BTreeMap::new();
    let present = |f: usize, id: u32| l.masks.get(f).is_some_and(|m| m.labels().contains(&id));
    for t in &l.graph.tracks {
        for f in t.start..t.end {
            if present(f, t.id) && present(f + 1, t.id) {
                out.insert(((f, t.id), (f + 1, t.id)), false);
            }
        }
        if t.parent != 0 {
            let p = l.graph.tracks.iter().find(|x| x.id == t.parent).unwrap();
            if present(p.end, p.id) && present(t.start, t.id) {
                out.insert(((p.end, p.id), (t.start, t.id)), true);
            }
        }
    }
    out
}

/// For one frame: gt label -> matched pred label, by pixel counting.
pub fn brute_match(gt: &LabelImage, pred: &LabelImage) -> BTreeMap<u32, u32> {
    let mut out = BTreeMap::new();
    for g in gt.label_ids() {
        let size = gt.labels().iter().filter(|&&x| x == g).count();
        let mut best: Option<(usize, u32)> = None;
        for p in pred.label_ids() {
            let inter = gt
                .labels()
                .iter()
                .zip(pred.labels())
                .filter(|&(&a, &b)| a == g && b == p)
                .count();
            if 2 * inter >= size && inter > 0 {
                let better = match best {
                    None => true,
                    Some((bi, _)) => inter > bi,
                };
                if better {
                    best = Some((inter, p));
                }
            }
        }
        if let Some((_, p)) = best {
            out.insert(g, p);
        }
    }
    out
}

pub fn brute_aogm(gt: &Lineage, pred: &Lineage) -> BruteCounts {
    let mut c = BruteCounts::default();
    // pred (frame, label) -> matched gt labels
    let mut pmap: BTreeMap<(usize, u32), Vec<u32>> = BTreeMap::new();
    for (f, (g, p)) in gt.masks.iter().zip(&pred.masks).enumerate() {
        let m = brute_match(g, p);
        c.gt_vertices += g.label_ids().len();
        c.fn_ += g.label_ids().len() - m.len();
        for l in p.label_ids() {
            pmap.insert((f, l), Vec::new());
        }
        for (gl, pl) in m {
            pmap.get_mut(&(f, pl)).unwrap().push(gl);
        }
    }
    for gs in pmap.values() {
        match gs.len() {
            0 => c.fp += 1,
            k => c.ns += k - 1,
        }
    }
    let ge = edges(gt);
    let pe = edges(pred);
    c.gt_edges = ge.len();
    let mut covered = BTreeSet::new();
    for (&((fa, a), (fb, b)), &plink) in &pe {
        let mut hit = false;
        for &ga in &pmap[&(fa, a)] {
            for &gb in &pmap[&(fb, b)] {
                if let Some(&glink) = ge.get(&((fa, ga), (fb, gb))) {
                    hit = true;
                    covered.insert(((fa, ga), (fb, gb)));
                    if glink != plink {
                        c.ec += 1;
                    }
                }
            }
        }
        if !hit {
            c.ed += 1;
        }
    }
    c.ea = ge.len() - covered.len();
    c
}

/// CTC default weights applied to brute counts: (DET, TRA).
pub fn brute_scores(c: &BruteCounts) -> (f64, f64) {
    let aogm_d = 5.0 * c.ns as f64 + 10.0 * c.fn_ as f64 + 1.0 * c.fp as f64;
    let aogm = aogm_d + 1.0 * c.ed as f64 + 1.5 * c.ea as f64 + 1.0 * c.ec as f64;
    let d0 = 10.0 * c.gt_vertices as f64;
    let t0 = d0 + 1.5 * c.gt_edges as f64;
    (1.0 - aogm_d.min(d0) / d0, 1.0 - aogm.min(t0) / t0)
}

/// Mean Jaccard of matched pairs over all ground truth masks.
pub fn brute_seg(gt: &[LabelImage], pred: &[LabelImage]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (g, p) in gt.iter().zip(pred) {
        let m = brute_match(g, p);
        for gl in g.label_ids() {
            n += 1;
            if let Some(&pl) = m.get(&gl) {
                let a = g.labels().iter().zip(p.labels());
                let inter = a.clone().filter(|&(&x, &y)| x == gl && y == pl).count();
                let union = a.filter(|&(&x, &y)| x == gl || y == pl).count();
                sum += inter as f64 / union as f64;
            }
        }
    }
    sum / n as f64
}

// ---------------------------------------------------------------- gradients

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, Default)]
pub struct GradStats {
    pub accepted: usize,
    /// Samples whose hinge order or active set changes within the step.
    pub rejected_ties: usize,
    /// Samples with a directional derivative below [`FLAT`], where central
    /// differences are dominated by round-off.
    pub rejected_flat: usize,
    pub max_rel: f64,
}

/// Round-off in a central difference is about `eps * |L| / h`, roughly
/// 1e-10 here; derivatives must clear that by four orders of magnitude.
pub const FLAT: f64 = 1e-6;

impl GradStats {
    fn record(&mut self, fd: f64, an: f64) {
        if an.abs() < FLAT {
            self.rejected_flat += 1;
            return;
        }
        self.accepted += 1;
        self.max_rel = self.max_rel.max(rel_err(fd, an));
    }
}

pub struct KernelFixture {
    pub h: usize,
    pub w: usize,
    pub labels_t: LabelImage,
    pub labels_tm1: LabelImage,
    pub links: BTreeMap<u32, u32>,
    pub off: VectorField,
    pub bw: BandwidthField,
}

pub fn kernel_fixture(r: &mut ChaCha8Rng) -> KernelFixture {
    let h = r.gen_range(5..9);
    let w = r.gen_range(5..9);
    let labels_t = { let k = r.gen_range(1..4); random_labels(r, h, w, k) };
    let labels_tm1 = { let k = r.gen_range(1..4); random_labels(r, h, w, k) };
    let prev = labels_tm1.label_ids();
    let links = labels_t
        .label_ids()
        .into_iter()
        .map(|l| (l, prev[r.gen_range(0..prev.len())]))
        .collect();
    KernelFixture {
        h,
        w,
        labels_t,
        labels_tm1,
        links,
        off: random_offsets(r, h, w, 0.15),
        bw: random_bandwidth(r, h, w, 0.15, 0.45),
    }
}

/// Terms `(center, bandwidth pixels, positives)` of a kernel Lovász loss.
pub type Terms = Vec<(usize, Vec<usize>, Vec<usize>)>;

fn signatures_stable(fx: &KernelFixture, terms: &Terms, off: &[f64], bw: &[f64], v: &[f64]) -> bool {
    let n2 = off.len();
    let sig = |s: f64| -> Vec<(Vec<usize>, Vec<bool>)> {
        let o = axpy(off, s, &v[..n2]);
        let b = axpy(bw, s, &v[n2..]);
        terms
            .iter()
            .map(|(c, bp, pos)| order_signature(&instance_errors(&o, &b, fx.h, fx.w, *c, bp, pos)))
            .collect()
    };
    let base = sig(0.0);
    base == sig(FD_STEP) && base == sig(-FD_STEP)
}

fn check_kernel_loss<F>(samples: usize, seed: u64, terms_of: fn(&KernelFixture) -> Terms, loss: F) -> GradStats
where
    F: Fn(&KernelFixture, &VectorField, &BandwidthField) -> (f64, Vec<f64>, Vec<f64>),
{
    let mut r = rng(seed);
    let mut st = GradStats::default();
    while st.accepted < samples {
        let fx = kernel_fixture(&mut r);
        let terms = terms_of(&fx);
        let n2 = 2 * fx.h * fx.w;
        let v = direction(&mut r, 2 * n2);
        if !signatures_stable(&fx, &terms, fx.off.data(), fx.bw.data(), &v) {
            st.rejected_ties += 1;
            continue;
        }
        let eval = |s: f64| {
            let o = VectorField::new(fx.h, fx.w, axpy(fx.off.data(), s, &v[..n2])).unwrap();
            let b = BandwidthField::new(fx.h, fx.w, axpy(fx.bw.data(), s, &v[n2..])).unwrap();
            loss(&fx, &o, &b)
        };
        let (_, go, gb) = eval(0.0);
        let an = dot(&go, &v[..n2]) + dot(&gb, &v[n2..]);
        let fd = (eval(FD_STEP).0 - eval(-FD_STEP).0) / (2.0 * FD_STEP);
        st.record(fd, an);
    }
    st
}

pub fn instance_terms(fx: &KernelFixture) -> Terms {
    fx.labels_t
        .instances()
        .into_values()
        .map(|px| (medoid(&px, fx.w), px.clone(), px))
        .collect()
}

pub fn tracking_terms(fx: &KernelFixture) -> Terms {
    let prev = fx.labels_tm1.instances();
    fx.labels_t
        .instances()
        .into_iter()
        .map(|(l, px)| (medoid(&prev[&fx.links[&l]], fx.w), px.clone(), px))
        .collect()
}

pub fn grad_check_instance(samples: usize, seed: u64) -> GradStats {
    check_kernel_loss(samples, seed, instance_terms, |fx, o, b| {
        let l = embedtrack::losses::instance_loss(o, b, &fx.labels_t, W_S).unwrap();
        (l.value, l.grad_offsets, l.grad_bandwidth)
    })
}

pub fn grad_check_tracking(samples: usize, seed: u64) -> GradStats {
    check_kernel_loss(samples, seed, tracking_terms, |fx, o, b| {
        let l = embedtrack::losses::tracking_loss(o, b, &fx.labels_t, &fx.labels_tm1, &fx.links, W_S).unwrap();
        (l.value, l.grad_offsets, l.grad_bandwidth)
    })
}

/// The variance loss is smooth, so no sample is rejected.
pub fn grad_check_variance(samples: usize, seed: u64) -> GradStats {
    let mut r = rng(seed);
    let mut st = GradStats::default();
    while st.accepted < samples {
        let (h, w) = (r.gen_range(3..9), r.gen_range(3..9));
        let labels = { let k = r.gen_range(1..4); random_labels(&mut r, h, w, k) };
        let bw = random_bandwidth(&mut r, h, w, 0.1, 0.9);
        let v = direction(&mut r, 2 * h * w);
        let eval = |s: f64| {
            let b = BandwidthField::new(h, w, axpy(bw.data(), s, &v)).unwrap();
            embedtrack::losses::variance_loss(&b, &labels).unwrap()
        };
        let an = dot(&eval(0.0).grad, &v);
        let fd = (eval(FD_STEP).value - eval(-FD_STEP).value) / (2.0 * FD_STEP);
        st.record(fd, an);
    }
    st
}

/// Seed loss, differentiated with respect to the seediness map (the kernel
/// target is a constant).
pub fn grad_check_seed(samples: usize, seed: u64) -> GradStats {
    let mut r = rng(seed);
    let mut st = GradStats::default();
    while st.accepted < samples {
        let (h, w) = (r.gen_range(3..9), r.gen_range(3..9));
        let labels = { let k = r.gen_range(1..4); random_labels(&mut r, h, w, k) };
        let off = random_offsets(&mut r, h, w, 0.2);
        let bw = random_bandwidth(&mut r, h, w, 0.1, 0.5);
        let seeds = random_seediness(&mut r, h, w);
        let w_fg = r.gen_range(0.5..2.0);
        let v = direction(&mut r, h * w);
        let eval = |s: f64| {
            let d = ScalarField::new(h, w, axpy(seeds.values(), s, &v)).unwrap();
            embedtrack::losses::seed_loss(&d, &off, &bw, &labels, w_fg, W_S).unwrap()
        };
        let an = dot(&eval(0.0).grad, &v);
        let fd = (eval(FD_STEP).value - eval(-FD_STEP).value) / (2.0 * FD_STEP);
        st.record(fd, an);
    }
    st
}

/// A hand-enumerated AOGM fixture with its expected counts
/// `[ns, fn, fp, ed, ea, ec]` and SEG.
pub struct HandCase {
    pub name: &'static str,
    pub gt: Lineage,
    pub pred: Lineage,
    pub counts: [usize; 6],
    pub seg: f64,
}

fn frames(rows: &[&str]) -> Vec<LabelImage> {
    rows.iter().map(|r| row(r)).collect()
}

pub fn hand_cases() -> Vec<HandCase> {
    let case = |name, gt: (&[&str], Vec<Track>), pred: (&[&str], Vec<Track>), counts, seg| HandCase {
        name,
        gt: lineage(frames(gt.0), gt.1),
        pred: lineage(frames(pred.0), pred.1),
        counts,
        seg,
    };
    vec![
        case(
            "perfect",
            (&["11022", "11022"], vec![tr(1, 0, 1, 0), tr(2, 0, 1, 0)]),
            (&["11022", "11022"], vec![tr(1, 0, 1, 0), tr(2, 0, 1, 0)]),
            [0, 0, 0, 0, 0, 0],
            1.0,
        ),
        case(
            "missed cell",
            (&["1102203300", "1102203300"], vec![tr(1, 0, 1, 0), tr(2, 0, 1, 0), tr(3, 0, 1, 0)]),
            (&["1102203300", "1102200000"], vec![tr(1, 0, 1, 0), tr(2, 0, 1, 0), tr(3, 0, 0, 0)]),
            [0, 1, 0, 0, 1, 0],
            5.0 / 6.0,
        ),
        case(
            "false positive",
            (&["1100000", "1100000"], vec![tr(1, 0, 1, 0)]),
            (&["1100000", "1100033"], vec![tr(1, 0, 1, 0), tr(3, 1, 1, 0)]),
            [0, 0, 1, 0, 0, 0],
            1.0,
        ),
        case(
            "merged cells",
            (&["1122", "1122"], vec![tr(1, 0, 1, 0), tr(2, 0, 1, 0)]),
            (&["1111", "1111"], vec![tr(1, 0, 1, 0)]),
            [2, 0, 0, 0, 0, 0],
            0.5,
        ),
        case(
            "missed division",
            (&["00110000", "22000033"], vec![tr(1, 0, 0, 0), tr(2, 1, 1, 1), tr(3, 1, 1, 1)]),
            (&["00110000", "11000033"], vec![tr(1, 0, 1, 0), tr(3, 1, 1, 0)]),
            [0, 0, 0, 0, 1, 1],
            1.0,
        ),
        case(
            "swapped identities",
            (&["1122", "1122"], vec![tr(1, 0, 1, 0), tr(2, 0, 1, 0)]),
            (&["1122", "2211"], vec![tr(1, 0, 1, 0), tr(2, 0, 1, 0)]),
            [0, 0, 0, 2, 2, 0],
            1.0,
        ),
        case(
            "undersized detection",
            (&["1111", "1111", "1111", "1111"], vec![tr(1, 0, 3, 0)]),
            (&["1111", "1000", "1110", "0111"], vec![tr(1, 0, 3, 0)]),
            [0, 1, 1, 2, 2, 0],
            (1.0 + 0.0 + 0.75 + 0.75) / 4.0,
        ),
        case(
            "empty prediction",
            (&["11", "11"], vec![tr(1, 0, 1, 0)]),
            (&["00", "00"], vec![]),
            [0, 2, 0, 0, 1, 0],
            0.0,
        ),
    ]
}

/// A random lineage on a 10-pixel strip (at most 4 tracks). Tracks sit in fixed two-pixel
/// slots when `slotted`, otherwise pixels are scattered among the live tracks.
pub fn random_lineage(r: &mut ChaCha8Rng, frames: usize, tracks: u32, slotted: bool) -> Lineage {
    let width = 10;
    let mut spans: Vec<Track> = Vec::new();
    for id in 1..=tracks {
        let start = r.gen_range(0..frames);
        let end = r.gen_range(start..frames);
        let parents: Vec<u32> = spans.iter().filter(|p| p.end < start).map(|p| p.id).collect();
        let parent = if !parents.is_empty() && r.gen_bool(0.5) {
            parents[r.gen_range(0..parents.len())]
        } else {
            0
        };
        spans.push(tr(id, start, end, parent));
    }
    let masks: Vec<LabelImage> = (0..frames)
        .map(|f| {
            let live: Vec<u32> = spans.iter().filter(|t| t.start <= f && f <= t.end).map(|t| t.id).collect();
            let v: Vec<u32> = (0..width)
                .map(|px| {
                    if slotted {
                        let id = (px / 2) as u32 + 1;
                        if live.contains(&id) && r.gen_bool(0.9) { id } else { 0 }
                    } else if live.is_empty() || r.gen_bool(0.2) {
                        0
                    } else {
                        live[r.gen_range(0..live.len())]
                    }
                })
                .collect();
            LabelImage::new(1, width, v).unwrap()
        })
        .collect();
    lineage(masks, spans)
}

/// Clusters every frame of a prediction sequence (frame 0 from the first
/// pair's `t-1` slot) and links the result.
pub fn cluster_and_link(
    preds: &[embedtrack::PredictionSet],
    cfg: &embedtrack::clustering::ClusterConfig,
) -> Lineage {
    use embedtrack::clustering::cluster_frame;
    let cluster = |s: &embedtrack::SegPrediction| cluster_frame(&s.offsets, &s.bandwidth, &s.seediness, cfg).unwrap().labels;
    let mut frames = vec![cluster(&preds[0].seg_tm1)];
    frames.extend(preds.iter().map(|p| cluster(&p.seg_t)));
    let tracks: Vec<VectorField> = preds.iter().map(|p| p.track.clone()).collect();
    embedtrack::linker::link_sequence(&frames, &tracks).unwrap()
}

/// True when `a` and `b` induce the same partition of the pixels, with
/// background mapped to background.
pub fn same_up_to_permutation(a: &LabelImage, b: &LabelImage) -> bool {
    let mut fwd = BTreeMap::new();
    let mut back = BTreeMap::new();
    a.labels().iter().zip(b.labels()).all(|(&x, &y)| {
        (x == 0) == (y == 0) && *fwd.entry(x).or_insert(y) == y && *back.entry(y).or_insert(x) == x
    })
}

/// Number of distinct clusters that cover pixels of each ground-truth label.
pub fn clusters_per_cell(gt: &LabelImage, pred: &LabelImage) -> BTreeMap<u32, usize> {
    let mut seen: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
    for (&g, &p) in gt.labels().iter().zip(pred.labels()) {
        if g != 0 && p != 0 {
            seen.entry(g).or_default().insert(p);
        }
    }
    seen.into_iter().map(|(g, s)| (g, s.len())).collect()
}

/// Two disks of radius 6 px, 15 px apart, in a 64x64 frame. Offsets only
/// pull each pixel halfway to its medoid, so the clustering outcome depends
/// on the bandwidth. Returns the labels and the ideal-bandwidth prediction.
pub fn two_cell_fixture() -> (LabelImage, embedtrack::SegPrediction) {
    use embedtrack::oracle::{ideal_segmentation, BandwidthRecipe};
    let (h, w) = (64, 64);
    let centers = [(32.0, 24.0), (32.0, 39.0)];
    let v = (0..h * w)
        .map(|i| {
            let (r, c) = ((i / w) as f64, (i % w) as f64);
            centers
                .iter()
                .position(|&(cr, cc)| (r - cr).powi(2) + (c - cc).powi(2) <= 36.0)
                .map_or(0, |k| k as u32 + 1)
        })
        .collect();
    let labels = LabelImage::new(h, w, v).unwrap();
    let mut s = ideal_segmentation(&labels, &BandwidthRecipe::default(), W_S).unwrap();
    let half: Vec<f64> = s.offsets.data().iter().map(|v| 0.5 * v).collect();
    s.offsets = VectorField::new(h, w, half).unwrap();
    let seeds = labels.labels().iter().map(|&l| if l == 0 { 0.0 } else { 1.0 }).collect();
    s.seediness = ScalarField::new(h, w, seeds).unwrap();
    (labels, s)
}

/// Cluster count and per-cell cluster counts of the two-cell fixture with
/// every bandwidth multiplied by `factor`.
pub fn two_cell_outcome(factor: f64) -> (usize, BTreeMap<u32, usize>) {
    use embedtrack::clustering::{cluster_frame, ClusterConfig};
    let (labels, s) = two_cell_fixture();
    let bw = embedtrack::oracle::rescale_bandwidth(&s.bandwidth, factor, W_S);
    let out = cluster_frame(&s.offsets, &bw, &s.seediness, &ClusterConfig::default()).unwrap();
    (out.labels.label_ids().len(), clusters_per_cell(&labels, &out.labels))
}

/// Three frames on a 1x16 strip: one cell in frames 0 and 1, then
/// `children` cells in frame 2 whose tracking offsets all point at it.
pub fn division_fixture(children: usize) -> Lineage {
    let w = 16;
    let parent = row("0000001111000000");
    let mut v = vec![0u32; w];
    let slots: [&[usize]; 3] = [&[0, 1], &[13, 14], &[6, 7, 8]];
    for (k, px) in slots.iter().take(children).enumerate() {
        for &p in px.iter() {
            v[p] = k as u32 + 1;
        }
    }
    let kids = LabelImage::new(1, w, v).unwrap();
    let links = (1..=children as u32).map(|k| (k, 1)).collect();
    let track = embedtrack::oracle::ideal_tracking(&kids, &parent, &links).unwrap();
    let stay = VectorField::zeros(1, w);
    embedtrack::linker::link_sequence(&[parent.clone(), parent, kids], &[stay, track]).unwrap()
}

/// A random prediction set with offsets small enough to survive crop
/// rescaling without clamping.
pub fn random_prediction(r: &mut ChaCha8Rng, h: usize, w: usize) -> embedtrack::PredictionSet {
    let mut seg = || {
        embedtrack::SegPrediction::new(
            random_offsets(r, h, w, 0.4),
            random_bandwidth(r, h, w, 0.0, 1.0),
            random_seediness(r, h, w),
        )
        .unwrap()
    };
    let (a, b) = (seg(), seg());
    embedtrack::PredictionSet::new(a, b, random_offsets(r, h, w, 0.4)).unwrap()
}

/// Tiled, fully augmented replay of a random `size`x`size` prediction.
/// Returns the input and the stitched result.
pub fn replay_round_trip(size: usize, crop: usize, seed: u64) -> (embedtrack::PredictionSet, embedtrack::PredictionSet) {
    use embedtrack::pipeline::{infer_pair, plan_crops, ReplayPredictor, SymmetryOp};
    let full = random_prediction(&mut rng(seed), size, size);
    let plan = plan_crops(size, size, crop, crop / 4).unwrap();
    let predictor = ReplayPredictor { full: full.clone() };
    let out = infer_pair(&predictor, &plan, &SymmetryOp::ALL, None).unwrap();
    (full, out)
}

/// Exports a small synthetic dataset under `root`, returning the dataset
/// and prediction directories.
pub fn small_dataset(root: &std::path::Path, frames: usize) -> (std::path::PathBuf, std::path::PathBuf) {
    use embedtrack::oracle::{generate_sequence, SynthConfig};
    use embedtrack::pipeline::{export_synth, SynthExport};
    let seq = generate_sequence(&SynthConfig {
        height: 96,
        width: 80,
        n_cells: 6,
        frames,
        division_probability: 0.1,
        max_cells: 10,
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    let (data, preds) = (root.join("data"), root.join("pred"));
    export_synth(&seq, &data, &preds, &SynthExport::default()).unwrap();
    (data, preds)
}

/// Every file in `dir` with its bytes.
pub fn dir_bytes(dir: &std::path::Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect()
}
