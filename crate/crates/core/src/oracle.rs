//! Synthetic ground truth and ideal predictions.
//!
//! [`generate_sequence`] random-walks non-overlapping elliptical cells that
//! may divide; [`ideal_predictions`] inverts the training targets so that
//! every cell pixel points exactly at its medoid (and, for tracking, at the
//! medoid of its predecessor). Running clustering and linking on these
//! tensors must reproduce the ground truth.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fields::{BandwidthField, LabelImage, PredictionSet, ScalarField, SegPrediction, VectorField};
use crate::geometry::{kernel, pixel_position, scale_bandwidth};
use crate::linker::{Lineage, Track, TrackGraph};
use crate::losses::instances_of;

/// How ideal bandwidths are chosen inside cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BandwidthRecipe {
    /// Per cell, `s = coverage * half_extent² / ln 2` per axis, so the
    /// `d = 0.5` ellipse around the medoid reaches the cell border when
    /// `coverage = 1`. Raw values are clamped to `[0, 1]`.
    CoverCell { coverage: f64 },
    /// The same raw bandwidth everywhere inside cells.
    Constant(f64),
}

impl Default for BandwidthRecipe {
    fn default() -> Self {
        BandwidthRecipe::CoverCell { coverage: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub n_cells: usize,
    pub frames: usize,
    /// Semi-axis range in pixels; the lower bound must be at least 3.
    pub radius: (f64, f64),
    /// Maximum displacement per axis and frame, in pixels.
    pub step: f64,
    /// Per cell and frame.
    pub division_probability: f64,
    pub max_cells: usize,
    /// Minimum number of background pixels between two cells.
    pub gap: f64,
    pub seed: u64,
    pub max_retries: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 256,
            width: 256,
            n_cells: 12,
            frames: 30,
            radius: (5.0, 9.0),
            step: 2.0,
            division_probability: 0.02,
            max_cells: 25,
            gap: 2.0,
            seed: 7,
            max_retries: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSequence {
    pub height: usize,
    pub width: usize,
    /// Raw 16-bit intensities per frame.
    pub images: Vec<Vec<u16>>,
    /// Masks labelled by track id.
    pub labels: Vec<LabelImage>,
    pub graph: TrackGraph,
}

impl SynthSequence {
    pub fn lineage(&self) -> Lineage {
        Lineage {
            graph: self.graph.clone(),
            masks: self.labels.clone(),
        }
    }

    pub fn divisions(&self) -> usize {
        let parents: std::collections::BTreeSet<u32> =
            self.graph.tracks.iter().filter(|t| t.parent != 0).map(|t| t.parent).collect();
        parents.len()
    }

    /// Links from labels at `t` to labels at `t - 1`.
    pub fn links(&self, t: usize) -> BTreeMap<u32, u32> {
        links_from_graph(&self.graph, t)
    }
}

/// Predecessor map for frame `t` (labels at `t` to labels at `t-1`) implied
/// by a track graph: continuations and division children.
pub fn links_from_graph(graph: &TrackGraph, t: usize) -> BTreeMap<u32, u32> {
    let mut out = BTreeMap::new();
    if t == 0 || t >= graph.frame_labels.len() {
        return out;
    }
    let (cur, prev) = (&graph.frame_labels[t], &graph.frame_labels[t - 1]);
    for (&id, &label) in cur {
        if let Some(&p) = prev.get(&id) {
            out.insert(label, p);
        } else if let Some(tr) = graph.track(id) {
            if tr.start == t && tr.parent != 0 {
                if let Some(&p) = prev.get(&tr.parent) {
                    out.insert(label, p);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    row: f64,
    col: f64,
    a: f64,
    b: f64,
    angle: f64,
    track: u32,
}

impl Cell {
    fn reach(&self) -> f64 {
        self.a.max(self.b)
    }
}

struct World<'a> {
    cfg: &'a SynthConfig,
}

impl World<'_> {
    fn inside(&self, c: &Cell) -> bool {
        let r = c.reach();
        c.row - r >= 1.0
            && c.col - r >= 1.0
            && c.row + r <= self.cfg.height as f64 - 2.0
            && c.col + r <= self.cfg.width as f64 - 2.0
    }

    fn clear(&self, c: &Cell, others: &[Cell]) -> bool {
        others.iter().all(|o| {
            let d = ((c.row - o.row).powi(2) + (c.col - o.col).powi(2)).sqrt();
            d >= c.reach() + o.reach() + self.cfg.gap + 1.0
        })
    }

    fn fits(&self, c: &Cell, others: &[Cell]) -> bool {
        self.inside(c) && self.clear(c, others)
    }
}

fn validate(cfg: &SynthConfig) -> Result<()> {
    if cfg.height == 0 || cfg.width == 0 || cfg.frames == 0 {
        return Err(Error::usage("synthetic sequence needs a non-empty frame and >= 1 frame"));
    }
    if cfg.radius.0 < 3.0 || cfg.radius.1 < cfg.radius.0 {
        return Err(Error::usage(format!(
            "radius range {:?} must satisfy 3 <= min <= max",
            cfg.radius
        )));
    }
    if !(0.0..=1.0).contains(&cfg.division_probability) {
        return Err(Error::usage("division probability must lie in [0, 1]"));
    }
    if cfg.max_cells < cfg.n_cells {
        return Err(Error::usage("max_cells is smaller than n_cells"));
    }
    Ok(())
}

fn rasterize(cells: &[Cell], h: usize, w: usize) -> LabelImage {
    let mut labels = vec![0u32; h * w];
    for c in cells {
        let reach = c.reach().ceil() as i64 + 1;
        let (cr, cc) = (c.row.round() as i64, c.col.round() as i64);
        let (sin, cos) = c.angle.sin_cos();
        for r in (cr - reach).max(0)..=(cr + reach).min(h as i64 - 1) {
            for col in (cc - reach).max(0)..=(cc + reach).min(w as i64 - 1) {
                let (dx, dy) = (col as f64 - c.col, r as f64 - c.row);
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                if (u / c.a).powi(2) + (v / c.b).powi(2) <= 1.0 {
                    labels[r as usize * w + col as usize] = c.track;
                }
            }
        }
    }
    LabelImage::new(h, w, labels).expect("raster matches frame size")
}

fn render(labels: &LabelImage, rng: &mut ChaCha8Rng) -> Vec<u16> {
    let (h, w) = (labels.height(), labels.width());
    let base: Vec<f64> = labels
        .labels()
        .iter()
        .map(|&l| if l == 0 { 100.0 } else { 500.0 })
        .collect();
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let mut sum = 0.0;
            let mut n = 0.0;
            for rr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
                for cc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                    sum += base[rr * w + cc];
                    n += 1.0;
                }
            }
            let noise: f64 = rng.gen_range(-20.0..20.0);
            out.push((sum / n + noise).round().clamp(0.0, 65535.0) as u16);
        }
    }
    out
}

/// Generates a deterministic synthetic sequence from `cfg.seed`.
pub fn generate_sequence(cfg: &SynthConfig) -> Result<SynthSequence> {
    validate(cfg)?;
    let world = World { cfg };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (h, w) = (cfg.height, cfg.width);
    let mut tracks: Vec<Track> = Vec::new();
    let mut next_id = 1u32;

    let random_cell = |rng: &mut ChaCha8Rng, track: u32| {
        let a = rng.gen_range(cfg.radius.0..=cfg.radius.1);
        let b = rng.gen_range(cfg.radius.0..=cfg.radius.1);
        Cell {
            row: rng.gen_range(0.0..h as f64),
            col: rng.gen_range(0.0..w as f64),
            a,
            b,
            angle: rng.gen_range(0.0..std::f64::consts::PI),
            track,
        }
    };

    let mut cells: Vec<Cell> = Vec::new();
    for _ in 0..cfg.n_cells {
        let mut placed = false;
        for _ in 0..cfg.max_retries.max(1) * 10 {
            let c = random_cell(&mut rng, next_id);
            if world.fits(&c, &cells) {
                cells.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::usage(format!(
                "could not place {} cells in a {h}x{w} frame",
                cfg.n_cells
            )));
        }
        tracks.push(Track {
            id: next_id,
            start: 0,
            end: 0,
            parent: 0,
        });
        next_id += 1;
    }

    let mut labels = vec![rasterize(&cells, h, w)];
    for f in 1..cfg.frames {
        let mut next: Vec<Cell> = Vec::with_capacity(cells.len());
        for i in 0..cells.len() {
            let cell = cells[i];
            // Not yet updated cells still block their old positions.
            let blocking = |next: &[Cell]| -> Vec<Cell> {
                next.iter().chain(cells[i + 1..].iter()).copied().collect()
            };
            let wants_division = rng.gen::<f64>() < cfg.division_probability
                && cells.len() - i - 1 + next.len() + 2 <= cfg.max_cells;
            if wants_division {
                if let Some((c1, c2)) = try_divide(&world, &cell, &blocking(&next), &mut rng, next_id) {
                    if let Some(t) = tracks.iter_mut().find(|t| t.id == cell.track) {
                        t.end = f - 1;
                    }
                    for c in [c1, c2] {
                        tracks.push(Track {
                            id: c.track,
                            start: f,
                            end: f,
                            parent: cell.track,
                        });
                        next.push(c);
                    }
                    next_id += 2;
                    continue;
                }
            }
            let others = blocking(&next);
            let mut moved = cell;
            for _ in 0..cfg.max_retries {
                let cand = Cell {
                    row: cell.row + rng.gen_range(-cfg.step..=cfg.step),
                    col: cell.col + rng.gen_range(-cfg.step..=cfg.step),
                    angle: cell.angle + rng.gen_range(-0.1..=0.1),
                    ..cell
                };
                if world.fits(&cand, &others) {
                    moved = cand;
                    break;
                }
            }
            if let Some(t) = tracks.iter_mut().find(|t| t.id == cell.track) {
                t.end = f;
            }
            next.push(moved);
        }
        cells = next;
        labels.push(rasterize(&cells, h, w));
    }

    let frame_labels = labels
        .iter()
        .map(|m| m.label_ids().into_iter().map(|l| (l, l)).collect())
        .collect();
    let graph = TrackGraph {
        tracks,
        frame_labels,
    };
    graph.validate()?;
    let images = labels.iter().map(|m| render(m, &mut rng)).collect();
    Ok(SynthSequence {
        height: h,
        width: w,
        images,
        labels,
        graph,
    })
}

fn try_divide(
    world: &World<'_>,
    parent: &Cell,
    others: &[Cell],
    rng: &mut ChaCha8Rng,
    first_id: u32,
) -> Option<(Cell, Cell)> {
    let min_r = world.cfg.radius.0;
    let a = (parent.a / std::f64::consts::SQRT_2).max(min_r);
    let b = (parent.b / std::f64::consts::SQRT_2).max(min_r);
    for _ in 0..world.cfg.max_retries.max(1) {
        let dir = rng.gen_range(0.0..std::f64::consts::TAU);
        let half = a.max(b) + world.cfg.gap / 2.0 + 0.5;
        let (dr, dc) = (half * dir.sin(), half * dir.cos());
        let child = |sign: f64, id: u32| Cell {
            row: parent.row + sign * dr,
            col: parent.col + sign * dc,
            a,
            b,
            angle: dir,
            track: id,
        };
        let (c1, c2) = (child(-1.0, first_id), child(1.0, first_id + 1));
        if world.fits(&c1, others) && world.fits(&c2, others) && world.clear(&c1, &[c2]) {
            return Some((c1, c2));
        }
    }
    None
}

fn instance_bandwidth(
    pixels: &[usize],
    medoid: usize,
    h: usize,
    w: usize,
    recipe: &BandwidthRecipe,
    w_s: f64,
) -> [f64; 2] {
    match *recipe {
        BandwidthRecipe::Constant(raw) => [raw, raw],
        BandwidthRecipe::CoverCell { coverage } => {
            let (mr, mc) = ((medoid / w) as f64, (medoid % w) as f64);
            let (mut ex, mut ey) = (1.0f64, 1.0f64);
            for &i in pixels {
                ex = ex.max(((i % w) as f64 - mc).abs());
                ey = ey.max(((i / w) as f64 - mr).abs());
            }
            let ln2 = std::f64::consts::LN_2;
            let sx = coverage * (ex / w as f64).powi(2) / ln2;
            let sy = coverage * (ey / h as f64).powi(2) / ln2;
            [(sx.ln() / w_s).clamp(0.0, 1.0), (sy.ln() / w_s).clamp(0.0, 1.0)]
        }
    }
}

/// Raw bandwidth used on background pixels of ideal predictions.
pub const BACKGROUND_BANDWIDTH: f64 = 0.5;

/// Ideal segmentation tensors for one labelled frame.
pub fn ideal_segmentation(labels: &LabelImage, recipe: &BandwidthRecipe, w_s: f64) -> Result<SegPrediction> {
    let (h, w) = (labels.height(), labels.width());
    let n = h * w;
    let mut off = vec![0.0; 2 * n];
    let mut bw = vec![BACKGROUND_BANDWIDTH; 2 * n];
    let mut seeds = vec![0.0; n];
    for inst in instances_of(labels)? {
        let c = pixel_position(inst.medoid, h, w);
        let raw = instance_bandwidth(&inst.pixels, inst.medoid, h, w, recipe, w_s);
        let [sx, sy] = scale_bandwidth(raw, w_s);
        for &i in &inst.pixels {
            let p = pixel_position(i, h, w);
            let (ox, oy) = (c.x() - p.x(), c.y() - p.y());
            off[i] = ox;
            off[n + i] = oy;
            bw[i] = raw[0];
            bw[n + i] = raw[1];
            seeds[i] = kernel(c.x() - (p.x() + ox), c.y() - (p.y() + oy), sx, sy);
        }
    }
    SegPrediction::new(
        VectorField::new(h, w, off)?,
        BandwidthField::new(h, w, bw)?,
        ScalarField::new(h, w, seeds)?,
    )
}

/// Tracking offsets pointing every linked pixel at `t` to the medoid of its
/// predecessor at `t-1`. Unlinked cells get zero offsets.
pub fn ideal_tracking(
    labels_t: &LabelImage,
    labels_tm1: &LabelImage,
    links: &BTreeMap<u32, u32>,
) -> Result<VectorField> {
    let (h, w) = (labels_t.height(), labels_t.width());
    let n = h * w;
    let medoids: BTreeMap<u32, usize> = instances_of(labels_tm1)?
        .into_iter()
        .map(|i| (i.label, i.medoid))
        .collect();
    let mut off = vec![0.0; 2 * n];
    for (label, pixels) in labels_t.instances() {
        let Some(m) = links.get(&label).and_then(|p| medoids.get(p)) else {
            continue;
        };
        let c = pixel_position(*m, h, w);
        for i in pixels {
            let p = pixel_position(i, h, w);
            off[i] = c.x() - p.x();
            off[n + i] = c.y() - p.y();
        }
    }
    VectorField::new(h, w, off)
}

/// Ideal prediction set for the pair `(t, t-1)`.
pub fn ideal_predictions(
    labels_t: &LabelImage,
    labels_tm1: &LabelImage,
    links: &BTreeMap<u32, u32>,
    recipe: &BandwidthRecipe,
    w_s: f64,
) -> Result<PredictionSet> {
    if (labels_t.height(), labels_t.width()) != (labels_tm1.height(), labels_tm1.width()) {
        return Err(Error::shape(
            format!("{}x{}", labels_t.height(), labels_t.width()),
            format!("{}x{}", labels_tm1.height(), labels_tm1.width()),
        ));
    }
    PredictionSet::new(
        ideal_segmentation(labels_t, recipe, w_s)?,
        ideal_segmentation(labels_tm1, recipe, w_s)?,
        ideal_tracking(labels_t, labels_tm1, links)?,
    )
}

/// Ideal predictions for every frame pair of a sequence (`result[t-1]` is
/// the pair `(t, t-1)`).
pub fn sequence_predictions(seq: &SynthSequence, recipe: &BandwidthRecipe, w_s: f64) -> Result<Vec<PredictionSet>> {
    crate::par::map_range(seq.labels.len().saturating_sub(1), |k| {
        let t = k + 1;
        ideal_predictions(&seq.labels[t], &seq.labels[t - 1], &seq.links(t), recipe, w_s)
    })
    .into_iter()
    .collect()
}

/// Adds i.i.d. uniform noise in `[-amplitude, amplitude]` to both offset
/// channels, clamped to the tanh range.
pub fn add_offset_noise(offsets: &VectorField, amplitude: f64, seed: u64) -> VectorField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = offsets
        .data()
        .iter()
        .map(|&v| {
            let noise = if amplitude > 0.0 {
                rng.gen_range(-amplitude..=amplitude)
            } else {
                0.0
            };
            (v + noise).clamp(-1.0, 1.0)
        })
        .collect();
    VectorField::from_raw(offsets.height(), offsets.width(), data)
}

/// Multiplies every scaled kernel bandwidth `exp(w_s * raw)` by `factor`,
/// i.e. shifts raw values by `ln(factor) / w_s`, clamped to `[0, 1]`.
pub fn rescale_bandwidth(bw: &BandwidthField, factor: f64, w_s: f64) -> BandwidthField {
    let shift = factor.ln() / w_s;
    let data = bw.data().iter().map(|&v| (v + shift).clamp(0.0, 1.0)).collect();
    BandwidthField::from_raw(bw.height(), bw.width(), data)
}
