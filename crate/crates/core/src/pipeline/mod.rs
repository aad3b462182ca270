//! Batch inference driver and external I/O.
//!
//! Per frame pair: read the prediction tensors, run every crop of the crop
//! plan through each TTA op, merge the augmentations per crop, stitch, then
//! cluster. Frame `t` is clustered from pair `(t, t-1)`, frame 0 from the
//! `t-1` slot of pair `(1, 0)`. The linker and all writes run in frame order.

pub mod config;
pub mod ctc;
pub mod normalize;
pub mod tensors;
pub mod tiling;
pub mod tta;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::clustering::{cluster_frame, min_mask_size_from_training, ClusterConfig};
use crate::error::{Error, Result};
use crate::fields::{LabelImage, PredictionSet, VectorField};
use crate::linker::{link_sequence, Lineage};
use crate::metrics::{aogm_scores, seg_score, AogmWeights, EvalReport};
use crate::oracle::{add_offset_noise, sequence_predictions, BandwidthRecipe, SynthSequence};
use crate::par;

pub use config::{PipelineConfig, WORKERS_ENV};
pub use normalize::percentile_normalize;
pub use tensors::{read_tensors, write_tensors, DType};
pub use tiling::{crop_prediction, plan_crops, stitch, CropPlan, Tile};
pub use tta::{tta_merge, SymmetryOp};

/// One request to the network: a square crop seen through `op`.
#[derive(Debug, Clone, Copy)]
pub struct CropInput<'a> {
    pub tile: Tile,
    pub crop: usize,
    pub op: SymmetryOp,
    /// Normalized, padded and transformed raw crops of frames `t` and
    /// `t-1`; empty when no raw images are available.
    pub image_t: &'a [f64],
    pub image_tm1: &'a [f64],
}

/// The network boundary. Outputs are in the transformed crop frame with
/// offsets in crop-normalized units.
pub trait CropPredictor: Sync {
    fn predict(&self, input: &CropInput<'_>) -> Result<PredictionSet>;
}

/// Serves crops of precomputed full-image predictions, as if a network had
/// produced them.
#[derive(Debug, Clone)]
pub struct ReplayPredictor {
    pub full: PredictionSet,
}

impl CropPredictor for ReplayPredictor {
    fn predict(&self, input: &CropInput<'_>) -> Result<PredictionSet> {
        Ok(input.op.apply(&crop_prediction(&self.full, &input.tile, input.crop)))
    }
}

/// Tiled, augmented inference of one frame pair.
pub fn infer_pair(
    predictor: &dyn CropPredictor,
    plan: &CropPlan,
    ops: &[SymmetryOp],
    images: Option<(&[f64], &[f64])>,
) -> Result<PredictionSet> {
    let (h, w, c) = (plan.image_height, plan.image_width, plan.crop);
    let mut merged = Vec::with_capacity(plan.tiles.len());
    for tile in &plan.tiles {
        let windows = images.map(|(a, b)| (tiling::crop_plane(a, h, w, tile, c), tiling::crop_plane(b, h, w, tile, c)));
        let mut outputs = Vec::with_capacity(ops.len());
        for &op in ops {
            let (it, itm1) = match &windows {
                Some((a, b)) => (op.remap(a, c, c), op.remap(b, c, c)),
                None => (Vec::new(), Vec::new()),
            };
            let input = CropInput {
                tile: *tile,
                crop: c,
                op,
                image_t: &it,
                image_tm1: &itm1,
            };
            let out = predictor.predict(&input)?;
            if (out.height(), out.width()) != (c, c) {
                return Err(Error::shape(format!("{c}x{c}"), format!("{}x{}", out.height(), out.width())));
            }
            outputs.push((op, out));
        }
        merged.push(tta_merge(&outputs)?);
    }
    stitch(&merged, plan)
}

/// Result of [`run_pipeline`].
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    pub lineage: Lineage,
    /// `None` when no ground truth was found.
    pub report: Option<EvalReport>,
    pub output: PathBuf,
}

/// Pair files `pairTTT.etk` for `t = 1..=N`, in order.
pub fn pair_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::NoInput(format!("prediction directory {} does not exist", dir.display())));
    }
    let files = ctc::indexed_files(dir, "pair", ".etk")?;
    if files.is_empty() {
        return Err(Error::NoInput(format!("no pairTTT.etk files in {}", dir.display())));
    }
    for (k, &t) in files.keys().enumerate() {
        if t != k + 1 {
            return Err(Error::format(dir, format!("pair file for t = {} is missing", k + 1)));
        }
    }
    Ok(files.into_values().collect())
}

fn training_min_mask_size(dir: &Path) -> Result<Option<usize>> {
    let files = ctc::indexed_files(dir, "man_seg", ".tif")?;
    let files = if files.is_empty() {
        ctc::indexed_files(dir, "man_track", ".tif")?
    } else {
        files
    };
    let paths: Vec<PathBuf> = files.into_values().collect();
    let sizes: Vec<Result<Vec<usize>>> =
        par::map(&paths, |p| Ok(ctc::read_mask(p)?.sizes().into_values().collect()));
    let mut all = Vec::new();
    for s in sizes {
        all.extend(s?);
    }
    Ok(min_mask_size_from_training(&all))
}

fn first_error<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(results.len());
    let mut first = None;
    for r in results {
        match r {
            Ok(v) => out.push(v),
            Err(e) => {
                log::error!("{e}");
                first.get_or_insert(e);
            }
        }
    }
    match first {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

struct PairResult {
    frame0: Option<LabelImage>,
    frame_t: LabelImage,
    track: VectorField,
}

fn load_image(path: &Path, dims: (usize, usize), low: f64, high: f64) -> Result<Vec<f64>> {
    let (h, w, v) = ctc::read_raw(path)?;
    if (h, w) != dims {
        return Err(Error::format(
            path,
            format!("image is {h}x{w} but predictions are {}x{}", dims.0, dims.1),
        ));
    }
    percentile_normalize(&v, low, high)
}

fn process_pair(
    t: usize,
    path: &Path,
    cfg: &PipelineConfig,
    cluster: &ClusterConfig,
    raw: &BTreeMap<usize, PathBuf>,
) -> Result<PairResult> {
    let full = read_tensors(path)?;
    let (h, w) = (full.height(), full.width());
    let images = match (raw.get(&t), raw.get(&(t - 1))) {
        (Some(a), Some(b)) => {
            let (lo, hi) = cfg.percentiles;
            Some((load_image(a, (h, w), lo, hi)?, load_image(b, (h, w), lo, hi)?))
        }
        _ => None,
    };
    let plan = plan_crops(h, w, cfg.crop_size, cfg.overlap())?;
    let predictor = ReplayPredictor { full };
    let pred = infer_pair(
        &predictor,
        &plan,
        &cfg.tta,
        images.as_ref().map(|(a, b)| (a.as_slice(), b.as_slice())),
    )?;
    let seg = |s: &crate::fields::SegPrediction| -> Result<LabelImage> {
        Ok(cluster_frame(&s.offsets, &s.bandwidth, &s.seediness, cluster)?.labels)
    };
    Ok(PairResult {
        frame0: if t == 1 { Some(seg(&pred.seg_tm1)?) } else { None },
        frame_t: seg(&pred.seg_t)?,
        track: pred.track,
    })
}

/// Runs the full pipeline and writes masks, the track file and a report to
/// `cfg.output`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    cfg.validate()?;
    par::with_workers(cfg.workers, || run_inner(cfg))
}

fn run_inner(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    let pairs = pair_files(&cfg.predictions)?;
    let dataset = match &cfg.dataset {
        Some(root) => Some(ctc::read_ctc_dataset(root, &cfg.sequence)?),
        None => None,
    };
    let mut cluster = cfg.cluster;
    if let Some(dir) = &cfg.training_masks {
        if let Some(m) = training_min_mask_size(dir)? {
            log::info!("min_mask_size {m} from training masks in {}", dir.display());
            cluster.min_mask_size = m;
        }
    }
    let empty = BTreeMap::new();
    let raw = dataset.as_ref().map_or(&empty, |d| &d.raw);
    let results = first_error(par::map_range(pairs.len(), |k| {
        process_pair(k + 1, &pairs[k], cfg, &cluster, raw)
    }))?;

    let mut frames = Vec::with_capacity(pairs.len() + 1);
    let mut tracks = Vec::with_capacity(pairs.len());
    for (k, r) in results.into_iter().enumerate() {
        if let Some(f0) = r.frame0 {
            frames.push(f0);
        }
        if (r.frame_t.height(), r.frame_t.width()) != (frames[0].height(), frames[0].width()) {
            return Err(Error::format(
                &pairs[k],
                format!(
                    "pair is {}x{} but pair 1 is {}x{}",
                    r.frame_t.height(),
                    r.frame_t.width(),
                    frames[0].height(),
                    frames[0].width()
                ),
            ));
        }
        frames.push(r.frame_t);
        tracks.push(r.track);
    }
    let lineage = link_sequence(&frames, &tracks)?;
    let report = match dataset.and_then(|d| d.gt) {
        Some(gt) => Some(evaluate_against(&gt, &lineage, &cfg.weights)?),
        None => {
            log::info!("no ground truth found, metrics skipped");
            None
        }
    };
    write_outputs(&cfg.output, &lineage, report.as_ref(), cfg.overlays)?;
    Ok(PipelineOutcome {
        lineage,
        report,
        output: cfg.output.clone(),
    })
}

/// Scores a predicted lineage. Frames without SEG ground truth are skipped
/// for SEG; when there is none at all the tracking masks stand in.
pub fn evaluate_against(gt: &ctc::GroundTruth, pred: &Lineage, weights: &AogmWeights) -> Result<EvalReport> {
    if gt.lineage.masks.len() != pred.masks.len() {
        return Err(Error::usage(format!(
            "ground truth has {} frames, prediction has {}",
            gt.lineage.masks.len(),
            pred.masks.len()
        )));
    }
    let (seg_gt, seg_pred): (Vec<LabelImage>, Vec<LabelImage>) = if gt.seg.is_empty() {
        log::warn!("no SEG ground truth, scoring SEG against the TRA masks");
        (gt.lineage.masks.clone(), pred.masks.clone())
    } else {
        let mut pairs = Vec::new();
        for (&t, m) in &gt.seg {
            let p = pred
                .masks
                .get(t)
                .ok_or_else(|| Error::usage(format!("SEG ground truth for frame {t} has no prediction")))?;
            pairs.push((m.clone(), p.clone()));
        }
        pairs.into_iter().unzip()
    };
    let seg = seg_score(&seg_gt, &seg_pred)?;
    let aogm = aogm_scores(&gt.lineage, pred, weights)?;
    Ok(EvalReport::new(seg, &aogm))
}

/// Text and JSON reports.
pub fn report_text(frames: usize, tracks: usize, report: Option<&EvalReport>) -> (String, String) {
    let mut kv = format!("frames={frames}\ntracks={tracks}\n");
    match report {
        Some(r) => {
            kv.push_str("metrics=computed\n");
            kv.push_str(&r.to_key_value());
        }
        None => kv.push_str("metrics=skipped\n"),
    }
    let json = serde_json::json!({
        "frames": frames,
        "tracks": tracks,
        "metrics": report,
    });
    let json = serde_json::to_string_pretty(&json).expect("report serializes") + "\n";
    (kv, json)
}

pub fn write_outputs(dir: &Path, lineage: &Lineage, report: Option<&EvalReport>, overlays: bool) -> Result<()> {
    ctc::write_ctc_result(dir, lineage)?;
    let (kv, json) = report_text(lineage.masks.len(), lineage.graph.tracks.len(), report);
    for (name, text) in [("report.txt", kv), ("report.json", json)] {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    if overlays {
        let digits = ctc::digits_for(lineage.masks.len());
        for (t, m) in lineage.masks.iter().enumerate() {
            ctc::write_overlay(&dir.join(ctc::frame_name("overlay", t, digits, ".png")), m)?;
        }
    }
    Ok(())
}

/// Links existing per-frame masks (`maskTTT.tif` in `masks`) with the
/// tracking offsets of the pair files in `predictions`.
pub fn track_masks(masks: &Path, predictions: &Path) -> Result<Lineage> {
    let files = ctc::indexed_files(masks, "mask", ".tif")?;
    if files.is_empty() {
        return Err(Error::NoInput(format!("no mask files in {}", masks.display())));
    }
    let paths: Vec<PathBuf> = files.into_values().collect();
    let frames = first_error(par::map(&paths, |p| ctc::read_mask(p)))?;
    let pairs = pair_files(predictions)?;
    if pairs.len() + 1 != frames.len() {
        return Err(Error::usage(format!(
            "{} masks need {} pair files, found {}",
            frames.len(),
            frames.len() - 1,
            pairs.len()
        )));
    }
    let offsets = first_error(par::map(&pairs, |p| read_tensors(p).map(|s| s.track)))?;
    link_sequence(&frames, &offsets)
}

/// Options for persisting a synthetic sequence as a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthExport {
    pub sequence: String,
    pub recipe: BandwidthRecipe,
    pub w_s: f64,
    /// Uniform offset noise amplitude added to segmentation offsets.
    pub noise: f64,
    pub dtype: DType,
}

impl Default for SynthExport {
    fn default() -> Self {
        Self {
            sequence: "01".into(),
            recipe: BandwidthRecipe::default(),
            w_s: crate::DEFAULT_BANDWIDTH_SCALE,
            noise: 0.0,
            dtype: DType::F64,
        }
    }
}

/// Writes the raw frames and ground truth under `root` and ideal pair
/// tensors under `predictions`.
pub fn export_synth(seq: &SynthSequence, root: &Path, predictions: &Path, opts: &SynthExport) -> Result<()> {
    ctc::write_ctc_dataset(root, &opts.sequence, &seq.images, &seq.lineage())?;
    std::fs::create_dir_all(predictions).map_err(|e| Error::io(predictions, e))?;
    let preds = sequence_predictions(seq, &opts.recipe, opts.w_s)?;
    let digits = ctc::digits_for(seq.labels.len());
    let written: Vec<Result<()>> = par::map_range(preds.len(), |k| {
        let mut p = preds[k].clone();
        if opts.noise > 0.0 {
            let seed = k as u64 * 2;
            p.seg_t.offsets = add_offset_noise(&p.seg_t.offsets, opts.noise, seed);
            p.seg_tm1.offsets = add_offset_noise(&p.seg_tm1.offsets, opts.noise, seed + 1);
        }
        let path = predictions.join(ctc::frame_name("pair", k + 1, digits, ".etk"));
        write_tensors(&path, &p, opts.dtype)
    });
    first_error(written).map(|_| ())
}
