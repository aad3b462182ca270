//! Segmentation and tracking evaluation.
//!
//! Detection rule shared by every score: a predicted mask `p` matches a
//! ground-truth mask `g` of the same frame when `|p ∩ g| >= |g| / 2`. If
//! several predictions qualify for one `g` (possible only at exactly one
//! half each), the one with the larger overlap wins, then the lower label.
//!
//! DET and TRA follow the acyclic oriented graph matching (AOGM) cost:
//!
//! ```text
//! AOGM_D = w_ns * NS + w_fn * FN + w_fp * FP
//! AOGM   = AOGM_D + w_ed * ED + w_ea * EA + w_ec * EC
//! DET    = 1 - min(AOGM_D, w_fn |V|) / (w_fn |V|)
//! TRA    = 1 - min(AOGM, w_fn |V| + w_ea |E|) / (w_fn |V| + w_ea |E|)
//! ```
//!
//! where `V` and `E` are the ground-truth vertices and edges, NS counts the
//! extra ground-truth masks covered by one prediction, FN/FP are unmatched
//! ground-truth/predicted masks, ED counts predicted edges with no
//! ground-truth counterpart (including edges touching false positives), EA
//! ground-truth edges not produced, and EC produced edges whose kind
//! (continuation vs parent link) differs.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::LabelImage;
use crate::linker::{Lineage, TrackGraph};
use crate::par;

/// AOGM penalty weights. Defaults are the Cell Tracking Challenge's values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AogmWeights {
    pub w_ns: f64,
    pub w_fn: f64,
    pub w_fp: f64,
    pub w_ed: f64,
    pub w_ea: f64,
    pub w_ec: f64,
}

impl Default for AogmWeights {
    fn default() -> Self {
        Self {
            w_ns: 5.0,
            w_fn: 10.0,
            w_fp: 1.0,
            w_ed: 1.0,
            w_ea: 1.5,
            w_ec: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub splits_needed: usize,
    pub false_negatives: usize,
    pub false_positives: usize,
    pub redundant_edges: usize,
    pub missing_edges: usize,
    pub wrong_semantic_edges: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AogmResult {
    pub det: f64,
    pub tra: f64,
    pub counts: ErrorCounts,
    pub aogm_d: f64,
    pub aogm: f64,
    pub aogm_d0: f64,
    pub aogm0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seg: f64,
    pub det: f64,
    pub tra: f64,
    /// Mean of SEG and TRA.
    pub op_ctb: f64,
    pub counts: ErrorCounts,
}

impl EvalReport {
    pub fn new(seg: f64, aogm: &AogmResult) -> Self {
        Self {
            seg,
            det: aogm.det,
            tra: aogm.tra,
            op_ctb: (seg + aogm.tra) / 2.0,
            counts: aogm.counts,
        }
    }

    /// `key=value` lines, one per score and error count.
    pub fn to_key_value(&self) -> String {
        let c = &self.counts;
        format!(
            "seg={:.9}\ndet={:.9}\ntra={:.9}\nop_ctb={:.9}\nsplits_needed={}\nfalse_negatives={}\n\
             false_positives={}\nredundant_edges={}\nmissing_edges={}\nwrong_semantic_edges={}\n",
            self.seg,
            self.det,
            self.tra,
            self.op_ctb,
            c.splits_needed,
            c.false_negatives,
            c.false_positives,
            c.redundant_edges,
            c.missing_edges,
            c.wrong_semantic_edges
        )
    }
}

/// Per-frame detection matching.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameMatch {
    /// Ground-truth label -> (predicted label, overlap).
    pub gt_to_pred: BTreeMap<u32, (u32, usize)>,
    /// Predicted label -> matched ground-truth labels.
    pub pred_to_gt: BTreeMap<u32, Vec<u32>>,
    pub gt_sizes: BTreeMap<u32, usize>,
    pub pred_sizes: BTreeMap<u32, usize>,
}

pub fn match_frame(gt: &LabelImage, pred: &LabelImage) -> Result<FrameMatch> {
    if (gt.height(), gt.width()) != (pred.height(), pred.width()) {
        return Err(Error::shape(
            format!("{}x{}", gt.height(), gt.width()),
            format!("{}x{}", pred.height(), pred.width()),
        ));
    }
    let mut overlap: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for (&g, &p) in gt.labels().iter().zip(pred.labels()) {
        if g != 0 && p != 0 {
            *overlap.entry((g, p)).or_insert(0) += 1;
        }
    }
    let gt_sizes = gt.sizes();
    let pred_sizes = pred.sizes();
    let mut gt_to_pred: BTreeMap<u32, (u32, usize)> = BTreeMap::new();
    for (&(g, p), &n) in &overlap {
        if 2 * n < gt_sizes[&g] {
            continue;
        }
        match gt_to_pred.get(&g) {
            Some(&(_, best)) if best >= n => {}
            _ => {
                gt_to_pred.insert(g, (p, n));
            }
        }
    }
    let mut pred_to_gt: BTreeMap<u32, Vec<u32>> = pred_sizes.keys().map(|&p| (p, Vec::new())).collect();
    for (&g, &(p, _)) in &gt_to_pred {
        pred_to_gt.entry(p).or_default().push(g);
    }
    Ok(FrameMatch {
        gt_to_pred,
        pred_to_gt,
        gt_sizes,
        pred_sizes,
    })
}

fn check_lengths(gt: usize, pred: usize) -> Result<()> {
    if gt != pred {
        return Err(Error::usage(format!(
            "ground truth has {gt} frames, prediction has {pred}"
        )));
    }
    Ok(())
}

/// Mean Jaccard index over all ground-truth masks; unmatched masks score 0.
pub fn seg_score(gt: &[LabelImage], pred: &[LabelImage]) -> Result<f64> {
    check_lengths(gt.len(), pred.len())?;
    let per_frame = par::map_range(gt.len(), |f| -> Result<(f64, usize)> {
        let m = match_frame(&gt[f], &pred[f])?;
        let sum = m
            .gt_sizes
            .iter()
            .map(|(g, &gs)| match m.gt_to_pred.get(g) {
                Some(&(p, inter)) => inter as f64 / (gs + m.pred_sizes[&p] - inter) as f64,
                None => 0.0,
            })
            .sum();
        Ok((sum, m.gt_sizes.len()))
    });
    let (mut sum, mut count) = (0.0, 0usize);
    for r in per_frame {
        let (s, c) = r?;
        sum += s;
        count += c;
    }
    if count == 0 {
        return Err(Error::usage("SEG is undefined without ground-truth masks"));
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EdgeKind {
    /// Same track in consecutive frames.
    Continuation,
    /// Parent's last mask to a child's first mask.
    ParentLink,
}

/// Directed lineage edge between `(frame, mask label)` vertices.
pub type Edge = (Vertex, Vertex, EdgeKind);

/// `(frame, mask label)`.
pub type Vertex = (usize, u32);

/// Edges implied by a track graph.
pub fn graph_edges(graph: &TrackGraph) -> Vec<Edge> {
    let mut edges = Vec::new();
    let label_at = |f: usize, id: u32| graph.frame_labels.get(f).and_then(|m| m.get(&id)).copied();
    for t in &graph.tracks {
        for f in t.start..t.end {
            if let (Some(a), Some(b)) = (label_at(f, t.id), label_at(f + 1, t.id)) {
                edges.push(((f, a), (f + 1, b), EdgeKind::Continuation));
            }
        }
        if t.parent != 0 {
            if let Some(p) = graph.track(t.parent) {
                if let (Some(a), Some(b)) = (label_at(p.end, p.id), label_at(t.start, t.id)) {
                    edges.push(((p.end, a), (t.start, b), EdgeKind::ParentLink));
                }
            }
        }
    }
    edges.sort();
    edges
}

/// DET and TRA of `pred` against `gt`.
pub fn aogm_scores(gt: &Lineage, pred: &Lineage, weights: &AogmWeights) -> Result<AogmResult> {
    check_lengths(gt.masks.len(), pred.masks.len())?;
    let matches = par::map_range(gt.masks.len(), |f| match_frame(&gt.masks[f], &pred.masks[f]))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let mut counts = ErrorCounts::default();
    let mut gt_vertices = 0usize;
    for m in &matches {
        gt_vertices += m.gt_sizes.len();
        counts.false_negatives += m.gt_sizes.len() - m.gt_to_pred.len();
        for gs in m.pred_to_gt.values() {
            if gs.is_empty() {
                counts.false_positives += 1;
            } else {
                counts.splits_needed += gs.len() - 1;
            }
        }
    }

    let gt_edges = graph_edges(&gt.graph);
    let gt_index: BTreeMap<(Vertex, Vertex), EdgeKind> =
        gt_edges.iter().map(|&(a, b, k)| ((a, b), k)).collect();
    let mut covered: BTreeSet<(Vertex, Vertex)> = BTreeSet::new();
    let matched = |f: usize, p: u32| -> &[u32] {
        matches[f].pred_to_gt.get(&p).map_or(&[], |v| v.as_slice())
    };
    for ((fa, pa), (fb, pb), kind) in graph_edges(&pred.graph) {
        let mut hit = false;
        for &ga in matched(fa, pa) {
            for &gb in matched(fb, pb) {
                let key = ((fa, ga), (fb, gb));
                if let Some(&gk) = gt_index.get(&key) {
                    hit = true;
                    covered.insert(key);
                    if gk != kind {
                        counts.wrong_semantic_edges += 1;
                    }
                }
            }
        }
        if !hit {
            counts.redundant_edges += 1;
        }
    }
    counts.missing_edges = gt_edges.len() - covered.len();

    let w = weights;
    let aogm_d = w.w_ns * counts.splits_needed as f64
        + w.w_fn * counts.false_negatives as f64
        + w.w_fp * counts.false_positives as f64;
    let aogm = aogm_d
        + w.w_ed * counts.redundant_edges as f64
        + w.w_ea * counts.missing_edges as f64
        + w.w_ec * counts.wrong_semantic_edges as f64;
    let aogm_d0 = w.w_fn * gt_vertices as f64;
    let aogm0 = aogm_d0 + w.w_ea * gt_edges.len() as f64;
    if aogm0 <= 0.0 || aogm_d0 <= 0.0 {
        return Err(Error::usage("DET/TRA are undefined for an empty ground truth"));
    }
    let score = |cost: f64, base: f64| 1.0 - cost.min(base) / base;
    Ok(AogmResult {
        det: score(aogm_d, aogm_d0),
        tra: score(aogm, aogm0),
        counts,
        aogm_d,
        aogm,
        aogm_d0,
        aogm0,
    })
}

/// SEG, DET, TRA and OP_CTB in one report. `gt_seg` may differ from the
/// tracking ground truth masks (as in the challenge layout).
pub fn evaluate(
    gt_seg: &[LabelImage],
    gt: &Lineage,
    pred: &Lineage,
    weights: &AogmWeights,
) -> Result<EvalReport> {
    let seg = seg_score(gt_seg, &pred.masks)?;
    let aogm = aogm_scores(gt, pred, weights)?;
    Ok(EvalReport::new(seg, &aogm))
}

/// `|A ∩ B| / min(|A|, |B|)` for every linked mask pair in consecutive
/// frames (continuations and parent links), sorted ascending.
pub fn linked_overlaps(masks: &[LabelImage], graph: &TrackGraph) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for ((fa, la), (fb, lb), _) in graph_edges(graph) {
        if fb != fa + 1 {
            continue;
        }
        let (Some(a), Some(b)) = (masks.get(fa), masks.get(fb)) else {
            return Err(Error::usage(format!("graph references frame {fb} beyond the masks")));
        };
        let (mut na, mut nb, mut inter) = (0usize, 0usize, 0usize);
        for (&x, &y) in a.labels().iter().zip(b.labels()) {
            let (ia, ib) = (x == la, y == lb);
            na += ia as usize;
            nb += ib as usize;
            inter += (ia && ib) as usize;
        }
        if na == 0 || nb == 0 {
            return Err(Error::usage(format!(
                "linked mask missing: frame {fa} label {la} or frame {fb} label {lb}"
            )));
        }
        out.push(inter as f64 / na.min(nb) as f64);
    }
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// Overlap below which the `quantile` most motile fraction of linked cells
/// lies (nearest-rank quantile of [`linked_overlaps`]).
pub fn motility_overlap(masks: &[LabelImage], graph: &TrackGraph, quantile: f64) -> Result<f64> {
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(Error::usage(format!("quantile must lie in (0, 1), got {quantile}")));
    }
    let overlaps = linked_overlaps(masks, graph)?;
    if overlaps.is_empty() {
        return Err(Error::usage("motility overlap is undefined without links"));
    }
    let rank = ((quantile * overlaps.len() as f64).ceil() as usize).clamp(1, overlaps.len());
    Ok(overlaps[rank - 1])
}
