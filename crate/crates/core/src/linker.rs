//! Backward-in-time linking of per-frame instance masks.
//!
//! Pixels of every mask at `t` are shifted by the tracking offsets and land
//! on a pixel at `t-1`. The mask at `t-1` receiving most of them (background
//! competes, ties are ambiguous) gets the `t` mask as a matching candidate.
//! One candidate continues a track, two candidates form a division, anything
//! else starts a new track.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{LabelImage, VectorField};
use crate::geometry::{grid_cell, pixel_position};
use crate::par;

/// One track: `(id, start_frame, end_frame, parent_id)`; parent 0 is none.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Track {
    pub id: u32,
    pub start: usize,
    pub end: usize,
    pub parent: u32,
}

/// Lineage graph plus, per frame, which mask label each track occupies.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrackGraph {
    pub tracks: Vec<Track>,
    /// `frame_labels[f][track_id] = mask label in frame f`.
    pub frame_labels: Vec<BTreeMap<u32, u32>>,
}

impl TrackGraph {
    pub fn track(&self, id: u32) -> Option<&Track> {
        self.tracks.iter().find(|t| t.id == id)
    }

    pub fn children(&self, id: u32) -> Vec<u32> {
        self.tracks
            .iter()
            .filter(|t| t.parent == id && id != 0)
            .map(|t| t.id)
            .collect()
    }

    /// Checks the structural invariants of a lineage graph.
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeMap::new();
        for t in &self.tracks {
            if t.id == 0 {
                return Err(Error::Internal("track id 0 is reserved".into()));
            }
            if t.start > t.end {
                return Err(Error::Internal(format!("track {} starts after it ends", t.id)));
            }
            if ids.insert(t.id, *t).is_some() {
                return Err(Error::Internal(format!("duplicate track id {}", t.id)));
            }
        }
        for t in &self.tracks {
            if t.parent == 0 {
                continue;
            }
            let Some(p) = ids.get(&t.parent) else {
                return Err(Error::Internal(format!(
                    "track {} has unknown parent {}",
                    t.id, t.parent
                )));
            };
            if p.end >= t.start {
                return Err(Error::Internal(format!(
                    "parent {} of track {} does not end before the child starts",
                    p.id, t.id
                )));
            }
        }
        for (f, map) in self.frame_labels.iter().enumerate() {
            let mut seen = BTreeMap::new();
            for (&track, &label) in map {
                let Some(t) = ids.get(&track) else {
                    return Err(Error::Internal(format!("frame {f}: unknown track {track}")));
                };
                if f < t.start || f > t.end {
                    return Err(Error::Internal(format!(
                        "frame {f}: track {track} outside its range {}..={}",
                        t.start, t.end
                    )));
                }
                if let Some(other) = seen.insert(label, track) {
                    return Err(Error::Internal(format!(
                        "frame {f}: mask {label} belongs to tracks {other} and {track}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Votes of one mask at `t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskVotes {
    pub size: usize,
    /// Hits per `t-1` label; 0 collects background and out-of-frame pixels.
    pub votes: BTreeMap<u32, usize>,
    /// Unique majority label at `t-1`, if it is a mask.
    pub candidate: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MatchTable {
    /// Per mask at `t`.
    pub forward: BTreeMap<u32, MaskVotes>,
    /// Per mask at `t-1`: masks at `t` that chose it.
    pub backward: BTreeMap<u32, Vec<u32>>,
}

/// Shifts the pixels of every mask at `t` into frame `t-1` and counts hits.
pub fn vote_predecessors(
    labels_t: &LabelImage,
    track_off: &VectorField,
    labels_tm1: &LabelImage,
) -> Result<MatchTable> {
    let (h, w) = (labels_t.height(), labels_t.width());
    for dims in [
        (track_off.height(), track_off.width()),
        (labels_tm1.height(), labels_tm1.width()),
    ] {
        if dims != (h, w) {
            return Err(Error::shape(format!("{h}x{w}"), format!("{}x{}", dims.0, dims.1)));
        }
    }
    let prev = labels_tm1.labels();
    let mut table = MatchTable {
        forward: BTreeMap::new(),
        backward: labels_tm1.label_ids().into_iter().map(|l| (l, Vec::new())).collect(),
    };
    for (label, pixels) in labels_t.instances() {
        let mut votes: BTreeMap<u32, usize> = BTreeMap::new();
        for &i in &pixels {
            let p = pixel_position(i, h, w);
            let (ox, oy) = track_off.at(i);
            let e = crate::fields::NormalizedPoint::new_unchecked(p.x() + ox, p.y() + oy);
            let hit = grid_cell(e, h, w).map_or(0, |cell| prev[cell]);
            *votes.entry(hit).or_insert(0) += 1;
        }
        let max = votes.values().copied().max().unwrap_or(0);
        let mut leaders = votes.iter().filter(|(_, &c)| c == max).map(|(&l, _)| l);
        let candidate = match (leaders.next(), leaders.next()) {
            (Some(l), None) if l != 0 => Some(l),
            _ => None,
        };
        if let Some(c) = candidate {
            table.backward.entry(c).or_default().push(label);
        }
        table.forward.insert(
            label,
            MaskVotes {
                size: pixels.len(),
                votes,
                candidate,
            },
        );
    }
    Ok(table)
}

/// Outcome of resolving one frame pair, in terms of mask labels.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LinkDecisions {
    /// `(label at t, label at t-1)` pairs continuing one track.
    pub continuations: Vec<(u32, u32)>,
    /// `(parent label at t-1, [child labels at t])`.
    pub divisions: Vec<(u32, [u32; 2])>,
    /// Labels at `t` opening a new track without parent.
    pub new_tracks: Vec<u32>,
    /// Labels at `t-1` whose track ends there (no successor or a division).
    pub ended: Vec<u32>,
}

pub fn resolve_links(table: &MatchTable) -> LinkDecisions {
    let mut d = LinkDecisions::default();
    for (&prev, succ) in &table.backward {
        match succ.as_slice() {
            [] => d.ended.push(prev),
            [one] => d.continuations.push((*one, prev)),
            [a, b] => {
                d.divisions.push((prev, [*a, *b]));
                d.ended.push(prev);
            }
            many => {
                d.new_tracks.extend_from_slice(many);
                d.ended.push(prev);
            }
        }
    }
    for (&label, v) in &table.forward {
        if v.candidate.is_none() {
            d.new_tracks.push(label);
        }
    }
    d.new_tracks.sort_unstable();
    d
}

/// Tracks plus the per-frame masks relabelled by track id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lineage {
    pub graph: TrackGraph,
    pub masks: Vec<LabelImage>,
}

/// Folds per-pair decisions (`decisions[t-1]` for pair `(t, t-1)`) into a
/// lineage graph with globally unique track ids.
pub fn build_track_graph(decisions: &[LinkDecisions], frames: &[LabelImage]) -> Result<Lineage> {
    if frames.is_empty() {
        return Ok(Lineage {
            graph: TrackGraph::default(),
            masks: Vec::new(),
        });
    }
    if decisions.len() + 1 != frames.len() {
        return Err(Error::usage(format!(
            "{} frames need {} link decisions, got {}",
            frames.len(),
            frames.len() - 1,
            decisions.len()
        )));
    }
    let mut tracks: Vec<Track> = Vec::new();
    let mut frame_labels: Vec<BTreeMap<u32, u32>> = Vec::with_capacity(frames.len());
    let mut next_id = 1u32;
    // mask label -> track id, for the previous frame.
    let mut current: BTreeMap<u32, u32> = BTreeMap::new();
    for label in frames[0].label_ids() {
        tracks.push(Track {
            id: next_id,
            start: 0,
            end: 0,
            parent: 0,
        });
        current.insert(label, next_id);
        next_id += 1;
    }
    frame_labels.push(current.iter().map(|(&l, &t)| (t, l)).collect());

    for (f, dec) in decisions.iter().enumerate() {
        let t = f + 1;
        // Parent track id (0 = none) for each mask at t.
        let mut origin: BTreeMap<u32, (Option<u32>, u32)> = BTreeMap::new();
        let mut claim = |label: u32, v: (Option<u32>, u32)| -> Result<()> {
            if origin.insert(label, v).is_some() {
                return Err(Error::Internal(format!(
                    "frame {t}: mask {label} linked more than once"
                )));
            }
            Ok(())
        };
        let track_of = |prev: u32| {
            current.get(&prev).copied().ok_or_else(|| {
                Error::Internal(format!("frame {}: unknown mask {prev}", t - 1))
            })
        };
        for &(label, prev) in &dec.continuations {
            claim(label, (Some(track_of(prev)?), 0))?;
        }
        for &(prev, children) in &dec.divisions {
            let parent = track_of(prev)?;
            for c in children {
                claim(c, (None, parent))?;
            }
        }
        for &label in &dec.new_tracks {
            claim(label, (None, 0))?;
        }

        let mut next: BTreeMap<u32, u32> = BTreeMap::new();
        for label in frames[t].label_ids() {
            let Some(&(cont, parent)) = origin.get(&label) else {
                return Err(Error::Internal(format!("frame {t}: mask {label} has no link decision")));
            };
            let id = match cont {
                Some(id) => {
                    let tr = tracks
                        .iter_mut()
                        .find(|tr| tr.id == id)
                        .ok_or_else(|| Error::Internal(format!("missing track {id}")))?;
                    tr.end = t;
                    id
                }
                None => {
                    let id = next_id;
                    next_id += 1;
                    tracks.push(Track {
                        id,
                        start: t,
                        end: t,
                        parent,
                    });
                    id
                }
            };
            next.insert(label, id);
        }
        if origin.len() != next.len() {
            return Err(Error::Internal(format!(
                "frame {t}: decisions reference masks that do not exist"
            )));
        }
        frame_labels.push(next.iter().map(|(&l, &t)| (t, l)).collect());
        current = next;
    }

    let masks = frames
        .iter()
        .zip(&frame_labels)
        .map(|(img, map)| {
            let inverse: BTreeMap<u32, u32> = map.iter().map(|(&t, &l)| (l, t)).collect();
            img.relabel(&inverse)
        })
        .collect();
    // Masks now carry track ids as labels.
    let frame_labels = frame_labels
        .iter()
        .map(|m| m.keys().map(|&t| (t, t)).collect())
        .collect();
    let graph = TrackGraph {
        tracks,
        frame_labels,
    };
    graph.validate()?;
    Ok(Lineage { graph, masks })
}

/// Links a whole sequence. `track_offsets[t-1]` belongs to pair `(t, t-1)`.
pub fn link_sequence(frames: &[LabelImage], track_offsets: &[VectorField]) -> Result<Lineage> {
    if !frames.is_empty() && track_offsets.len() + 1 != frames.len() {
        return Err(Error::usage(format!(
            "{} frames need {} tracking offset fields, got {}",
            frames.len(),
            frames.len().saturating_sub(1),
            track_offsets.len()
        )));
    }
    let tables = par::map_range(track_offsets.len(), |k| {
        vote_predecessors(&frames[k + 1], &track_offsets[k], &frames[k])
    });
    let decisions = tables
        .into_iter()
        .map(|t| t.map(|t| resolve_links(&t)))
        .collect::<Result<Vec<_>>>()?;
    build_track_graph(&decisions, frames)
}
