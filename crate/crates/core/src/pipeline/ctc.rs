//! Cell Tracking Challenge style directory layout.
//!
//! ```text
//! <root>/<seq>/tTTT.tif                raw images
//! <root>/<seq>_GT/TRA/man_trackTTT.tif  tracking ground truth masks
//! <root>/<seq>_GT/TRA/man_track.txt     `id start end parent` per line
//! <root>/<seq>_GT/SEG/man_segTTT.tif    segmentation ground truth (may be sparse)
//! <out>/maskTTT.tif, <out>/res_track.txt  results
//! ```
//!
//! Frame indices are zero-padded to at least three digits. Masks are
//! single-channel 16-bit TIFFs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, ImageFormat, Luma, Rgb};

use crate::error::{Error, Result};
use crate::fields::LabelImage;
use crate::linker::{Lineage, Track, TrackGraph};

pub const TRACK_FILE_GT: &str = "man_track.txt";
pub const TRACK_FILE_RESULT: &str = "res_track.txt";

/// `<prefix><index padded to digits><suffix>`.
pub fn frame_name(prefix: &str, t: usize, digits: usize, suffix: &str) -> String {
    format!("{prefix}{t:0digits$}{suffix}")
}

/// Digits used when writing `frames` frames.
pub fn digits_for(frames: usize) -> usize {
    frames.saturating_sub(1).to_string().len().max(3)
}

/// Files named `<prefix><digits><suffix>` in `dir`, keyed by index.
pub fn indexed_files(dir: &Path, prefix: &str, suffix: &str) -> Result<BTreeMap<usize, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        let Some(core) = name.strip_prefix(prefix).and_then(|s| s.strip_suffix(suffix)) else {
            continue;
        };
        if core.is_empty() || !core.bytes().all(|b| b.is_ascii_digit()) {
            continue;
        }
        let Ok(t) = core.parse::<usize>() else { continue };
        if let Some(prev) = out.insert(t, entry.path()) {
            return Err(Error::format(prev, format!("frame {t} appears twice")));
        }
    }
    Ok(out)
}

fn image_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    }
}

pub fn write_mask(path: &Path, labels: &LabelImage) -> Result<()> {
    if let Some(&l) = labels.labels().iter().find(|&&l| l > u16::MAX as u32) {
        return Err(Error::LabelOverflow { label: l });
    }
    let data: Vec<u16> = labels.labels().iter().map(|&l| l as u16).collect();
    write_gray16(path, labels.height(), labels.width(), data)
}

fn write_gray16(path: &Path, h: usize, w: usize, data: Vec<u16>) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(w as u32, h as u32, data)
        .ok_or_else(|| Error::Internal("image buffer size mismatch".into()))?;
    buf.save_with_format(path, ImageFormat::Tiff).map_err(|e| image_err(path, e))
}

fn read_gray(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img {
        image::DynamicImage::ImageLuma16(b) => b.into_raw(),
        image::DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(u16::from).collect(),
        other => {
            return Err(Error::format(
                path,
                format!("expected a single-channel image, got {:?}", other.color()),
            ))
        }
    };
    Ok((h, w, data))
}

pub fn read_mask(path: &Path) -> Result<LabelImage> {
    let (h, w, data) = read_gray(path)?;
    LabelImage::new(h, w, data.into_iter().map(u32::from).collect())
}

pub fn write_raw(path: &Path, h: usize, w: usize, data: &[u16]) -> Result<()> {
    write_gray16(path, h, w, data.to_vec())
}

/// Raw intensities as `(height, width, values)`.
pub fn read_raw(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let (h, w, data) = read_gray(path)?;
    Ok((h, w, data.into_iter().map(f64::from).collect()))
}

/// One `id start end parent` line per track, sorted by id.
pub fn format_tracks(tracks: &[Track]) -> String {
    let mut sorted = tracks.to_vec();
    sorted.sort_by_key(|t| t.id);
    sorted
        .iter()
        .map(|t| format!("{} {} {} {}\n", t.id, t.start, t.end, t.parent))
        .collect()
}

pub fn parse_tracks(text: &str, path: &Path) -> Result<Vec<Track>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let nums: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::format(path, format!("line {}: expected `id start end parent`", n + 1));
        if nums.len() != 4 {
            return Err(bad());
        }
        let id: u32 = nums[0].parse().map_err(|_| bad())?;
        let start: usize = nums[1].parse().map_err(|_| bad())?;
        let end: usize = nums[2].parse().map_err(|_| bad())?;
        let parent: u32 = nums[3].parse().map_err(|_| bad())?;
        out.push(Track { id, start, end, parent });
    }
    Ok(out)
}

pub fn write_track_file(path: &Path, graph: &TrackGraph) -> Result<()> {
    std::fs::write(path, format_tracks(&graph.tracks)).map_err(|e| Error::io(path, e))
}

pub fn read_track_file(path: &Path) -> Result<Vec<Track>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tracks(&text, path)
}

/// Combines masks labelled by track id with their track list.
pub fn lineage_from_masks(masks: Vec<LabelImage>, tracks: Vec<Track>, path: &Path) -> Result<Lineage> {
    let frame_labels = masks
        .iter()
        .map(|m| m.label_ids().into_iter().map(|l| (l, l)).collect())
        .collect();
    let graph = TrackGraph { tracks, frame_labels };
    graph.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(Lineage { graph, masks })
}

fn contiguous(files: BTreeMap<usize, PathBuf>, dir: &Path) -> Result<Vec<PathBuf>> {
    for (k, &t) in files.keys().enumerate() {
        if k != t {
            return Err(Error::format(dir, format!("frame {k} is missing")));
        }
    }
    Ok(files.into_values().collect())
}

fn read_masks(paths: &[PathBuf]) -> Result<Vec<LabelImage>> {
    crate::par::map(paths, |p| read_mask(p)).into_iter().collect()
}

/// Masks and tracks written by [`write_ctc_result`].
pub fn read_ctc_result(dir: &Path) -> Result<Lineage> {
    let files = indexed_files(dir, "mask", ".tif")?;
    if files.is_empty() {
        return Err(Error::NoInput(format!("no mask files in {}", dir.display())));
    }
    let masks = read_masks(&contiguous(files, dir)?)?;
    let track_path = dir.join(TRACK_FILE_RESULT);
    lineage_from_masks(masks, read_track_file(&track_path)?, &track_path)
}

pub fn write_ctc_result(dir: &Path, lineage: &Lineage) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let digits = digits_for(lineage.masks.len());
    for (t, m) in lineage.masks.iter().enumerate() {
        write_mask(&dir.join(frame_name("mask", t, digits, ".tif")), m)?;
    }
    write_track_file(&dir.join(TRACK_FILE_RESULT), &lineage.graph)
}

/// Ground truth of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub lineage: Lineage,
    /// Frames with segmentation ground truth.
    pub seg: BTreeMap<usize, LabelImage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtcDataset {
    /// Raw image paths by frame.
    pub raw: BTreeMap<usize, PathBuf>,
    pub gt: Option<GroundTruth>,
}

pub fn gt_dir(root: &Path, seq: &str) -> PathBuf {
    root.join(format!("{seq}_GT"))
}

/// Reads the raw image index and, when present, the ground truth.
pub fn read_ctc_dataset(root: &Path, seq: &str) -> Result<CtcDataset> {
    if !root.is_dir() {
        return Err(Error::NoInput(format!("dataset root {} is not a directory", root.display())));
    }
    let raw_dir = root.join(seq);
    let raw = if raw_dir.is_dir() {
        indexed_files(&raw_dir, "t", ".tif")?
    } else {
        BTreeMap::new()
    };
    let tra = gt_dir(root, seq).join("TRA");
    let track_path = tra.join(TRACK_FILE_GT);
    if !track_path.is_file() {
        return Ok(CtcDataset { raw, gt: None });
    }
    let masks = read_masks(&contiguous(indexed_files(&tra, "man_track", ".tif")?, &tra)?)?;
    let lineage = lineage_from_masks(masks, read_track_file(&track_path)?, &track_path)?;
    let seg_dir = gt_dir(root, seq).join("SEG");
    let mut seg = BTreeMap::new();
    if seg_dir.is_dir() {
        for (t, p) in indexed_files(&seg_dir, "man_seg", ".tif")? {
            seg.insert(t, read_mask(&p)?);
        }
    }
    Ok(CtcDataset {
        raw,
        gt: Some(GroundTruth { lineage, seg }),
    })
}

/// Writes raw frames and full ground truth (TRA and SEG) of a sequence.
pub fn write_ctc_dataset(root: &Path, seq: &str, images: &[Vec<u16>], gt: &Lineage) -> Result<()> {
    let raw_dir = root.join(seq);
    let tra = gt_dir(root, seq).join("TRA");
    let seg = gt_dir(root, seq).join("SEG");
    for d in [&raw_dir, &tra, &seg] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let digits = digits_for(gt.masks.len());
    for (t, img) in images.iter().enumerate() {
        let m = gt
            .masks
            .get(t)
            .ok_or_else(|| Error::usage("more raw images than ground-truth frames"))?;
        write_raw(&raw_dir.join(frame_name("t", t, digits, ".tif")), m.height(), m.width(), img)?;
    }
    for (t, m) in gt.masks.iter().enumerate() {
        write_mask(&tra.join(frame_name("man_track", t, digits, ".tif")), m)?;
        write_mask(&seg.join(frame_name("man_seg", t, digits, ".tif")), m)?;
    }
    write_track_file(&tra.join(TRACK_FILE_GT), &gt.graph)
}

/// Deterministic pseudo-random colour for a label; background is black.
pub fn label_color(label: u32) -> [u8; 3] {
    if label == 0 {
        return [0, 0, 0];
    }
    let mut x = label.wrapping_mul(0x9E37_79B1);
    x ^= x >> 15;
    x = x.wrapping_mul(0x85EB_CA77);
    x ^= x >> 13;
    let [a, b, c, _] = x.to_le_bytes();
    [a | 0x40, b | 0x40, c | 0x40]
}

/// Colour-mapped labels as RGB PNG.
pub fn write_overlay(path: &Path, labels: &LabelImage) -> Result<()> {
    let data: Vec<u8> = labels.labels().iter().flat_map(|&l| label_color(l)).collect();
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(labels.width() as u32, labels.height() as u32, data)
            .ok_or_else(|| Error::Internal("overlay buffer size mismatch".into()))?;
    buf.save_with_format(path, ImageFormat::Png).map_err(|e| image_err(path, e))
}
