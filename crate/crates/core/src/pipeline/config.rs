//! Pipeline configuration and its `key = value` file format.

use std::path::{Path, PathBuf};

use crate::clustering::ClusterConfig;
use crate::error::{Error, Result};
use crate::metrics::AogmWeights;

use super::tta::SymmetryOp;

/// Environment variable read for the worker count when none is configured.
pub const WORKERS_ENV: &str = "EMBEDTRACK_WORKERS";

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub crop_size: usize,
    /// Defaults to `crop_size / 4` when unset.
    pub overlap: Option<usize>,
    /// Percentiles used to normalize raw images.
    pub percentiles: (f64, f64),
    pub tta: Vec<SymmetryOp>,
    pub cluster: ClusterConfig,
    pub weights: AogmWeights,
    /// Directory holding `<sequence>/` raw images and `<sequence>_GT/`.
    pub dataset: Option<PathBuf>,
    pub sequence: String,
    /// Directory of `pairTTT.etk` tensor files.
    pub predictions: PathBuf,
    pub output: PathBuf,
    pub workers: Option<usize>,
    /// Directory of training masks used to derive `min_mask_size`.
    pub training_masks: Option<PathBuf>,
    /// Also write colour-mapped label overlays as PNG.
    pub overlays: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            crop_size: 256,
            overlap: None,
            percentiles: (1.0, 99.0),
            tta: SymmetryOp::ALL.to_vec(),
            cluster: ClusterConfig::default(),
            weights: AogmWeights::default(),
            dataset: None,
            sequence: "01".into(),
            predictions: PathBuf::from("predictions"),
            output: PathBuf::from("results"),
            workers: None,
            training_masks: None,
            overlays: false,
        }
    }
}

/// Keys accepted by [`PipelineConfig::set`], in documentation order.
pub const CONFIG_KEYS: &[&str] = &[
    "crop_size",
    "overlap",
    "percentile_low",
    "percentile_high",
    "tta",
    "seediness_threshold",
    "kernel_accept_threshold",
    "min_neighbor_votes",
    "min_mask_size",
    "bandwidth_scale",
    "w_ns",
    "w_fn",
    "w_fp",
    "w_ed",
    "w_ea",
    "w_ec",
    "dataset",
    "sequence",
    "predictions",
    "output",
    "workers",
    "training_masks",
    "overlays",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::usage(format!("cannot parse {key} = {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::usage(format!("cannot parse {key} = {value:?} as a boolean"))),
    }
}

impl PipelineConfig {
    pub fn overlap(&self) -> usize {
        self.overlap.unwrap_or(self.crop_size / 4)
    }

    /// Sets one configuration key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "crop_size" => self.crop_size = parse(key, value)?,
            "overlap" => self.overlap = Some(parse(key, value)?),
            "percentile_low" => self.percentiles.0 = parse(key, value)?,
            "percentile_high" => self.percentiles.1 = parse(key, value)?,
            "tta" => self.tta = SymmetryOp::parse_list(value)?,
            "seediness_threshold" => self.cluster.seediness_threshold = parse(key, value)?,
            "kernel_accept_threshold" => self.cluster.kernel_accept_threshold = parse(key, value)?,
            "min_neighbor_votes" => self.cluster.min_neighbor_votes = parse(key, value)?,
            "min_mask_size" => self.cluster.min_mask_size = parse(key, value)?,
            "bandwidth_scale" => self.cluster.w_s = parse(key, value)?,
            "w_ns" => self.weights.w_ns = parse(key, value)?,
            "w_fn" => self.weights.w_fn = parse(key, value)?,
            "w_fp" => self.weights.w_fp = parse(key, value)?,
            "w_ed" => self.weights.w_ed = parse(key, value)?,
            "w_ea" => self.weights.w_ea = parse(key, value)?,
            "w_ec" => self.weights.w_ec = parse(key, value)?,
            "dataset" => self.dataset = Some(value.into()),
            "sequence" => self.sequence = value.into(),
            "predictions" => self.predictions = value.into(),
            "output" => self.output = value.into(),
            "workers" => self.workers = Some(parse(key, value)?),
            "training_masks" => self.training_masks = Some(value.into()),
            "overlays" => self.overlays = parse_bool(key, value)?,
            other => return Err(Error::usage(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::usage(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::usage(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text).map_err(|e| Error::format(path, e.to_string()))?;
        Ok(cfg)
    }

    /// Fills `workers` from [`WORKERS_ENV`] when it is still unset.
    pub fn apply_env(&mut self) -> Result<()> {
        if self.workers.is_none() {
            if let Ok(v) = std::env::var(WORKERS_ENV) {
                self.workers = Some(parse(WORKERS_ENV, &v)?);
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 {
            return Err(Error::usage("crop_size must be positive"));
        }
        if self.overlap() >= self.crop_size {
            return Err(Error::usage(format!(
                "overlap {} must be smaller than crop_size {}",
                self.overlap(),
                self.crop_size
            )));
        }
        let (lo, hi) = self.percentiles;
        if !(0.0 <= lo && lo < hi && hi <= 100.0) {
            return Err(Error::usage(format!(
                "percentiles must satisfy 0 <= low < high <= 100, got ({lo}, {hi})"
            )));
        }
        if self.tta.is_empty() {
            return Err(Error::usage("at least one TTA op is required"));
        }
        if self.workers == Some(0) {
            return Err(Error::usage("workers must be at least 1"));
        }
        let w = &self.weights;
        for (name, v) in [
            ("w_ns", w.w_ns),
            ("w_fn", w.w_fn),
            ("w_fp", w.w_fp),
            ("w_ed", w.w_ed),
            ("w_ea", w.w_ea),
            ("w_ec", w.w_ec),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::usage(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if self.weights.w_fn == 0.0 {
            return Err(Error::usage("w_fn must be positive, DET and TRA are normalized by it"));
        }
        self.cluster.validate()
    }
}
