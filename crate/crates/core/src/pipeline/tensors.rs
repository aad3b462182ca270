//! Binary container for one frame pair's prediction tensors.
//!
//! ```text
//! embedtrack-tensors v1\n
//! tensor <name> <f32|f64> <d0> <d1> <d2>\n
//! <d0*d1*d2 little-endian values, row-major>
//! ...                      (one block per tensor, any order)
//! end\n
//! ```
//!
//! A pair file holds exactly the seven tensors of [`TENSOR_NAMES`]; vector
//! and bandwidth tensors have shape `2 H W` (x plane first), seediness has
//! shape `1 H W`. See `docs/tensor-format.md` for the full description.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fields::{BandwidthField, PredictionSet, ScalarField, SegPrediction, VectorField};

pub const MAGIC: &str = "embedtrack-tensors v1";

pub const TENSOR_NAMES: [&str; 7] = [
    "seg_t.offsets",
    "seg_t.bandwidth",
    "seg_t.seediness",
    "seg_tm1.offsets",
    "seg_tm1.bandwidth",
    "seg_tm1.seediness",
    "track.offsets",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

fn channels(name: &str) -> usize {
    if name.ends_with("seediness") {
        1
    } else {
        2
    }
}

fn planes(p: &PredictionSet) -> [(&'static str, &[f64]); 7] {
    [
        (TENSOR_NAMES[0], p.seg_t.offsets.data()),
        (TENSOR_NAMES[1], p.seg_t.bandwidth.data()),
        (TENSOR_NAMES[2], p.seg_t.seediness.values()),
        (TENSOR_NAMES[3], p.seg_tm1.offsets.data()),
        (TENSOR_NAMES[4], p.seg_tm1.bandwidth.data()),
        (TENSOR_NAMES[5], p.seg_tm1.seediness.values()),
        (TENSOR_NAMES[6], p.track.data()),
    ]
}

pub fn encode(p: &PredictionSet, dtype: DType) -> Vec<u8> {
    let (h, w) = (p.height(), p.width());
    let mut out = Vec::with_capacity(12 * h * w * dtype.size() + 512);
    out.extend_from_slice(MAGIC.as_bytes());
    out.push(b'\n');
    for (name, data) in planes(p) {
        out.extend_from_slice(format!("tensor {name} {} {} {h} {w}\n", dtype.name(), channels(name)).as_bytes());
        match dtype {
            DType::F64 => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            DType::F32 => data.iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        }
    }
    out.extend_from_slice(b"end\n");
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn line(&mut self) -> Option<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest.iter().take(256).position(|&b| b == b'\n')?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).ok()
    }

    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let chunk = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(chunk)
    }
}

/// Parses a pair container; `path` is only used in diagnostics.
pub fn decode(bytes: &[u8], path: &Path) -> Result<PredictionSet> {
    let bad = |msg: String| Error::format(path, msg);
    let mut r = Reader { bytes, pos: 0 };
    if r.line() != Some(MAGIC) {
        return Err(bad(format!("missing header line {MAGIC:?}")));
    }
    let mut tensors: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut dims: Option<(usize, usize)> = None;
    loop {
        let line = r.line().ok_or_else(|| bad("truncated header".into()))?;
        if line == "end" {
            break;
        }
        let parts: Vec<&str> = line.split(' ').collect();
        let [kw, name, dtype, c, h, w] = parts[..] else {
            return Err(bad(format!("malformed tensor header {line:?}")));
        };
        if kw != "tensor" {
            return Err(bad(format!("malformed tensor header {line:?}")));
        }
        if !TENSOR_NAMES.contains(&name) {
            return Err(bad(format!("unknown tensor {name:?}")));
        }
        if tensors.contains_key(name) {
            return Err(bad(format!("duplicate tensor {name:?}")));
        }
        let dtype = match dtype {
            "f32" => DType::F32,
            "f64" => DType::F64,
            other => return Err(bad(format!("unsupported dtype {other:?}"))),
        };
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad dimension {s:?} in {line:?}")));
        let (c, h, w) = (num(c)?, num(h)?, num(w)?);
        if c != channels(name) {
            return Err(bad(format!("{name} needs {} channels, got {c}", channels(name))));
        }
        match dims {
            None => dims = Some((h, w)),
            Some(d) if d != (h, w) => {
                return Err(bad(format!("{name} is {h}x{w} but earlier tensors are {}x{}", d.0, d.1)))
            }
            _ => {}
        }
        let len = c
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| bad(format!("{name} is too large")))?;
        let raw = r
            .take(len * dtype.size())
            .ok_or_else(|| bad(format!("{name}: data truncated")))?;
        let values: Vec<f64> = match dtype {
            DType::F64 => raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect(),
            DType::F32 => raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect(),
        };
        tensors.insert(name.to_string(), values);
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes after end marker".into()));
    }
    let (h, w) = dims.ok_or_else(|| bad("no tensors".into()))?;
    let mut get = |name: &str| tensors.remove(name).ok_or_else(|| bad(format!("missing tensor {name:?}")));
    let ctx = |e: Error| bad(e.to_string());
    let mut seg = |prefix: &str| -> Result<SegPrediction> {
        SegPrediction::new(
            VectorField::new(h, w, get(&format!("{prefix}.offsets"))?).map_err(ctx)?,
            BandwidthField::new(h, w, get(&format!("{prefix}.bandwidth"))?).map_err(ctx)?,
            ScalarField::new(h, w, get(&format!("{prefix}.seediness"))?).map_err(ctx)?,
        )
    };
    let seg_t = seg("seg_t")?;
    let seg_tm1 = seg("seg_tm1")?;
    let track = VectorField::new(h, w, get("track.offsets")?).map_err(ctx)?;
    PredictionSet::new(seg_t, seg_tm1, track)
}

pub fn write_tensors(path: &Path, p: &PredictionSet, dtype: DType) -> Result<()> {
    std::fs::write(path, encode(p, dtype)).map_err(|e| Error::io(path, e))
}

pub fn read_tensors(path: &Path) -> Result<PredictionSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
