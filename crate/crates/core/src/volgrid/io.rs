//! Native grid format: a JSON sidecar (`*.vol.json`) next to a raw
//! little-endian payload (`*.vol`), `x` fastest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DType, Dims, IntensityKind, LabelMap, ProbMap, Spacing, Volume};
use crate::error::{Error, Result};

/// Sidecar contents. Volumes use exactly the four core keys; label and
/// probability grids add `num_classes`, uncertainty grids `members`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub dims: Dims,
    pub spacing_mm: Spacing,
    pub dtype: String,
    pub intensity_kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    /// Ensemble size behind an uncertainty grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub members: Option<usize>,
}

const KIND_LABEL: &str = "Label";
const KIND_PROB: &str = "Probability";

/// Raw payload path paired with a sidecar: `a.vol.json` -> `a.vol`.
pub fn raw_path(meta_path: &Path) -> PathBuf {
    let s = meta_path.to_string_lossy();
    match s.strip_suffix(".json") {
        Some(stem) => PathBuf::from(stem),
        None => PathBuf::from(format!("{s}.raw")),
    }
}

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::I16 => "i16",
        DType::U8 => "u8",
        DType::F32 => "f32",
    }
}

fn parse_dtype(name: &str, path: &Path) -> Result<DType> {
    match name {
        "i16" => Ok(DType::I16),
        "u8" => Ok(DType::U8),
        "f32" => Ok(DType::F32),
        other => Err(Error::Metadata {
            path: path.to_path_buf(),
            msg: format!("unknown dtype {other:?} (expected i16, u8 or f32)"),
        }),
    }
}

/// Reads a sidecar without touching the payload.
pub fn read_meta(meta_path: &Path) -> Result<GridMeta> {
    let text = fs::read_to_string(meta_path).map_err(|e| Error::io(meta_path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Metadata {
        path: meta_path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn read_payload(meta_path: &Path, meta: &GridMeta, channels: usize) -> Result<(DType, Vec<u8>)> {
    let dtype = parse_dtype(&meta.dtype, meta_path)?;
    let raw = raw_path(meta_path);
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let expected = meta.dims.iter().product::<usize>() * channels * dtype.byte_width();
    if bytes.len() != expected {
        return Err(Error::SizeMismatch {
            expected: expected as u64,
            found: bytes.len() as u64,
        });
    }
    Ok((dtype, bytes))
}

fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn write_grid(meta_path: &Path, meta: &GridMeta, payload: &[u8]) -> Result<()> {
    let text = serde_json::to_string_pretty(meta).expect("sidecar serializes");
    fs::write(meta_path, text + "\n").map_err(|e| Error::io(meta_path, e))?;
    let raw = raw_path(meta_path);
    fs::write(&raw, payload).map_err(|e| Error::io(&raw, e))
}

pub fn load_volume(meta_path: impl AsRef<Path>) -> Result<Volume> {
    let meta_path = meta_path.as_ref();
    let meta = read_meta(meta_path)?;
    let kind = match meta.intensity_kind.as_str() {
        "HU" => IntensityKind::Hu,
        "Normalized" => IntensityKind::Normalized,
        other => {
            return Err(Error::Metadata {
                path: meta_path.to_path_buf(),
                msg: format!("intensity_kind {other:?} is not a volume kind"),
            })
        }
    };
    let (dtype, bytes) = read_payload(meta_path, &meta, 1)?;
    let data = match dtype {
        DType::I16 => bytes
            .chunks_exact(2)
            .map(|c| f32::from(i16::from_le_bytes([c[0], c[1]])))
            .collect(),
        DType::F32 => decode_f32(&bytes),
        DType::U8 => {
            return Err(Error::Metadata {
                path: meta_path.to_path_buf(),
                msg: "volumes cannot be stored as u8".into(),
            })
        }
    };
    Volume::new(meta.dims, meta.spacing_mm, kind, dtype, data)
}

pub fn save_volume(v: &Volume, meta_path: impl AsRef<Path>) -> Result<()> {
    let kind = match v.kind() {
        IntensityKind::Hu => "HU",
        IntensityKind::Normalized => "Normalized",
    };
    let meta = GridMeta {
        dims: v.dims(),
        spacing_mm: v.spacing(),
        dtype: dtype_name(v.dtype()).into(),
        intensity_kind: kind.into(),
        num_classes: None,
        members: None,
    };
    let payload: Vec<u8> = match v.dtype() {
        DType::I16 => v
            .data()
            .iter()
            .flat_map(|&x| (x as i16).to_le_bytes())
            .collect(),
        _ => v.data().iter().flat_map(|x| x.to_le_bytes()).collect(),
    };
    write_grid(meta_path.as_ref(), &meta, &payload)
}

pub fn load_labels(meta_path: impl AsRef<Path>) -> Result<LabelMap> {
    let meta_path = meta_path.as_ref();
    let meta = read_meta(meta_path)?;
    if meta.intensity_kind != KIND_LABEL {
        return Err(Error::Metadata {
            path: meta_path.to_path_buf(),
            msg: format!(
                "expected intensity_kind \"Label\", found {:?}",
                meta.intensity_kind
            ),
        });
    }
    let num_classes = meta.num_classes.ok_or_else(|| Error::Metadata {
        path: meta_path.to_path_buf(),
        msg: "label grid without num_classes".into(),
    })?;
    let (dtype, bytes) = read_payload(meta_path, &meta, 1)?;
    if dtype != DType::U8 {
        return Err(Error::Metadata {
            path: meta_path.to_path_buf(),
            msg: "label grids must be stored as u8".into(),
        });
    }
    LabelMap::new(meta.dims, meta.spacing_mm, num_classes, bytes)
}

pub fn save_labels(g: &LabelMap, meta_path: impl AsRef<Path>) -> Result<()> {
    let meta = GridMeta {
        dims: g.dims(),
        spacing_mm: g.spacing(),
        dtype: "u8".into(),
        intensity_kind: KIND_LABEL.into(),
        num_classes: Some(g.num_classes()),
        members: None,
    };
    write_grid(meta_path.as_ref(), &meta, g.labels())
}

pub fn load_probs(meta_path: impl AsRef<Path>) -> Result<ProbMap> {
    let meta_path = meta_path.as_ref();
    let meta = read_meta(meta_path)?;
    let num_classes = match (meta.intensity_kind.as_str(), meta.num_classes) {
        (KIND_PROB, Some(c)) => c,
        _ => {
            return Err(Error::Metadata {
                path: meta_path.to_path_buf(),
                msg: "expected a Probability grid with num_classes".into(),
            })
        }
    };
    let (_, bytes) = read_payload(meta_path, &meta, num_classes)?;
    ProbMap::new(meta.dims, meta.spacing_mm, num_classes, decode_f32(&bytes))
}

pub fn save_probs(p: &ProbMap, meta_path: impl AsRef<Path>) -> Result<()> {
    let meta = GridMeta {
        dims: p.dims(),
        spacing_mm: p.spacing(),
        dtype: "f32".into(),
        intensity_kind: KIND_PROB.into(),
        num_classes: Some(p.num_classes()),
        members: None,
    };
    let payload: Vec<u8> = p.probs().iter().flat_map(|x| x.to_le_bytes()).collect();
    write_grid(meta_path.as_ref(), &meta, &payload)
}

/// Writes an arbitrary f32 scalar grid (e.g. an uncertainty map) with a custom kind tag.
pub(crate) fn save_scalar_grid(
    dims: Dims,
    spacing: Spacing,
    kind: &str,
    members: Option<usize>,
    data: &[f32],
    meta_path: &Path,
) -> Result<()> {
    let meta = GridMeta {
        dims,
        spacing_mm: spacing,
        dtype: "f32".into(),
        intensity_kind: kind.into(),
        num_classes: None,
        members,
    };
    let payload: Vec<u8> = data.iter().flat_map(|x| x.to_le_bytes()).collect();
    write_grid(meta_path, &meta, &payload)
}

pub(crate) fn load_scalar_grid(meta_path: &Path, kind: &str) -> Result<(GridMeta, Vec<f32>)> {
    let meta = read_meta(meta_path)?;
    if meta.intensity_kind != kind || meta.dtype != "f32" {
        return Err(Error::Metadata {
            path: meta_path.to_path_buf(),
            msg: format!("expected an f32 {kind} grid"),
        });
    }
    let (_, bytes) = read_payload(meta_path, &meta, 1)?;
    Ok((meta, decode_f32(&bytes)))
}
