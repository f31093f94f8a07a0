//! Two-file volume format: a text header (`.mhd`) of `key = value` lines
//! plus a raw little-endian payload, x fastest.
//!
//! Header keys: NDims (3 for scalar/label volumes, 4 for probability
//! volumes), DimSize, ElementSpacing (mm), ElementType (Float64 | UInt8),
//! ElementDataFile (path relative to the header).

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{LabelVolume, ProbVolume, Volume3D, NUM_CLASSES};
use crate::error::{Error, Result};

/// Result of loading a header whose element type decides the payload kind.
#[derive(Debug, Clone)]
pub enum LoadedVolume {
    Scalar(Volume3D),
    Labels(LabelVolume),
}

fn raw_path_for(header_path: &Path) -> PathBuf {
    header_path.with_extension("raw")
}

fn write_pair(
    header_path: &Path,
    ndims: usize,
    dim_size: &[usize],
    spacing: &[f64],
    element_type: &str,
    payload: &[u8],
) -> Result<()> {
    let raw = raw_path_for(header_path);
    let raw_name = raw
        .file_name()
        .ok_or_else(|| Error::Param(format!("bad output path {}", header_path.display())))?
        .to_string_lossy()
        .to_string();
    let dims_str = dim_size
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join(" ");
    let spacing_str = spacing
        .iter()
        .map(|s| format!("{s:?}"))
        .collect::<Vec<_>>()
        .join(" ");
    let header = format!(
        "NDims = {ndims}\nDimSize = {dims_str}\nElementSpacing = {spacing_str}\nElementType = {element_type}\nElementDataFile = {raw_name}\n"
    );
    fs::write(header_path, header)?;
    fs::write(raw, payload)?;
    Ok(())
}

/// Writes a scalar volume as Float64.
pub fn save_volume(vol: &Volume3D, header_path: &Path) -> Result<()> {
    let (dx, dy, dz) = vol.dims();
    let (sx, sy, sz) = vol.spacing();
    let mut payload = Vec::with_capacity(vol.num_voxels() * 8);
    for v in vol.values() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    write_pair(
        header_path,
        3,
        &[dx, dy, dz],
        &[sx, sy, sz],
        "Float64",
        &payload,
    )
}

/// Writes a label volume as UInt8.
pub fn save_labels(lab: &LabelVolume, header_path: &Path) -> Result<()> {
    let (dx, dy, dz) = lab.dims();
    let (sx, sy, sz) = lab.spacing();
    write_pair(
        header_path,
        3,
        &[dx, dy, dz],
        &[sx, sy, sz],
        "UInt8",
        lab.labels(),
    )
}

/// Writes a probability volume as a 4D Float64 block, class axis fastest.
pub fn save_prob_volume(pv: &ProbVolume, header_path: &Path) -> Result<()> {
    let (dx, dy, dz) = pv.dims();
    let (sx, sy, sz) = pv.spacing();
    let mut payload = Vec::with_capacity(pv.probs().len() * 8);
    for v in pv.probs() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    write_pair(
        header_path,
        4,
        &[NUM_CLASSES, dx, dy, dz],
        &[1.0, sx, sy, sz],
        "Float64",
        &payload,
    )
}

struct Header {
    ndims: usize,
    dim_size: Vec<usize>,
    spacing: Vec<f64>,
    element_type: String,
    payload: Vec<u8>,
}

fn parse_header(header_path: &Path) -> Result<Header> {
    let malformed = |msg: String| Error::MalformedHeader {
        path: header_path.to_path_buf(),
        msg,
    };
    let text = fs::read_to_string(header_path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(header_path.to_path_buf()),
        _ => Error::Io(e),
    })?;

    let mut fields: HashMap<&str, &str> = HashMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| malformed(format!("line without '=': {line:?}")))?;
        fields.insert(k.trim(), v.trim());
    }
    let get = |key: &str| {
        fields
            .get(key)
            .copied()
            .ok_or_else(|| malformed(format!("missing key {key}")))
    };

    let ndims: usize = get("NDims")?
        .parse()
        .map_err(|_| malformed("NDims is not an integer".into()))?;
    let dim_size: Vec<usize> = get("DimSize")?
        .split_whitespace()
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| malformed(format!("bad DimSize token {t:?}")))
        })
        .collect::<Result<_>>()?;
    let spacing: Vec<f64> = get("ElementSpacing")?
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| malformed(format!("bad ElementSpacing token {t:?}")))
        })
        .collect::<Result<_>>()?;
    let element_type = get("ElementType")?.to_string();
    let data_file = get("ElementDataFile")?;

    if dim_size.len() != ndims {
        return Err(malformed(format!(
            "DimSize has {} entries for NDims {ndims}",
            dim_size.len()
        )));
    }
    if spacing.len() != ndims {
        return Err(malformed(format!(
            "ElementSpacing has {} entries for NDims {ndims}",
            spacing.len()
        )));
    }
    if dim_size.iter().any(|&d| d == 0) {
        return Err(malformed(format!("zero entry in DimSize {dim_size:?}")));
    }

    let raw_path = header_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(data_file);
    let payload = fs::read(&raw_path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(raw_path.clone()),
        _ => Error::Io(e),
    })?;

    Ok(Header {
        ndims,
        dim_size,
        spacing,
        element_type,
        payload,
    })
}

fn check_payload_len(header_path: &Path, payload: &[u8], expected: usize) -> Result<()> {
    if payload.len() != expected {
        return Err(Error::Truncated {
            path: header_path.to_path_buf(),
            expected,
            got: payload.len(),
        });
    }
    Ok(())
}

/// Loads a scalar (Float64) or label (UInt8) volume; the element type in
/// the header decides which.
pub fn load_volume(header_path: &Path) -> Result<LoadedVolume> {
    let h = parse_header(header_path)?;
    if h.ndims != 3 {
        return Err(Error::MalformedHeader {
            path: header_path.to_path_buf(),
            msg: format!("NDims must be 3 for scalar/label volumes, got {}", h.ndims),
        });
    }
    let dims = (h.dim_size[0], h.dim_size[1], h.dim_size[2]);
    let spacing = (h.spacing[0], h.spacing[1], h.spacing[2]);
    let nvox = dims.0 * dims.1 * dims.2;
    match h.element_type.as_str() {
        "Float64" => {
            check_payload_len(header_path, &h.payload, nvox * 8)?;
            let values: Vec<f64> = h
                .payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            Ok(LoadedVolume::Scalar(Volume3D::new(dims, spacing, values)?))
        }
        "UInt8" => {
            check_payload_len(header_path, &h.payload, nvox)?;
            Ok(LoadedVolume::Labels(LabelVolume::new(
                dims, spacing, h.payload,
            )?))
        }
        other => Err(Error::UnsupportedElementType {
            path: header_path.to_path_buf(),
            ty: other.to_string(),
        }),
    }
}

/// Convenience wrapper that insists on a scalar volume.
pub fn load_scalar_volume(header_path: &Path) -> Result<Volume3D> {
    match load_volume(header_path)? {
        LoadedVolume::Scalar(v) => Ok(v),
        LoadedVolume::Labels(_) => Err(Error::Validation(format!(
            "{} holds labels, expected a scalar volume",
            header_path.display()
        ))),
    }
}

/// Convenience wrapper that insists on a label volume.
pub fn load_label_volume(header_path: &Path) -> Result<LabelVolume> {
    match load_volume(header_path)? {
        LoadedVolume::Labels(l) => Ok(l),
        LoadedVolume::Scalar(_) => Err(Error::Validation(format!(
            "{} holds scalars, expected a label volume",
            header_path.display()
        ))),
    }
}

/// Loads a 4D probability volume written by [`save_prob_volume`].
pub fn load_prob_volume(header_path: &Path) -> Result<ProbVolume> {
    let h = parse_header(header_path)?;
    if h.ndims != 4 || h.dim_size[0] != NUM_CLASSES {
        return Err(Error::MalformedHeader {
            path: header_path.to_path_buf(),
            msg: format!(
                "probability volumes are NDims 4 with leading dim {NUM_CLASSES}, got NDims {} DimSize {:?}",
                h.ndims, h.dim_size
            ),
        });
    }
    if h.element_type != "Float64" {
        return Err(Error::UnsupportedElementType {
            path: header_path.to_path_buf(),
            ty: h.element_type,
        });
    }
    let dims = (h.dim_size[1], h.dim_size[2], h.dim_size[3]);
    let spacing = (h.spacing[1], h.spacing[2], h.spacing[3]);
    let n = dims.0 * dims.1 * dims.2 * NUM_CLASSES;
    check_payload_len(header_path, &h.payload, n * 8)?;
    let probs: Vec<f64> = h
        .payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    ProbVolume::new(dims, spacing, probs)
}
