//! File formats: JSON-sidecar raw volumes and fields, the JSON-lines loss
//! log, and PGM slice export.
//!
//! A volume `<name>.json` describes dims, spacing, dtype, ordering and
//! endianness; the packed payload lives in the adjacent `<name>.raw` (same
//! stem). Scalars are little-endian f32, labels u16; 3-vector fields add
//! `channels: 3` and `layout: "planar"`. Loading is strict: wrong order,
//! endianness, dtype, payload length, or non-finite values are format errors.

use crate::field::{DeformationField, VelocityField};
use crate::loss::LossBreakdown;
use crate::volume::{Dims, LabelMap, Volume};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

#[derive(Serialize, Deserialize)]
struct Header {
    dims: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
    order: String,
    endianness: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    layout: Option<String>,
}

fn raw_path(json_path: &Path) -> PathBuf {
    json_path.with_extension("raw")
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        message: message.into(),
    }
}

fn read_header(path: &Path) -> Result<Header> {
    let text = fs::read_to_string(path)?;
    let header: Header = serde_json::from_str(&text)?;
    if header.order != "x-fastest" {
        return Err(format_err(path, format!("unsupported order {:?}", header.order)));
    }
    if header.endianness != "little" {
        return Err(format_err(
            path,
            format!("unsupported endianness {:?}", header.endianness),
        ));
    }
    if header.dims.iter().any(|&n| n == 0) {
        return Err(format_err(path, "zero-sized dimension"));
    }
    Ok(header)
}

fn write_header(path: &Path, header: &Header) -> Result<()> {
    let mut text = serde_json::to_string_pretty(header)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_f32_payload(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() != expected * 4 {
        return Err(format_err(
            path,
            format!("payload is {} bytes, expected {}", bytes.len(), expected * 4),
        ));
    }
    let mut out = Vec::with_capacity(expected);
    for chunk in bytes.chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(format_err(path, "non-finite value in payload"));
        }
        out.push(f64::from(v));
    }
    Ok(out)
}

fn write_f32_payload(path: &Path, data: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for &v in data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Saves a scalar volume as `<path>` (JSON) plus the adjacent `.raw` payload.
/// The payload narrows to f32.
pub fn save_volume(vol: &Volume, json_path: impl AsRef<Path>) -> Result<()> {
    let json_path = json_path.as_ref();
    write_header(
        json_path,
        &Header {
            dims: [vol.dims.nx, vol.dims.ny, vol.dims.nz],
            spacing: vol.spacing,
            dtype: "f32".into(),
            order: "x-fastest".into(),
            endianness: "little".into(),
            channels: None,
            layout: None,
        },
    )?;
    write_f32_payload(&raw_path(json_path), vol.data())
}

pub fn load_volume(json_path: impl AsRef<Path>) -> Result<Volume> {
    let json_path = json_path.as_ref();
    let header = read_header(json_path)?;
    if header.dtype != "f32" {
        return Err(format_err(
            json_path,
            format!("expected dtype f32, got {:?}", header.dtype),
        ));
    }
    if header.channels.unwrap_or(1) != 1 {
        return Err(format_err(json_path, "expected a scalar volume"));
    }
    let dims = Dims::new(header.dims[0], header.dims[1], header.dims[2]);
    let data = read_f32_payload(&raw_path(json_path), dims.len())?;
    Volume::from_vec(dims, header.spacing, data)
}

pub fn save_labels(lm: &LabelMap, json_path: impl AsRef<Path>) -> Result<()> {
    let json_path = json_path.as_ref();
    write_header(
        json_path,
        &Header {
            dims: [lm.dims.nx, lm.dims.ny, lm.dims.nz],
            spacing: [1.0; 3],
            dtype: "u16".into(),
            order: "x-fastest".into(),
            endianness: "little".into(),
            channels: None,
            layout: None,
        },
    )?;
    let mut bytes = Vec::with_capacity(lm.data().len() * 2);
    for &l in lm.data() {
        bytes.extend_from_slice(&l.to_le_bytes());
    }
    fs::write(raw_path(json_path), bytes)?;
    Ok(())
}

pub fn load_labels(json_path: impl AsRef<Path>) -> Result<LabelMap> {
    let json_path = json_path.as_ref();
    let header = read_header(json_path)?;
    if header.dtype != "u16" {
        return Err(format_err(
            json_path,
            format!("expected dtype u16, got {:?}", header.dtype),
        ));
    }
    let dims = Dims::new(header.dims[0], header.dims[1], header.dims[2]);
    let path = raw_path(json_path);
    let bytes = fs::read(&path)?;
    if bytes.len() != dims.len() * 2 {
        return Err(format_err(
            &path,
            format!("payload is {} bytes, expected {}", bytes.len(), dims.len() * 2),
        ));
    }
    let data = bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
        .collect();
    LabelMap::from_vec(dims, data)
}

fn save_field_planar(dims: Dims, data: &[f64], json_path: &Path) -> Result<()> {
    write_header(
        json_path,
        &Header {
            dims: [dims.nx, dims.ny, dims.nz],
            spacing: [1.0; 3],
            dtype: "f32".into(),
            order: "x-fastest".into(),
            endianness: "little".into(),
            channels: Some(3),
            layout: Some("planar".into()),
        },
    )?;
    write_f32_payload(&raw_path(json_path), data)
}

fn load_field_planar(json_path: &Path) -> Result<(Dims, Vec<f64>)> {
    let header = read_header(json_path)?;
    if header.dtype != "f32" {
        return Err(format_err(
            json_path,
            format!("expected dtype f32, got {:?}", header.dtype),
        ));
    }
    if header.channels != Some(3) || header.layout.as_deref() != Some("planar") {
        return Err(format_err(
            json_path,
            "expected a planar 3-channel field header",
        ));
    }
    let dims = Dims::new(header.dims[0], header.dims[1], header.dims[2]);
    let data = read_f32_payload(&raw_path(json_path), 3 * dims.len())?;
    Ok((dims, data))
}

pub fn save_velocity(v: &VelocityField, json_path: impl AsRef<Path>) -> Result<()> {
    save_field_planar(v.dims, v.data(), json_path.as_ref())
}

pub fn load_velocity(json_path: impl AsRef<Path>) -> Result<VelocityField> {
    let (dims, data) = load_field_planar(json_path.as_ref())?;
    VelocityField::from_vec(dims, data)
}

pub fn save_deformation(d: &DeformationField, json_path: impl AsRef<Path>) -> Result<()> {
    save_field_planar(d.dims, d.data(), json_path.as_ref())
}

pub fn load_deformation(json_path: impl AsRef<Path>) -> Result<DeformationField> {
    let (dims, data) = load_field_planar(json_path.as_ref())?;
    DeformationField::from_vec(dims, data)
}

/// Appends nothing: writes the whole per-iteration loss history as JSON lines.
pub fn write_loss_log(history: &[LossBreakdown], path: impl AsRef<Path>) -> Result<()> {
    let mut file = fs::File::create(path)?;
    for (iter, bd) in history.iter().enumerate() {
        #[derive(Serialize)]
        struct Line<'a> {
            iter: usize,
            #[serde(flatten)]
            loss: &'a LossBreakdown,
        }
        let line = serde_json::to_string(&Line { iter, loss: bd })?;
        writeln!(file, "{line}")?;
    }
    Ok(())
}

/// Axis selector for slice export.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SliceAxis {
    X,
    Y,
    Z,
}

impl std::str::FromStr for SliceAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" | "X" => Ok(SliceAxis::X),
            "y" | "Y" => Ok(SliceAxis::Y),
            "z" | "Z" => Ok(SliceAxis::Z),
            other => Err(Error::InvalidParameter(format!("unknown axis {other:?}"))),
        }
    }
}

/// Extracts one plane of a volume: axis z gives pixel (i, j) = vol[i, j, k],
/// axis y gives vol[i, k, j], axis x gives vol[k, i, j].
pub fn volume_slice(vol: &Volume, axis: SliceAxis, index: usize) -> Result<(usize, usize, Vec<f64>)> {
    let d = vol.dims;
    let (w, h, depth) = match axis {
        SliceAxis::Z => (d.nx, d.ny, d.nz),
        SliceAxis::Y => (d.nx, d.nz, d.ny),
        SliceAxis::X => (d.ny, d.nz, d.nx),
    };
    if index >= depth {
        return Err(Error::InvalidParameter(format!(
            "slice index {index} out of range (axis length {depth})"
        )));
    }
    let mut pixels = Vec::with_capacity(w * h);
    for j in 0..h {
        for i in 0..w {
            let v = match axis {
                SliceAxis::Z => vol.at(i, j, index),
                SliceAxis::Y => vol.at(i, index, j),
                SliceAxis::X => vol.at(index, i, j),
            };
            pixels.push(v);
        }
    }
    Ok((w, h, pixels))
}

/// Writes an 8-bit binary PGM of one slice, rescaling [min, max] → [0, 255].
/// Lossy by design; intended for human inspection.
pub fn write_pgm_slice(
    vol: &Volume,
    axis: SliceAxis,
    index: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    let (w, h, pixels) = volume_slice(vol, axis, index)?;
    let lo = pixels.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = pixels.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(
        pixels
            .iter()
            .map(|&v| ((v - lo) * scale).round().clamp(0.0, 255.0) as u8),
    );
    fs::write(path, bytes)?;
    Ok(())
}
