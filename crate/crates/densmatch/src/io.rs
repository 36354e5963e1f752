//! MetaImage volume I/O and the CSV energy trace.
//!
//! A volume is a plain-text header plus a raw block of floats, either in one
//! `.mha` file (`ElementDataFile = LOCAL`) or as an `.mhd` header next to a
//! `.raw` payload. The reader accepts 32- and 64-bit floats in either byte
//! order; the writer always emits 64-bit little-endian. Data are ordered
//! x-fastest, matching the in-memory layout of [`ScalarGrid`].
//!
//! Vector fields (deformation maps) travel as three scalar volumes with
//! `_x`/`_y`/`_z` appended to the file stem, holding absolute physical
//! positions rather than displacements.

use crate::error::{Error, Result};
use crate::grid::{GridGeometry, ScalarGrid, VectorGrid};
use crate::matching::TraceRow;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

/// Element type of the raw block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementType {
    Float32,
    Float64,
}

impl ElementType {
    fn byte_size(self) -> usize {
        match self {
            ElementType::Float32 => 4,
            ElementType::Float64 => 8,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            ElementType::Float32 => "MET_FLOAT",
            ElementType::Float64 => "MET_DOUBLE",
        }
    }
}

/// Where the raw block lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ElementData {
    /// Payload follows the header in the same file, starting at this byte.
    Local { offset: usize },
    /// Payload is a separate file, resolved relative to the header.
    External(PathBuf),
}

/// Parsed MetaImage header.
#[derive(Debug, Clone)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub element_type: ElementType,
    /// True when the payload is big-endian (`BinaryDataByteOrderMSB`).
    pub msb_byte_order: bool,
    pub data: ElementData,
}

fn parse_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_triple<T: std::str::FromStr>(path: &Path, key: &str, value: &str) -> Result<[T; 3]> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(parse_err(
            path,
            format!("{key} must have 3 entries, got {}", parts.len()),
        ));
    }
    let mut out: Vec<T> = Vec::with_capacity(3);
    for p in parts {
        out.push(
            p.parse()
                .map_err(|_| parse_err(path, format!("{key}: cannot parse `{p}`")))?,
        );
    }
    Ok([
        out.remove(0),
        out.remove(0),
        out.remove(0),
    ])
}

fn parse_bool(path: &Path, key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(parse_err(path, format!("{key}: expected True/False, got `{other}`"))),
    }
}

/// Parse the text header at the start of `bytes`. Header lines read
/// `Key = Value`; parsing stops at `ElementDataFile`, after which (for
/// `LOCAL`) the raw block begins. Unknown keys are ignored.
fn parse_header(path: &Path, bytes: &[u8]) -> Result<VolumeHeader> {
    let mut dims: Option<[usize; 3]> = None;
    let mut spacing = [1.0f64; 3];
    let mut origin = [0.0f64; 3];
    let mut element_type: Option<ElementType> = None;
    let mut msb = false;
    let mut ndims_seen = false;
    let mut pos = 0usize;

    while pos < bytes.len() {
        let rest = &bytes[pos..];
        let line_end = rest.iter().position(|&b| b == b'\n').unwrap_or(rest.len());
        let next_pos = pos + line_end + 1;
        let line = std::str::from_utf8(&rest[..line_end])
            .map_err(|_| parse_err(path, "non-UTF-8 bytes inside header"))?
            .trim_end_matches('\r');
        pos = next_pos;

        if line.trim().is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| parse_err(path, format!("header line without `=`: `{line}`")))?;
        let key = key.trim();
        let value = value.trim();

        match key {
            "ObjectType" => {
                if value != "Image" {
                    return Err(parse_err(path, format!("ObjectType must be Image, got `{value}`")));
                }
            }
            "NDims" => {
                if value != "3" {
                    return Err(parse_err(path, format!("NDims must be 3, got `{value}`")));
                }
                ndims_seen = true;
            }
            "DimSize" => dims = Some(parse_triple::<usize>(path, key, value)?),
            "ElementSpacing" => spacing = parse_triple::<f64>(path, key, value)?,
            "Offset" => origin = parse_triple::<f64>(path, key, value)?,
            "ElementType" => {
                element_type = Some(match value {
                    "MET_FLOAT" => ElementType::Float32,
                    "MET_DOUBLE" => ElementType::Float64,
                    other => {
                        return Err(Error::UnsupportedElementType {
                            path: path.to_path_buf(),
                            element_type: other.to_string(),
                        })
                    }
                })
            }
            "BinaryDataByteOrderMSB" => msb = parse_bool(path, key, value)?,
            "CompressedData" => {
                if parse_bool(path, key, value)? {
                    return Err(parse_err(path, "compressed data is not supported"));
                }
            }
            "ElementDataFile" => {
                let dims = dims.ok_or_else(|| parse_err(path, "missing DimSize"))?;
                let element_type =
                    element_type.ok_or_else(|| parse_err(path, "missing ElementType"))?;
                if !ndims_seen {
                    return Err(parse_err(path, "missing NDims"));
                }
                let data = if value == "LOCAL" {
                    ElementData::Local { offset: pos }
                } else {
                    let rel = PathBuf::from(value);
                    let resolved = if rel.is_absolute() {
                        rel
                    } else {
                        path.parent().unwrap_or_else(|| Path::new("")).join(rel)
                    };
                    ElementData::External(resolved)
                };
                return Ok(VolumeHeader {
                    dims,
                    spacing,
                    origin,
                    element_type,
                    msb_byte_order: msb,
                    data,
                });
            }
            _ => {}
        }
    }
    Err(parse_err(path, "missing ElementDataFile"))
}

fn decode_values(raw: &[u8], ty: ElementType, msb: bool) -> Vec<f64> {
    match ty {
        ElementType::Float32 => raw
            .chunks_exact(4)
            .map(|c| {
                let b = [c[0], c[1], c[2], c[3]];
                let v = if msb {
                    f32::from_be_bytes(b)
                } else {
                    f32::from_le_bytes(b)
                };
                v as f64
            })
            .collect(),
        ElementType::Float64 => raw
            .chunks_exact(8)
            .map(|c| {
                let b = [c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]];
                if msb {
                    f64::from_be_bytes(b)
                } else {
                    f64::from_le_bytes(b)
                }
            })
            .collect(),
    }
}

/// Read a MetaImage volume (`.mha`, or `.mhd` plus raw payload).
pub fn read_volume(path: &Path) -> Result<ScalarGrid> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let header = parse_header(path, &bytes)?;
    let count = header.dims.iter().try_fold(1u64, |acc, &d| {
        acc.checked_mul(d as u64)
    });
    let expected = count
        .and_then(|c| c.checked_mul(header.element_type.byte_size() as u64))
        .ok_or_else(|| parse_err(path, "DimSize product overflows"))?;

    let (raw, raw_path): (Vec<u8>, PathBuf) = match &header.data {
        ElementData::Local { offset } => (bytes[*offset..].to_vec(), path.to_path_buf()),
        ElementData::External(p) => (fs::read(p).map_err(io_err(p))?, p.clone()),
    };
    if raw.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            path: raw_path,
            expected,
            found: raw.len() as u64,
        });
    }

    let geometry = GridGeometry::new(header.dims, header.spacing, header.origin)?;
    ScalarGrid::new(geometry, decode_values(&raw, header.element_type, header.msb_byte_order))
}

fn header_text(g: &GridGeometry, data_file: &str) -> String {
    format!(
        "ObjectType = Image\n\
         NDims = 3\n\
         BinaryDataByteOrderMSB = False\n\
         CompressedData = False\n\
         DimSize = {} {} {}\n\
         ElementSpacing = {} {} {}\n\
         Offset = {} {} {}\n\
         ElementType = {}\n\
         ElementDataFile = {}\n",
        g.dims[0],
        g.dims[1],
        g.dims[2],
        g.spacing[0],
        g.spacing[1],
        g.spacing[2],
        g.origin[0],
        g.origin[1],
        g.origin[2],
        ElementType::Float64.tag(),
        data_file,
    )
}

fn encode_values(values: &[f64]) -> Vec<u8> {
    let mut raw = Vec::with_capacity(values.len() * 8);
    for v in values {
        raw.extend_from_slice(&v.to_le_bytes());
    }
    raw
}

/// Write a volume as 64-bit little-endian floats. A `.mha` path produces a
/// single self-contained file; any other extension produces a header plus a
/// sibling `.raw` payload.
pub fn write_volume(grid: &ScalarGrid, path: &Path) -> Result<()> {
    let local = path
        .extension()
        .map_or(false, |e| e.eq_ignore_ascii_case("mha"));
    if local {
        let mut out = header_text(grid.geometry(), "LOCAL").into_bytes();
        out.extend_from_slice(&encode_values(grid.values()));
        fs::write(path, out).map_err(io_err(path))
    } else {
        let raw_path = path.with_extension("raw");
        let raw_name = raw_path
            .file_name()
            .ok_or_else(|| parse_err(path, "path has no file name"))?
            .to_string_lossy()
            .into_owned();
        fs::write(path, header_text(grid.geometry(), &raw_name)).map_err(io_err(path))?;
        fs::write(&raw_path, encode_values(grid.values())).map_err(io_err(&raw_path))
    }
}

/// `map.mhd` -> `map_x.mhd` (etc.); a path without extension gets the bare
/// suffix.
fn component_path(path: &Path, suffix: &str) -> Result<PathBuf> {
    let stem = path
        .file_stem()
        .ok_or_else(|| parse_err(path, "path has no file name"))?
        .to_string_lossy();
    let mut name = format!("{stem}{suffix}");
    if let Some(ext) = path.extension() {
        name.push('.');
        name.push_str(&ext.to_string_lossy());
    }
    Ok(path.with_file_name(name))
}

/// Write a vector field as three scalar volumes suffixed `_x`, `_y`, `_z`.
pub fn write_vector_volume(field: &VectorGrid, path: &Path) -> Result<()> {
    for (axis, suffix) in ["_x", "_y", "_z"].iter().enumerate() {
        let grid = ScalarGrid::new(*field.geometry(), field.component(axis).to_vec())?;
        write_volume(&grid, &component_path(path, suffix)?)?;
    }
    Ok(())
}

/// Read a vector field written by [`write_vector_volume`]; the three volumes
/// must share one grid.
pub fn read_vector_volume(path: &Path) -> Result<VectorGrid> {
    let x = read_volume(&component_path(path, "_x")?)?;
    let y = read_volume(&component_path(path, "_y")?)?;
    let z = read_volume(&component_path(path, "_z")?)?;
    x.geometry().check_match(y.geometry())?;
    x.geometry().check_match(z.geometry())?;
    let geometry = *x.geometry();
    VectorGrid::new(
        geometry,
        [
            x.values().to_vec(),
            y.values().to_vec(),
            z.values().to_vec(),
        ],
    )
}

/// Write an energy trace as CSV with header `iter,e1,e2,total,step`. Floats
/// are printed with Rust's shortest round-trip formatting.
pub fn write_trace(rows: &[TraceRow], path: &Path) -> Result<()> {
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    let mut text = String::from("iter,e1,e2,total,step\n");
    for r in rows {
        text.push_str(&format!("{},{},{},{},{}\n", r.iter, r.e1, r.e2, r.total, r.step));
    }
    file.write_all(text.as_bytes()).map_err(io_err(path))
}
