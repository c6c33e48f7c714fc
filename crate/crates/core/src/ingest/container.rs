//! FLXQA tensor container: the cross-language fixture interchange format.
//!
//! Layout, fixed byte-for-byte:
//!
//! ```text
//! bytes 0..8   magic "FLXQA\0\01"
//! then         ASCII header lines "key: value\n", one per key
//! then         a single blank line ("\n")
//! then         zero padding so the payload starts on a 64-byte multiple
//!              (counted from the start of the file)
//! then         payload: values packed little-endian in storage order
//! ```
//!
//! Header keys by kind:
//! `grid3`: kind, dtype (f32|f64), dims "nx ny nz", spacing, origin, unit.
//! `fluence`: kind, dtype (f32|f64), dims "rows cols", spacing "su sv",
//!            origin "u0 v0", beam_index, gantry_angle.
//! `mask`: kind, dtype (u8), dims, spacing, origin, name.
//!
//! Floats in the header use Rust's shortest round-trip formatting, so a
//! write/parse cycle reproduces geometry bit-exactly; an f64 payload
//! reproduces values bit-exactly, the f32 default quantizes to f32.

use super::{IngestError, MAX_DECLARED_VOXELS};
use crate::volgrid::{FluenceMap, Grid3, Mask3, Unit};

pub const CONTAINER_MAGIC: [u8; 8] = *b"FLXQA\0\01";
const ALIGN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ContainerDtype {
    #[default]
    F32,
    F64,
    U8,
}

impl ContainerDtype {
    fn as_str(&self) -> &'static str {
        match self {
            ContainerDtype::F32 => "f32",
            ContainerDtype::F64 => "f64",
            ContainerDtype::U8 => "u8",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(ContainerDtype::F32),
            "f64" => Some(ContainerDtype::F64),
            "u8" => Some(ContainerDtype::U8),
            _ => None,
        }
    }

    fn size(&self) -> usize {
        match self {
            ContainerDtype::F32 => 4,
            ContainerDtype::F64 => 8,
            ContainerDtype::U8 => 1,
        }
    }
}

/// Decoded container contents.
#[derive(Debug, Clone, PartialEq)]
pub enum ContainerPayload {
    Grid(Grid3),
    Fluence(FluenceMap),
    Mask(Mask3),
}

fn push_header(out: &mut String, key: &str, value: impl std::fmt::Display) {
    out.push_str(key);
    out.push_str(": ");
    out.push_str(&value.to_string());
    out.push('\n');
}

fn assemble(header: String, payload: Vec<u8>) -> Vec<u8> {
    let mut out = Vec::with_capacity(ALIGN + header.len() + payload.len());
    out.extend_from_slice(&CONTAINER_MAGIC);
    out.extend_from_slice(header.as_bytes());
    out.push(b'\n'); // blank terminator line
    while out.len() % ALIGN != 0 {
        out.push(0);
    }
    out.extend_from_slice(&payload);
    out
}

fn encode_values(values: &[f64], dtype: ContainerDtype) -> Result<Vec<u8>, IngestError> {
    let mut payload = Vec::with_capacity(values.len() * dtype.size());
    match dtype {
        ContainerDtype::F32 => {
            for &v in values {
                let f = v as f32;
                if !f.is_finite() {
                    return Err(IngestError::Corrupt(format!(
                        "value {v} does not fit in f32"
                    )));
                }
                payload.extend_from_slice(&f.to_le_bytes());
            }
        }
        ContainerDtype::F64 => {
            for &v in values {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        ContainerDtype::U8 => {
            return Err(IngestError::Corrupt(
                "u8 payloads are reserved for masks".into(),
            ))
        }
    }
    Ok(payload)
}

/// Serializes a dose/CT/gamma grid. `dtype` must be `F32` (default) or `F64`.
pub fn write_grid_container(grid: &Grid3, dtype: ContainerDtype) -> Result<Vec<u8>, IngestError> {
    let (nx, ny, nz) = grid.dims();
    let (sx, sy, sz) = grid.spacing();
    let (ox, oy, oz) = grid.origin();
    let mut h = String::new();
    push_header(&mut h, "kind", "grid3");
    push_header(&mut h, "dtype", dtype.as_str());
    push_header(&mut h, "dims", format_args!("{nx} {ny} {nz}"));
    push_header(&mut h, "spacing", format_args!("{sx} {sy} {sz}"));
    push_header(&mut h, "origin", format_args!("{ox} {oy} {oz}"));
    push_header(&mut h, "unit", grid.unit().as_str());
    Ok(assemble(h, encode_values(grid.values(), dtype)?))
}

/// Serializes a fluence map. `dtype` must be `F32` (default) or `F64`.
pub fn write_fluence_container(
    map: &FluenceMap,
    dtype: ContainerDtype,
) -> Result<Vec<u8>, IngestError> {
    let mut h = String::new();
    push_header(&mut h, "kind", "fluence");
    push_header(&mut h, "dtype", dtype.as_str());
    push_header(&mut h, "dims", format_args!("{} {}", map.rows(), map.cols()));
    push_header(
        &mut h,
        "spacing",
        format_args!("{} {}", map.spacing().0, map.spacing().1),
    );
    push_header(
        &mut h,
        "origin",
        format_args!("{} {}", map.origin().0, map.origin().1),
    );
    push_header(&mut h, "beam_index", map.beam_index);
    push_header(&mut h, "gantry_angle", map.gantry_angle);
    Ok(assemble(h, encode_values(map.values(), dtype)?))
}

/// Serializes a binary structure mask (always u8 payload, one byte per voxel).
pub fn write_mask_container(mask: &Mask3) -> Vec<u8> {
    let (nx, ny, nz) = mask.dims();
    let (sx, sy, sz) = mask.spacing();
    let (ox, oy, oz) = mask.origin();
    let mut h = String::new();
    push_header(&mut h, "kind", "mask");
    push_header(&mut h, "dtype", "u8");
    push_header(&mut h, "dims", format_args!("{nx} {ny} {nz}"));
    push_header(&mut h, "spacing", format_args!("{sx} {sy} {sz}"));
    push_header(&mut h, "origin", format_args!("{ox} {oy} {oz}"));
    push_header(&mut h, "name", mask.name());
    let payload: Vec<u8> = mask.values().iter().map(|&b| b as u8).collect();
    assemble(h, payload)
}

struct Header {
    entries: Vec<(String, String)>,
    payload_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header, IngestError> {
    if bytes.len() < CONTAINER_MAGIC.len() || bytes[..8] != CONTAINER_MAGIC {
        return Err(IngestError::NotContainer);
    }
    let mut entries = Vec::new();
    let mut pos = CONTAINER_MAGIC.len();
    loop {
        let rest = &bytes[pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| IngestError::Corrupt("unterminated header".into()))?;
        let line = &rest[..nl];
        pos += nl + 1;
        if line.is_empty() {
            break; // blank terminator
        }
        let line = std::str::from_utf8(line)
            .map_err(|_| IngestError::Corrupt("non-UTF8 header line".into()))?;
        let (key, value) = line
            .split_once(": ")
            .ok_or_else(|| IngestError::Corrupt(format!("malformed header line '{line}'")))?;
        entries.push((key.to_string(), value.to_string()));
        if entries.len() > 32 {
            return Err(IngestError::Corrupt("header has too many entries".into()));
        }
    }
    let payload_start = pos.div_ceil(ALIGN) * ALIGN;
    if payload_start > bytes.len() {
        return Err(IngestError::Corrupt("truncated header padding".into()));
    }
    if bytes[pos..payload_start].iter().any(|&b| b != 0) {
        return Err(IngestError::Corrupt("non-zero header padding".into()));
    }
    Ok(Header {
        entries,
        payload_start,
    })
}

impl Header {
    fn get(&self, key: &str) -> Result<&str, IngestError> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| IngestError::Parse(format!("missing header key '{key}'")))
    }

    fn floats(&self, key: &str, n: usize) -> Result<Vec<f64>, IngestError> {
        let v: Result<Vec<f64>, _> = self
            .get(key)?
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| IngestError::Parse(format!("non-numeric '{t}' in '{key}'")))
            })
            .collect();
        let v = v?;
        if v.len() != n {
            return Err(IngestError::Corrupt(format!(
                "'{key}' has {} components, expected {n}",
                v.len()
            )));
        }
        Ok(v)
    }

    fn dims(&self, n: usize) -> Result<Vec<usize>, IngestError> {
        let v: Result<Vec<usize>, _> = self
            .get("dims")?
            .split_whitespace()
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| IngestError::Parse(format!("non-integer dim '{t}'")))
            })
            .collect();
        let v = v?;
        if v.len() != n {
            return Err(IngestError::Corrupt(format!(
                "dims has {} components, expected {n}",
                v.len()
            )));
        }
        let total: usize = v.iter().try_fold(1usize, |acc, &d| {
            acc.checked_mul(d)
                .ok_or_else(|| IngestError::Corrupt("dims overflow".into()))
        })?;
        if total > MAX_DECLARED_VOXELS {
            return Err(IngestError::Corrupt(format!(
                "declared {total} voxels exceeds cap"
            )));
        }
        Ok(v)
    }
}

fn decode_values(
    payload: &[u8],
    dtype: ContainerDtype,
    count: usize,
) -> Result<Vec<f64>, IngestError> {
    let expected = count * dtype.size();
    if payload.len() != expected {
        return Err(IngestError::Corrupt(format!(
            "payload length {} != dtype size x dims product {expected}",
            payload.len()
        )));
    }
    Ok(match dtype {
        ContainerDtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        ContainerDtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect(),
        ContainerDtype::U8 => payload.iter().map(|&b| b as f64).collect(),
    })
}

/// Decodes any FLXQA container. Returns [`IngestError::NotContainer`] when
/// the magic is absent, so callers can fall back to other formats.
pub fn parse_container(bytes: &[u8]) -> Result<ContainerPayload, IngestError> {
    let header = parse_header(bytes)?;
    let payload = &bytes[header.payload_start..];
    let dtype = ContainerDtype::parse(header.get("dtype")?)
        .ok_or_else(|| IngestError::Parse(format!("unknown dtype '{}'", header.get("dtype")?)))?;

    match header.get("kind")? {
        "grid3" => {
            if dtype == ContainerDtype::U8 {
                return Err(IngestError::Corrupt("grid3 payload cannot be u8".into()));
            }
            let d = header.dims(3)?;
            let s = header.floats("spacing", 3)?;
            let o = header.floats("origin", 3)?;
            let unit = Unit::parse(header.get("unit")?).ok_or_else(|| {
                IngestError::Parse(format!("unknown unit '{}'", header.get("unit").unwrap()))
            })?;
            let values = decode_values(payload, dtype, d[0] * d[1] * d[2])?;
            Ok(ContainerPayload::Grid(Grid3::new(
                (d[0], d[1], d[2]),
                (s[0], s[1], s[2]),
                (o[0], o[1], o[2]),
                unit,
                values,
            )?))
        }
        "fluence" => {
            if dtype == ContainerDtype::U8 {
                return Err(IngestError::Corrupt("fluence payload cannot be u8".into()));
            }
            let d = header.dims(2)?;
            let s = header.floats("spacing", 2)?;
            let o = header.floats("origin", 2)?;
            let beam_index = header.get("beam_index")?.parse::<u8>().map_err(|_| {
                IngestError::Parse("non-integer beam_index".into())
            })?;
            let gantry = header.floats("gantry_angle", 1)?[0];
            let values = decode_values(payload, dtype, d[0] * d[1])?;
            Ok(ContainerPayload::Fluence(FluenceMap::new(
                beam_index,
                gantry,
                d[0],
                d[1],
                (s[0], s[1]),
                (o[0], o[1]),
                values,
            )?))
        }
        "mask" => {
            if dtype != ContainerDtype::U8 {
                return Err(IngestError::Corrupt("mask payload must be u8".into()));
            }
            let d = header.dims(3)?;
            let s = header.floats("spacing", 3)?;
            let o = header.floats("origin", 3)?;
            let name = header.get("name")?.to_string();
            let count = d[0] * d[1] * d[2];
            if payload.len() != count {
                return Err(IngestError::Corrupt(format!(
                    "mask payload length {} != {count}",
                    payload.len()
                )));
            }
            let mut values = Vec::with_capacity(count);
            for &b in payload {
                match b {
                    0 => values.push(false),
                    1 => values.push(true),
                    other => {
                        return Err(IngestError::Corrupt(format!(
                            "mask byte {other} is not 0/1"
                        )))
                    }
                }
            }
            Ok(ContainerPayload::Mask(Mask3::from_parts(
                (d[0], d[1], d[2]),
                (s[0], s[1], s[2]),
                (o[0], o[1], o[2]),
                name,
                values,
            )?))
        }
        other => Err(IngestError::Parse(format!("unknown kind '{other}'"))),
    }
}
