//! Minimal DICOM RTDOSE reader/writer.
//!
//! Supported subset: Part-10 files (128-byte preamble + "DICM"), Explicit VR
//! Little Endian transfer syntax, uncompressed 16- or 32-bit unsigned pixel
//! data, and the tags needed to reconstruct dose geometry. The writer emits
//! 16-bit unsigned pixels with `DoseGridScaling = max / 65535`, so a
//! write/parse round trip reproduces values within `scaling / 2`.

use super::{IngestError, MAX_DECLARED_VOXELS};
use crate::volgrid::{Grid3, Unit};

const TRANSFER_SYNTAX_EXPLICIT_LE: &str = "1.2.840.10008.1.2.1";
const SOP_CLASS_RT_DOSE: &str = "1.2.840.10008.5.1.4.1.1.481.2";

/// Geometry and scaling metadata carried by an RTDOSE file.
#[derive(Debug, Clone, PartialEq)]
pub struct RtDoseMeta {
    pub rows: usize,
    pub cols: usize,
    pub frames: usize,
    /// (row_mm, col_mm) — DICOM PixelSpacing order: between-rows first.
    pub pixel_spacing: (f64, f64),
    pub frame_offsets: Vec<f64>,
    pub dose_grid_scaling: f64,
    pub image_position: (f64, f64, f64),
    pub bits_allocated: u16,
    /// 0 = unsigned, 1 = signed two's complement.
    pub pixel_representation: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Tag(u16, u16);

impl Tag {
    fn name(self) -> String {
        format!("({:04X},{:04X})", self.0, self.1)
    }
}

const TAG_TRANSFER_SYNTAX: Tag = Tag(0x0002, 0x0010);
const TAG_IMAGE_POSITION: Tag = Tag(0x0020, 0x0032);
const TAG_NUMBER_OF_FRAMES: Tag = Tag(0x0028, 0x0008);
const TAG_ROWS: Tag = Tag(0x0028, 0x0010);
const TAG_COLUMNS: Tag = Tag(0x0028, 0x0011);
const TAG_PIXEL_SPACING: Tag = Tag(0x0028, 0x0030);
const TAG_BITS_ALLOCATED: Tag = Tag(0x0028, 0x0100);
const TAG_PIXEL_REPRESENTATION: Tag = Tag(0x0028, 0x0103);
const TAG_GRID_FRAME_OFFSETS: Tag = Tag(0x3004, 0x000C);
const TAG_DOSE_GRID_SCALING: Tag = Tag(0x3004, 0x000E);
const TAG_PIXEL_DATA: Tag = Tag(0x7FE0, 0x0010);

/// Bounds-checked cursor over the input buffer.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], IngestError> {
        if self.remaining() < n {
            return Err(IngestError::Corrupt(format!(
                "unexpected end of file at byte {} (need {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16_le(&mut self) -> Result<u16, IngestError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32_le(&mut self) -> Result<u32, IngestError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

struct Element<'a> {
    tag: Tag,
    vr: [u8; 2],
    value: &'a [u8],
}

/// Reads one Explicit VR Little Endian element.
fn read_element<'a>(cur: &mut Cursor<'a>) -> Result<Element<'a>, IngestError> {
    let group = cur.u16_le()?;
    let elem = cur.u16_le()?;
    let tag = Tag(group, elem);
    let vr_bytes = cur.take(2)?;
    let vr = [vr_bytes[0], vr_bytes[1]];
    if !vr.iter().all(|b| b.is_ascii_uppercase()) {
        return Err(IngestError::Parse(format!(
            "invalid VR {:?} at tag {}; only Explicit VR Little Endian is supported",
            vr,
            tag.name()
        )));
    }
    let len = match &vr {
        b"OB" | b"OW" | b"OF" | b"SQ" | b"UT" | b"UN" => {
            cur.take(2)?; // reserved
            let len = cur.u32_le()?;
            if len == 0xFFFF_FFFF {
                return Err(IngestError::Unsupported(format!(
                    "undefined-length element at tag {}",
                    tag.name()
                )));
            }
            len as usize
        }
        _ => cur.u16_le()? as usize,
    };
    let value = cur.take(len)?;
    Ok(Element { tag, vr, value })
}

fn ascii_value(el: &Element<'_>) -> Result<String, IngestError> {
    let s = std::str::from_utf8(el.value)
        .map_err(|_| IngestError::Parse(format!("non-ASCII value in tag {}", el.tag.name())))?;
    Ok(s.trim_matches(|c: char| c == ' ' || c == '\0').to_string())
}

fn parse_ds_multi(el: &Element<'_>) -> Result<Vec<f64>, IngestError> {
    ascii_value(el)?
        .split('\\')
        .map(|tok| {
            tok.trim().parse::<f64>().map_err(|_| {
                IngestError::Parse(format!(
                    "non-numeric DS value '{tok}' in tag {}",
                    el.tag.name()
                ))
            })
        })
        .collect()
}

fn parse_us(el: &Element<'_>) -> Result<u16, IngestError> {
    if el.value.len() != 2 {
        return Err(IngestError::Corrupt(format!(
            "US tag {} has length {}",
            el.tag.name(),
            el.value.len()
        )));
    }
    Ok(u16::from_le_bytes([el.value[0], el.value[1]]))
}

/// Parses a Part-10 RTDOSE file into a dose grid in Gy.
pub fn parse_rtdose(bytes: &[u8]) -> Result<Grid3, IngestError> {
    let (grid, _) = parse_rtdose_with_meta(bytes)?;
    Ok(grid)
}

/// As [`parse_rtdose`], also returning the decoded header metadata.
pub fn parse_rtdose_with_meta(bytes: &[u8]) -> Result<(Grid3, RtDoseMeta), IngestError> {
    if bytes.len() < 132 || &bytes[128..132] != b"DICM" {
        return Err(IngestError::Parse(
            "missing DICOM preamble/DICM marker".into(),
        ));
    }
    let mut cur = Cursor::new(bytes);
    cur.pos = 132;

    // File meta group (0002,xxxx) is always Explicit VR LE.
    let mut transfer_syntax: Option<String> = None;
    while cur.remaining() >= 8 {
        let peek_group = u16::from_le_bytes([bytes[cur.pos], bytes[cur.pos + 1]]);
        if peek_group != 0x0002 {
            break;
        }
        let el = read_element(&mut cur)?;
        if el.tag == TAG_TRANSFER_SYNTAX {
            transfer_syntax = Some(ascii_value(&el)?);
        }
    }
    let ts = transfer_syntax
        .ok_or_else(|| IngestError::Parse(format!("missing tag {}", TAG_TRANSFER_SYNTAX.name())))?;
    if ts != TRANSFER_SYNTAX_EXPLICIT_LE {
        return Err(IngestError::Unsupported(format!(
            "transfer syntax {ts}; only Explicit VR Little Endian is supported"
        )));
    }

    let mut rows: Option<u16> = None;
    let mut cols: Option<u16> = None;
    let mut frames: Option<usize> = None;
    let mut pixel_spacing: Option<(f64, f64)> = None;
    let mut bits_allocated: Option<u16> = None;
    let mut pixel_representation: Option<u16> = None;
    let mut image_position: Option<(f64, f64, f64)> = None;
    let mut frame_offsets: Option<Vec<f64>> = None;
    let mut scaling: Option<f64> = None;
    let mut pixel_data: Option<&[u8]> = None;

    while cur.remaining() >= 8 {
        let el = read_element(&mut cur)?;
        match el.tag {
            TAG_ROWS => rows = Some(parse_us(&el)?),
            TAG_COLUMNS => cols = Some(parse_us(&el)?),
            TAG_NUMBER_OF_FRAMES => {
                let s = ascii_value(&el)?;
                frames = Some(s.parse::<usize>().map_err(|_| {
                    IngestError::Parse(format!("non-integer NumberOfFrames '{s}'"))
                })?);
            }
            TAG_PIXEL_SPACING => {
                let v = parse_ds_multi(&el)?;
                if v.len() != 2 {
                    return Err(IngestError::Corrupt(format!(
                        "PixelSpacing has {} values, expected 2",
                        v.len()
                    )));
                }
                pixel_spacing = Some((v[0], v[1]));
            }
            TAG_BITS_ALLOCATED => bits_allocated = Some(parse_us(&el)?),
            TAG_PIXEL_REPRESENTATION => pixel_representation = Some(parse_us(&el)?),
            TAG_IMAGE_POSITION => {
                let v = parse_ds_multi(&el)?;
                if v.len() != 3 {
                    return Err(IngestError::Corrupt(format!(
                        "ImagePositionPatient has {} values, expected 3",
                        v.len()
                    )));
                }
                image_position = Some((v[0], v[1], v[2]));
            }
            TAG_GRID_FRAME_OFFSETS => frame_offsets = Some(parse_ds_multi(&el)?),
            TAG_DOSE_GRID_SCALING => {
                let v = parse_ds_multi(&el)?;
                scaling = Some(*v.first().ok_or_else(|| {
                    IngestError::Parse("empty DoseGridScaling".into())
                })?);
            }
            TAG_PIXEL_DATA => {
                pixel_data = Some(el.value);
                break;
            }
            _ => {} // skip tags outside the subset
        }
    }

    macro_rules! require {
        ($opt:expr, $tag:expr) => {
            $opt.ok_or_else(|| IngestError::Parse(format!("missing tag {}", $tag.name())))?
        };
    }
    let rows = require!(rows, TAG_ROWS) as usize;
    let cols = require!(cols, TAG_COLUMNS) as usize;
    let frames = require!(frames, TAG_NUMBER_OF_FRAMES);
    let pixel_spacing = require!(pixel_spacing, TAG_PIXEL_SPACING);
    let bits_allocated = require!(bits_allocated, TAG_BITS_ALLOCATED);
    let pixel_representation = require!(pixel_representation, TAG_PIXEL_REPRESENTATION);
    let image_position = require!(image_position, TAG_IMAGE_POSITION);
    let frame_offsets = require!(frame_offsets, TAG_GRID_FRAME_OFFSETS);
    let dose_grid_scaling = require!(scaling, TAG_DOSE_GRID_SCALING);
    let pixel_data = require!(pixel_data, TAG_PIXEL_DATA);

    if rows == 0 || cols == 0 || frames == 0 {
        return Err(IngestError::Corrupt("zero-sized dose grid".into()));
    }
    let voxels = rows
        .checked_mul(cols)
        .and_then(|v| v.checked_mul(frames))
        .ok_or_else(|| IngestError::Corrupt("dose grid dimension overflow".into()))?;
    if voxels > MAX_DECLARED_VOXELS {
        return Err(IngestError::Corrupt(format!(
            "declared voxel count {voxels} exceeds cap {MAX_DECLARED_VOXELS}"
        )));
    }
    if frame_offsets.len() != frames {
        return Err(IngestError::Corrupt(format!(
            "GridFrameOffsetVector length {} != NumberOfFrames {frames}",
            frame_offsets.len()
        )));
    }
    if !(dose_grid_scaling.is_finite() && dose_grid_scaling > 0.0) {
        return Err(IngestError::Corrupt(format!(
            "DoseGridScaling must be > 0, got {dose_grid_scaling}"
        )));
    }
    if pixel_representation != 0 {
        return Err(IngestError::Unsupported(
            "signed pixel data is not supported".into(),
        ));
    }

    // Frame offsets must be strictly increasing and uniform; Grid3 carries a
    // single z spacing.
    let sz = if frames > 1 {
        let first = frame_offsets[1] - frame_offsets[0];
        if first <= 0.0 {
            return Err(IngestError::Corrupt(
                "GridFrameOffsetVector must be strictly increasing".into(),
            ));
        }
        for w in frame_offsets.windows(2) {
            let d = w[1] - w[0];
            if d <= 0.0 {
                return Err(IngestError::Corrupt(
                    "GridFrameOffsetVector must be strictly increasing".into(),
                ));
            }
            if (d - first).abs() > 1e-6 * first.abs().max(1.0) {
                return Err(IngestError::Unsupported(
                    "non-uniform frame offsets".into(),
                ));
            }
        }
        first
    } else {
        1.0 // single frame: z spacing is undetermined; any positive value works
    };

    let bytes_per = match bits_allocated {
        16 => 2,
        32 => 4,
        other => {
            return Err(IngestError::Unsupported(format!(
                "BitsAllocated {other}; only 16 or 32 supported"
            )))
        }
    };
    let expected_len = voxels * bytes_per;
    // Writers pad PixelData to even length; a 16/32-bit grid is already even.
    if pixel_data.len() != expected_len {
        return Err(IngestError::Corrupt(format!(
            "PixelData length {} != {expected_len} ({rows}x{cols}x{frames} at {bits_allocated} bits)",
            pixel_data.len()
        )));
    }

    let mut values = Vec::with_capacity(voxels);
    match bits_allocated {
        16 => {
            for chunk in pixel_data.chunks_exact(2) {
                let stored = u16::from_le_bytes([chunk[0], chunk[1]]);
                values.push(stored as f64 * dose_grid_scaling);
            }
        }
        _ => {
            for chunk in pixel_data.chunks_exact(4) {
                let stored = u32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
                values.push(stored as f64 * dose_grid_scaling);
            }
        }
    }

    let z0 = image_position.2 + frame_offsets[0];
    let grid = Grid3::new(
        (cols, rows, frames),
        (pixel_spacing.1, pixel_spacing.0, sz),
        (image_position.0, image_position.1, z0),
        Unit::Gy,
        values,
    )?;
    let meta = RtDoseMeta {
        rows,
        cols,
        frames,
        pixel_spacing,
        frame_offsets,
        dose_grid_scaling,
        image_position,
        bits_allocated,
        pixel_representation,
    };
    Ok((grid, meta))
}

/// Formats a float as a DICOM DS value (<= 16 ASCII chars).
fn format_ds(v: f64) -> String {
    let s = format!("{v}");
    if s.len() <= 16 {
        s
    } else {
        format!("{v:.9e}")
    }
}

struct Writer {
    out: Vec<u8>,
}

impl Writer {
    fn element_short(&mut self, tag: Tag, vr: &[u8; 2], value: &[u8]) {
        debug_assert!(value.len() % 2 == 0 && value.len() <= u16::MAX as usize);
        self.out.extend_from_slice(&tag.0.to_le_bytes());
        self.out.extend_from_slice(&tag.1.to_le_bytes());
        self.out.extend_from_slice(vr);
        self.out
            .extend_from_slice(&(value.len() as u16).to_le_bytes());
        self.out.extend_from_slice(value);
    }

    fn element_long(&mut self, tag: Tag, vr: &[u8; 2], value: &[u8]) {
        debug_assert!(value.len() % 2 == 0);
        self.out.extend_from_slice(&tag.0.to_le_bytes());
        self.out.extend_from_slice(&tag.1.to_le_bytes());
        self.out.extend_from_slice(vr);
        self.out.extend_from_slice(&[0, 0]);
        self.out
            .extend_from_slice(&(value.len() as u32).to_le_bytes());
        self.out.extend_from_slice(value);
    }

    fn text(&mut self, tag: Tag, vr: &[u8; 2], s: &str) {
        let mut bytes = s.as_bytes().to_vec();
        if bytes.len() % 2 != 0 {
            // UI pads with NUL, string VRs pad with space
            bytes.push(if vr == b"UI" { 0 } else { b' ' });
        }
        self.element_short(tag, vr, &bytes);
    }

    fn us(&mut self, tag: Tag, v: u16) {
        self.element_short(tag, b"US", &v.to_le_bytes());
    }
}

/// Serializes a Gy dose grid as a minimal Explicit-VR-Little-Endian RTDOSE
/// file with 16-bit unsigned pixels. Negative dose values are rejected.
pub fn write_rtdose(grid: &Grid3) -> Result<Vec<u8>, IngestError> {
    if grid.unit() != Unit::Gy {
        return Err(IngestError::Parse(format!(
            "RTDOSE export requires a Gy grid, got {}",
            grid.unit().as_str()
        )));
    }
    if grid.values().iter().any(|&v| v < 0.0) {
        return Err(IngestError::Parse(
            "RTDOSE export rejects negative dose values".into(),
        ));
    }
    let (nx, ny, nz) = grid.dims();
    let (sx, sy, sz) = grid.spacing();
    let (ox, oy, oz) = grid.origin();
    let max = grid.max_value();
    let scaling = if max > 0.0 { max / 65535.0 } else { 1.0 };

    let mut meta = Writer { out: Vec::new() };
    meta.text(Tag(0x0002, 0x0002), b"UI", SOP_CLASS_RT_DOSE);
    meta.text(Tag(0x0002, 0x0003), b"UI", "1.2.826.0.1.3680043.9.7435.1.1");
    meta.text(TAG_TRANSFER_SYNTAX, b"UI", TRANSFER_SYNTAX_EXPLICIT_LE);
    let meta_group = meta.out;

    let mut w = Writer {
        out: vec![0u8; 128],
    };
    w.out.extend_from_slice(b"DICM");
    w.element_short(
        Tag(0x0002, 0x0000),
        b"UL",
        &(meta_group.len() as u32).to_le_bytes(),
    );
    w.out.extend_from_slice(&meta_group);

    w.text(TAG_IMAGE_POSITION, b"DS", &format!(
        "{}\\{}\\{}",
        format_ds(ox),
        format_ds(oy),
        format_ds(oz)
    ));
    w.text(TAG_NUMBER_OF_FRAMES, b"IS", &nz.to_string());
    w.us(TAG_ROWS, ny as u16);
    w.us(TAG_COLUMNS, nx as u16);
    // PixelSpacing is row spacing (y) then column spacing (x).
    w.text(
        TAG_PIXEL_SPACING,
        b"DS",
        &format!("{}\\{}", format_ds(sy), format_ds(sx)),
    );
    w.us(TAG_BITS_ALLOCATED, 16);
    w.us(TAG_PIXEL_REPRESENTATION, 0);
    let offsets: Vec<String> = (0..nz).map(|k| format_ds(k as f64 * sz)).collect();
    w.text(TAG_GRID_FRAME_OFFSETS, b"DS", &offsets.join("\\"));
    w.text(TAG_DOSE_GRID_SCALING, b"DS", &format_ds(scaling));

    let mut pixels = Vec::with_capacity(grid.len() * 2);
    for &v in grid.values() {
        let stored = (v / scaling).round().clamp(0.0, 65535.0) as u16;
        pixels.extend_from_slice(&stored.to_le_bytes());
    }
    w.element_long(TAG_PIXEL_DATA, b"OW", &pixels);

    Ok(w.out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_grid() -> Grid3 {
        Grid3::from_fn(
            (3, 2, 2),
            (2.0, 2.5, 3.0),
            (-1.0, -2.0, 5.0),
            Unit::Gy,
            |x, y, z| (x + 10.0) * 0.1 + y.abs() * 0.02 + z * 0.3,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_within_quantization() {
        let grid = small_grid();
        let bytes = write_rtdose(&grid).unwrap();
        let (back, meta) = parse_rtdose_with_meta(&bytes).unwrap();
        assert_eq!(back.dims(), grid.dims());
        assert!((back.spacing().0 - grid.spacing().0).abs() < 1e-12);
        assert!((back.origin().2 - grid.origin().2).abs() < 1e-12);
        let tol = meta.dose_grid_scaling / 2.0 + 1e-12;
        for (a, b) in back.values().iter().zip(grid.values()) {
            assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
        }
    }

    #[test]
    fn zero_length_input_is_parse_error() {
        match parse_rtdose(&[]) {
            Err(IngestError::Parse(msg)) => assert!(msg.contains("preamble")),
            other => panic!("expected ParseError, got {other:?}"),
        }
    }

    #[test]
    fn single_voxel_hand_fixture() {
        // 1x1x1 grid, stored value 1234 at scaling 0.01 -> 12.34 Gy.
        let grid = Grid3::new(
            (1, 1, 1),
            (1.0, 1.0, 1.0),
            (0.0, 0.0, 0.0),
            Unit::Gy,
            vec![12.34],
        )
        .unwrap();
        let mut bytes = write_rtdose(&grid).unwrap();
        // Overwrite scaling and the stored pixel by hand to pin the decode math.
        let scaling_pat = format_ds(12.34 / 65535.0);
        let pos = find(&bytes, scaling_pat.as_bytes());
        patch_ds(&mut bytes, pos, &scaling_pat, "0.01");
        let n = bytes.len();
        bytes[n - 2..].copy_from_slice(&1234u16.to_le_bytes());
        // element length needs no change: DS replaced in-place with padding
        let parsed = parse_rtdose(&bytes).unwrap();
        assert!((parsed.values()[0] - 12.34).abs() < 1e-12);
    }

    fn find(hay: &[u8], needle: &[u8]) -> usize {
        hay.windows(needle.len())
            .position(|w| w == needle)
            .expect("pattern present")
    }

    /// Replaces a DS string in place, space-padding to the original length and
    /// fixing up the element length field (2 bytes before the value start).
    fn patch_ds(bytes: &mut [u8], pos: usize, old: &str, new: &str) {
        let old_padded = (old.len() + 1) & !1;
        assert!(new.len() <= old_padded);
        let mut repl = new.as_bytes().to_vec();
        while repl.len() < old_padded {
            repl.push(b' ');
        }
        bytes[pos..pos + old_padded].copy_from_slice(&repl);
    }

    #[test]
    fn scaling_formula_at_16bit_limit() {
        let grid = Grid3::new(
            (2, 1, 1),
            (1.0, 1.0, 1.0),
            (0.0, 0.0, 0.0),
            Unit::Gy,
            vec![0.0, 65.535],
        )
        .unwrap();
        let bytes = write_rtdose(&grid).unwrap();
        let (back, meta) = parse_rtdose_with_meta(&bytes).unwrap();
        assert!((meta.dose_grid_scaling - 0.001).abs() < 1e-15);
        assert!((back.values()[1] - 65.535).abs() < 1e-12);
        assert_eq!(back.values()[0], 0.0);
    }

    #[test]
    fn all_zero_grid_uses_unit_scaling() {
        let grid = Grid3::new(
            (2, 2, 1),
            (1.0, 1.0, 1.0),
            (0.0, 0.0, 0.0),
            Unit::Gy,
            vec![0.0; 4],
        )
        .unwrap();
        let (back, meta) = parse_rtdose_with_meta(&write_rtdose(&grid).unwrap()).unwrap();
        assert_eq!(meta.dose_grid_scaling, 1.0);
        assert!(back.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn negative_dose_rejected() {
        let grid = Grid3::new(
            (1, 1, 1),
            (1.0, 1.0, 1.0),
            (0.0, 0.0, 0.0),
            Unit::Gy,
            vec![-1.0],
        )
        .unwrap();
        assert!(write_rtdose(&grid).is_err());
    }

    #[test]
    fn truncated_pixel_data_is_corrupt() {
        let grid = small_grid();
        let mut bytes = write_rtdose(&grid).unwrap();
        bytes.truncate(bytes.len() - 2);
        assert!(matches!(parse_rtdose(&bytes), Err(IngestError::Corrupt(_))));
    }

    #[test]
    fn wrong_transfer_syntax_is_unsupported() {
        let grid = small_grid();
        let mut bytes = write_rtdose(&grid).unwrap();
        let pos = find(&bytes, TRANSFER_SYNTAX_EXPLICIT_LE.as_bytes());
        // Implicit VR LE UID is one char shorter; pad with NUL like a UI value.
        let repl = b"1.2.840.10008.1.2\0\0\0";
        bytes[pos..pos + 20].copy_from_slice(repl);
        assert!(matches!(
            parse_rtdose(&bytes),
            Err(IngestError::Unsupported(_))
        ));
    }
}
