//! Varian-style ".optimal fluence" text files.
//!
//! The upstream vendor grammar is not public; this artifact fixes one:
//!
//! ```text
//! optimalfluence
//! SizeX: <cols>
//! SizeY: <rows>
//! SpacingX: <mm>
//! SpacingY: <mm>
//! OriginX: <mm>
//! OriginY: <mm>
//! Values:
//! <SizeY rows of SizeX whitespace-separated decimals>
//! ```
//!
//! `BeamIndex:` and `GantryAngle:` are optional extension keys (defaults 1
//! and 0) that the writer always emits so a map round-trips losslessly.
//! Values are written with 6 significant digits; parsing is
//! locale-independent (decimal point only).

use super::{IngestError, MAX_DECLARED_VOXELS};
use crate::volgrid::FluenceMap;

const HEADER_KEYS: [&str; 6] = [
    "SizeX", "SizeY", "SpacingX", "SpacingY", "OriginX", "OriginY",
];

pub fn parse_optimal_fluence(text: &str) -> Result<FluenceMap, IngestError> {
    let mut lines = text.lines().enumerate();

    let (_, first) = lines
        .by_ref()
        .find(|(_, l)| !l.trim().is_empty())
        .ok_or_else(|| IngestError::Parse("empty file".into()))?;
    if first.trim() != "optimalfluence" {
        return Err(IngestError::Parse(
            "missing 'optimalfluence' signature line".into(),
        ));
    }

    let mut size_x: Option<usize> = None;
    let mut size_y: Option<usize> = None;
    let mut spacing_x: Option<f64> = None;
    let mut spacing_y: Option<f64> = None;
    let mut origin_x: Option<f64> = None;
    let mut origin_y: Option<f64> = None;
    let mut beam_index: u8 = 1;
    let mut gantry_angle: f64 = 0.0;
    let mut saw_values = false;

    for (lineno, line) in lines.by_ref() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line == "Values:" {
            saw_values = true;
            break;
        }
        let (key, value) = line.split_once(':').ok_or_else(|| {
            IngestError::Parse(format!("line {}: expected 'Key: value'", lineno + 1))
        })?;
        let (key, value) = (key.trim(), value.trim());
        let parse_f64 = |v: &str| {
            v.parse::<f64>().map_err(|_| {
                IngestError::Parse(format!("line {}: non-numeric value '{v}'", lineno + 1))
            })
        };
        let parse_usize = |v: &str| {
            v.parse::<usize>().map_err(|_| {
                IngestError::Parse(format!("line {}: non-integer value '{v}'", lineno + 1))
            })
        };
        match key {
            "SizeX" => size_x = Some(parse_usize(value)?),
            "SizeY" => size_y = Some(parse_usize(value)?),
            "SpacingX" => spacing_x = Some(parse_f64(value)?),
            "SpacingY" => spacing_y = Some(parse_f64(value)?),
            "OriginX" => origin_x = Some(parse_f64(value)?),
            "OriginY" => origin_y = Some(parse_f64(value)?),
            "BeamIndex" => {
                beam_index = value.parse::<u8>().map_err(|_| {
                    IngestError::Parse(format!("line {}: bad BeamIndex '{value}'", lineno + 1))
                })?
            }
            "GantryAngle" => gantry_angle = parse_f64(value)?,
            other => {
                return Err(IngestError::Parse(format!(
                    "line {}: unknown header key '{other}'",
                    lineno + 1
                )))
            }
        }
    }

    if !saw_values {
        return Err(IngestError::Parse("missing 'Values:' section".into()));
    }
    macro_rules! require {
        ($opt:expr, $key:expr) => {
            $opt.ok_or_else(|| IngestError::Parse(format!("missing header key '{}'", $key)))?
        };
    }
    let cols = require!(size_x, HEADER_KEYS[0]);
    let rows = require!(size_y, HEADER_KEYS[1]);
    let sx = require!(spacing_x, HEADER_KEYS[2]);
    let sy = require!(spacing_y, HEADER_KEYS[3]);
    let ox = require!(origin_x, HEADER_KEYS[4]);
    let oy = require!(origin_y, HEADER_KEYS[5]);

    if rows == 0 || cols == 0 {
        return Err(IngestError::Corrupt("SizeX/SizeY must be >= 1".into()));
    }
    if rows.saturating_mul(cols) > MAX_DECLARED_VOXELS {
        return Err(IngestError::Corrupt(format!(
            "declared plane {cols}x{rows} exceeds cap"
        )));
    }

    let mut values = Vec::with_capacity(rows * cols);
    let mut row_count = 0;
    for (lineno, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if row_count == rows {
            return Err(IngestError::Corrupt(format!(
                "line {}: data after the declared {rows} rows",
                lineno + 1
            )));
        }
        let mut n = 0;
        for tok in line.split_whitespace() {
            let v = tok.parse::<f64>().map_err(|_| {
                IngestError::Parse(format!("line {}: non-numeric token '{tok}'", lineno + 1))
            })?;
            if v < 0.0 {
                return Err(IngestError::Parse(format!(
                    "line {}: negative fluence value {v}",
                    lineno + 1
                )));
            }
            values.push(v);
            n += 1;
        }
        if n != cols {
            return Err(IngestError::Corrupt(format!(
                "line {}: row has {n} values, expected SizeX = {cols}",
                lineno + 1
            )));
        }
        row_count += 1;
    }
    if row_count != rows {
        return Err(IngestError::Corrupt(format!(
            "found {row_count} data rows, expected SizeY = {rows}"
        )));
    }

    Ok(FluenceMap::new(
        beam_index,
        gantry_angle,
        rows,
        cols,
        (sx, sy),
        (ox, oy),
        values,
    )?)
}

/// Six-significant-digit scientific notation; parses back exactly for
/// decimal-representable values.
fn format_value(v: f64) -> String {
    format!("{v:.5e}")
}

pub fn write_optimal_fluence(map: &FluenceMap) -> String {
    let mut out = String::new();
    out.push_str("optimalfluence\n");
    out.push_str(&format!("SizeX: {}\n", map.cols()));
    out.push_str(&format!("SizeY: {}\n", map.rows()));
    out.push_str(&format!("SpacingX: {}\n", map.spacing().0));
    out.push_str(&format!("SpacingY: {}\n", map.spacing().1));
    out.push_str(&format!("OriginX: {}\n", map.origin().0));
    out.push_str(&format!("OriginY: {}\n", map.origin().1));
    out.push_str(&format!("BeamIndex: {}\n", map.beam_index));
    out.push_str(&format!("GantryAngle: {}\n", map.gantry_angle));
    out.push_str("Values:\n");
    for row in 0..map.rows() {
        let line: Vec<String> = (0..map.cols())
            .map(|col| format_value(map.value_at(row, col)))
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_map_round_trips() {
        let text = "optimalfluence\nSizeX: 2\nSizeY: 2\nSpacingX: 2.5\nSpacingY: 2.5\nOriginX: -2.5\nOriginY: -2.5\nValues:\n0 0\n0 0\n";
        let map = parse_optimal_fluence(text).unwrap();
        assert_eq!(map.values(), &[0.0; 4]);
        assert_eq!(map.beam_index, 1);
        let back = parse_optimal_fluence(&write_optimal_fluence(&map)).unwrap();
        assert_eq!(back, map);
    }

    #[test]
    fn round_trip_exact_for_decimal_values() {
        let map = FluenceMap::new(
            4,
            160.0,
            2,
            3,
            (2.5, 2.5),
            (-3.75, -2.5),
            vec![0.5, 1.25, 0.0, 12.5, 3.125, 100.0],
        )
        .unwrap();
        let text = write_optimal_fluence(&map);
        let back = parse_optimal_fluence(&text).unwrap();
        assert_eq!(back, map);
    }

    #[test]
    fn row_length_mismatch_is_corrupt() {
        let text = "optimalfluence\nSizeX: 3\nSizeY: 2\nSpacingX: 1\nSpacingY: 1\nOriginX: 0\nOriginY: 0\nValues:\n1 2\n3 4\n";
        assert!(matches!(
            parse_optimal_fluence(text),
            Err(IngestError::Corrupt(_))
        ));
    }

    #[test]
    fn missing_header_key_named() {
        let text = "optimalfluence\nSizeX: 2\nSpacingX: 1\nSpacingY: 1\nOriginX: 0\nOriginY: 0\nValues:\n1 2\n";
        match parse_optimal_fluence(text) {
            Err(IngestError::Parse(msg)) => assert!(msg.contains("SizeY"), "{msg}"),
            other => panic!("expected ParseError, got {other:?}"),
        }
    }

    #[test]
    fn non_numeric_token_reports_line() {
        let text = "optimalfluence\nSizeX: 2\nSizeY: 1\nSpacingX: 1\nSpacingY: 1\nOriginX: 0\nOriginY: 0\nValues:\n1 oops\n";
        match parse_optimal_fluence(text) {
            Err(IngestError::Parse(msg)) => assert!(msg.contains("line 9"), "{msg}"),
            other => panic!("expected ParseError, got {other:?}"),
        }
    }

    #[test]
    fn negative_values_rejected() {
        let text = "optimalfluence\nSizeX: 1\nSizeY: 1\nSpacingX: 1\nSpacingY: 1\nOriginX: 0\nOriginY: 0\nValues:\n-1\n";
        assert!(parse_optimal_fluence(text).is_err());
    }

    #[test]
    fn six_significant_digits() {
        assert_eq!(format_value(0.5), "5.00000e-1");
        assert_eq!(format_value(123456.0), "1.23456e5");
        assert_eq!("5.00000e-1".parse::<f64>().unwrap(), 0.5);
    }
}
