//! Map and table export: 16-bit binary PGM images and CSV rows.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const PGM_MAX: u16 = 65535;
/// Level used for every pixel of a constant map.
pub const PGM_MID_GRAY: u16 = 32768;

/// A grayscale map normalised to the full 16-bit range.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedMap {
    pub width: usize,
    pub height: usize,
    pub min: f32,
    pub max: f32,
    pub pixels: Vec<u16>,
}

impl NormalizedMap {
    /// Maps `min..=max` linearly onto `0..=65535`. A constant map (including
    /// a single pixel) becomes mid-gray.
    pub fn from_values(values: &[f32], width: usize, height: usize) -> Result<Self> {
        if values.len() != width * height || values.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} values for a {width}x{height} map",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "map export" });
        }
        let min = values.iter().copied().fold(f32::INFINITY, f32::min);
        let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let pixels = if min == max {
            vec![PGM_MID_GRAY; values.len()]
        } else {
            let range = max as f64 - min as f64;
            values
                .iter()
                .map(|&v| ((v as f64 - min as f64) / range * PGM_MAX as f64).round() as u16)
                .collect()
        };
        Ok(NormalizedMap {
            width,
            height,
            min,
            max,
            pixels,
        })
    }

    pub fn is_constant(&self) -> bool {
        self.min == self.max
    }

    /// Binary P5 encoding with maxval 65535 (big-endian samples).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{PGM_MAX}\n", self.width, self.height).into_bytes();
        for p in &self.pixels {
            out.extend(p.to_be_bytes());
        }
        out
    }
}

/// Decodes a P5 file with maxval 65535 into `(width, height, pixels)`.
pub fn read_pgm16(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM field {s:?}")));
    if fields[0] != "P5" || num(&fields[3])? != PGM_MAX as usize {
        return Err(Error::Format("expected a 16-bit P5 PGM".into()));
    }
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != w * h * 2 {
        return Err(Error::Format(format!("PGM body has {} bytes for {w}x{h}", body.len())));
    }
    let pixels = body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    Ok((w, h, pixels))
}

/// Writes a CSV file from a header and pre-formatted rows.
pub fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(out, "{header}")?;
    for row in rows {
        writeln!(out, "{row}")?;
    }
    out.flush()?;
    Ok(())
}

/// `image,label,<prefix>0,...` header for a vector table.
pub fn vector_header(prefix: &str, width: usize) -> String {
    let mut h = String::from("image,label");
    for i in 0..width {
        h += &format!(",{prefix}{i}");
    }
    h
}

pub fn vector_row(image: usize, label: usize, values: &[f32]) -> String {
    let mut row = format!("{image},{label}");
    for v in values {
        row += &format!(",{v}");
    }
    row
}
