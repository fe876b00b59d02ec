//! Plain-text (P2) PGM output for mask traces and activation heatmaps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Write gray values (0..=255, row-major) as an ASCII PGM.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::InvalidArgument(format!(
            "pgm: {}x{} needs {} pixels, got {}",
            width,
            height,
            width * height,
            pixels.len()
        )));
    }
    let mut out = String::new();
    let _ = writeln!(out, "P2");
    let _ = writeln!(out, "{width} {height}");
    let _ = writeln!(out, "255");
    for row in pixels.chunks(width) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Min-max normalize map values to 0..=255. A constant map exports as all
/// zeros.
pub fn normalize_to_gray(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0; values.len()];
    }
    values
        .iter()
        .map(|&v| (((v - lo) / (hi - lo)) * 255.0).round() as u8)
        .collect()
}
