//! Binary portable-pixmap (P6) rendering of grids and masks.
//!
//! Grids are stored height-bottom-up; images put the highest bin on the top
//! row, so panels read like the usual time-height plots. Output bytes are a
//! pure function of the input values.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::format::write_atomic;
use crate::lidar::MaskGrid;
use crate::tensor::Tensor;

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::dim(
            "write_ppm",
            format!("{}x{} wants {} bytes, got {}", width, height, width * height * 3, rgb.len()),
        ));
    }
    write_atomic(path, |w| {
        write!(w, "P6\n{width} {height}\n255\n")?;
        w.write_all(rgb)?;
        Ok(())
    })
}

/// Monotone grayscale of a rank-2 grid: the minimum maps to black, the
/// maximum to white; a constant grid renders black.
pub fn render_grayscale(values: &Tensor, path: &Path) -> Result<()> {
    let s = values.shape();
    if s.len() != 2 {
        return Err(Error::dim("render_grayscale", format!("expected rank-2 grid, got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    let d = values.data();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("render input contains NaN/Inf".into()));
    }
    let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let mut rgb = vec![0u8; h * w * 3];
    for row in 0..h {
        let src_h = h - 1 - row;
        for col in 0..w {
            let v = d[src_h * w + col];
            let level = if span == 0.0 {
                0u8
            } else {
                ((v - min) / span * 255.0).round().clamp(0.0, 255.0) as u8
            };
            let at = (row * w + col) * 3;
            rgb[at] = level;
            rgb[at + 1] = level;
            rgb[at + 2] = level;
        }
    }
    write_ppm(path, w, h, &rgb)
}

/// Black/white rendering of a binary mask (1 = white).
pub fn render_mask(mask: &MaskGrid, path: &Path) -> Result<()> {
    mask.validate_binary()?;
    let (h, w) = (mask.height, mask.width);
    let mut rgb = vec![0u8; h * w * 3];
    for row in 0..h {
        let src_h = h - 1 - row;
        for col in 0..w {
            let level = if mask.get(src_h, col) == 1 { 255 } else { 0 };
            let at = (row * w + col) * 3;
            rgb[at] = level;
            rgb[at + 1] = level;
            rgb[at + 2] = level;
        }
    }
    write_ppm(path, w, h, &rgb)
}

/// Parses a binary P6 file back into (width, height, rgb bytes).
pub fn parse_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let header_err = |detail: &str| Error::Format {
        offset: 0,
        detail: detail.to_string(),
    };
    if !bytes.starts_with(b"P6\n") {
        return Err(header_err("not a binary P6 pixmap"));
    }
    let rest = &bytes[3..];
    let newline = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| header_err("missing dimension line"))?;
    let dims = std::str::from_utf8(&rest[..newline]).map_err(|_| header_err("bad dimensions"))?;
    let mut it = dims.split_whitespace();
    let w: usize = it
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| header_err("bad width"))?;
    let h: usize = it
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| header_err("bad height"))?;
    let after = &rest[newline + 1..];
    if !after.starts_with(b"255\n") {
        return Err(header_err("expected maxval 255"));
    }
    let rgb = after[4..].to_vec();
    if rgb.len() != w * h * 3 {
        return Err(Error::Format {
            offset: (bytes.len() - rgb.len()) as u64,
            detail: format!("payload {} bytes, expected {}", rgb.len(), w * h * 3),
        });
    }
    Ok((w, h, rgb))
}
