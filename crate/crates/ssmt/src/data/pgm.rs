//! Netpbm I/O: binary PGM (P5) for grayscale images and masks, binary PPM
//! (P6) for prediction overlays, plus PNG ingestion.

use crate::error::{Result, SsmtError};
use std::fs;
use std::io::Write as _;
use std::path::Path;

/// Quantize a [0,1] value to 8 bits by round(v·255).
fn quantize(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Write `data` (row-major [0,1] floats, h×w) as binary P5 with maxval 255.
/// Binary masks of {0,1} come out as {0,255}.
pub fn write_pgm(path: &Path, data: &[f32], h: usize, w: usize) -> Result<()> {
    if data.len() != h * w || h == 0 || w == 0 {
        return Err(SsmtError::Dim(format!(
            "write_pgm: {} values for {h}x{w}",
            data.len()
        )));
    }
    let mut bytes = Vec::with_capacity(h * w + 32);
    write!(&mut bytes, "P5\n{w} {h}\n255\n").expect("in-memory write");
    bytes.extend(data.iter().map(|&v| quantize(v)));
    fs::write(path, bytes).map_err(|e| SsmtError::io(path, e))
}

/// Read binary P5 into [0,1] floats. Header whitespace and `#` comments are
/// tolerated; the maxval must be 255.
pub fn read_pgm(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let bytes = fs::read(path).map_err(|e| SsmtError::io(path, e))?;
    parse_pgm(&bytes).map_err(|msg| SsmtError::format(path, msg))
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<(Vec<f32>, usize, usize), String> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err("bad magic, expected P5".to_string());
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".to_string());
        }
        let tok = std::str::from_utf8(&bytes[start..pos]).expect("digits are UTF-8");
        *field = tok.parse().map_err(|e| format!("bad header field: {e}"))?;
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}, expected 255"));
    }
    if w == 0 || h == 0 {
        return Err(format!("degenerate dimensions {w}x{h}"));
    }
    // exactly one whitespace byte separates header from raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err("missing raster separator".to_string());
    }
    pos += 1;
    let need = w * h;
    if bytes.len() - pos < need {
        return Err(format!(
            "raster truncated: need {need} bytes, have {}",
            bytes.len() - pos
        ));
    }
    let data = bytes[pos..pos + need]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    Ok((data, h, w))
}

/// Write a P6 overlay: prediction paints the red channel, ground truth (when
/// given) the green channel; elsewhere the grayscale image shows through.
pub fn write_ppm_overlay(
    path: &Path,
    gray: &[f32],
    pred: &[f32],
    gt: Option<&[f32]>,
    h: usize,
    w: usize,
) -> Result<()> {
    if gray.len() != h * w || pred.len() != h * w || gt.map_or(false, |g| g.len() != h * w) {
        return Err(SsmtError::Dim(format!(
            "write_ppm_overlay: buffer sizes disagree with {h}x{w}"
        )));
    }
    let mut bytes = Vec::with_capacity(3 * h * w + 32);
    write!(&mut bytes, "P6\n{w} {h}\n255\n").expect("in-memory write");
    for i in 0..h * w {
        let g8 = quantize(gray[i]);
        let r = if pred[i] >= 0.5 { 255 } else { g8 };
        let g = match gt {
            Some(m) if m[i] >= 0.5 => 255,
            _ => g8,
        };
        bytes.extend_from_slice(&[r, g, g8]);
    }
    fs::write(path, bytes).map_err(|e| SsmtError::io(path, e))
}

/// Read an 8-bit grayscale image by extension: `.pgm` natively, `.png` via
/// the image crate (converted to luma).
pub fn read_gray_image(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => read_pgm(path),
        Some("png") => {
            let img = image::open(path)
                .map_err(|e| SsmtError::format(path, e.to_string()))?
                .into_luma8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            let data = img.into_raw().iter().map(|&b| b as f32 / 255.0).collect();
            Ok((data, h, w))
        }
        other => Err(SsmtError::format(
            path,
            format!("unsupported image extension {other:?}"),
        )),
    }
}
