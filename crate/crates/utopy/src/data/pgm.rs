//! Minimal binary PGM (P5) and PPM (P6) codec.
//!
//! Only 8-bit maxval-255 files are supported. Color inputs are reduced to
//! luminance with the usual 0.299/0.587/0.114 weights.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A decoded grayscale image with values in [0, 1].
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

fn read_token(bytes: &[u8], pos: &mut usize, path: &str) -> Result<Vec<u8>> {
    // Skip whitespace and `#` comments that run to end of line.
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Contract(format!("{path}: truncated netpbm header")));
    }
    Ok(bytes[start..*pos].to_vec())
}

fn parse_usize(tok: &[u8], path: &str, what: &str) -> Result<usize> {
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Contract(format!("{path}: bad {what} in netpbm header")))
}

/// Decode a binary PGM (P5) or PPM (P6) file into a grayscale image.
pub fn read_netpbm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(display.clone(), e))?;

    let mut pos = 0usize;
    let magic = read_token(&bytes, &mut pos, &display)?;
    let channels = match magic.as_slice() {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(Error::Contract(format!(
                "{display}: unsupported netpbm magic {:?} (only binary P5/P6)",
                String::from_utf8_lossy(other)
            )))
        }
    };
    let width = parse_usize(&read_token(&bytes, &mut pos, &display)?, &display, "width")?;
    let height = parse_usize(&read_token(&bytes, &mut pos, &display)?, &display, "height")?;
    let maxval = parse_usize(&read_token(&bytes, &mut pos, &display)?, &display, "maxval")?;
    if maxval != 255 {
        return Err(Error::Contract(format!("{display}: only maxval 255 supported, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Contract(format!("{display}: empty image")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = width * height * channels;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::Contract(format!("{display}: raster shorter than {need} bytes")))?;

    let mut pixels = Vec::with_capacity(width * height);
    match channels {
        1 => pixels.extend(raster.iter().map(|&v| v as f64 / 255.0)),
        _ => {
            for rgb in raster.chunks_exact(3) {
                let lum = 0.299 * rgb[0] as f64 + 0.587 * rgb[1] as f64 + 0.114 * rgb[2] as f64;
                pixels.push(lum / 255.0);
            }
        }
    }
    Ok(GrayImage { width, height, pixels })
}

/// Write a [0, 1] image plane as an 8-bit binary PGM file.
pub fn write_pgm(path: impl AsRef<Path>, plane: &Tensor<f64>) -> Result<()> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let shape = plane.shape();
    if shape.len() < 2 {
        return Err(Error::Contract(format!("pgm writer needs a 2-d plane, got {shape:?}")));
    }
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    if plane.numel() != h * w {
        return Err(Error::Contract(format!(
            "pgm writer needs a single plane, got shape {shape:?}"
        )));
    }
    let mut out = Vec::with_capacity(h * w + 32);
    out.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    out.extend(plane.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(display.clone(), e))?;
    f.write_all(&out).map_err(|e| Error::io(display, e))
}

/// Bilinear resample a grayscale image to `side`×`side` (half-pixel centers,
/// edge clamped), returning a flat row-major plane.
pub fn resize_bilinear(img: &GrayImage, side: usize) -> Vec<f64> {
    let (w, h) = (img.width, img.height);
    let sx = w as f64 / side as f64;
    let sy = h as f64 / side as f64;
    let mut out = Vec::with_capacity(side * side);
    for oy in 0..side {
        // Map output pixel center to input coordinates.
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..side {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let p00 = img.pixels[y0 * w + x0];
            let p01 = img.pixels[y0 * w + x1];
            let p10 = img.pixels[y1 * w + x0];
            let p11 = img.pixels[y1 * w + x1];
            let top = p00 + (p01 - p00) * tx;
            let bot = p10 + (p11 - p10) * tx;
            out.push(top + (bot - top) * ty);
        }
    }
    out
}
