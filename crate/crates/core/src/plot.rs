//! Mel-spectrogram raster images: time on x, mel bin on y (low bins at the bottom).

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Horizontal pixels per frame, so image width is always a multiple of the frame count.
pub const PX_PER_FRAME: usize = 4;
pub const PX_PER_BIN: usize = 2;

// Dark blue through teal and green to yellow.
const PALETTE: [[f64; 3]; 5] = [
    [68.0, 1.0, 84.0],
    [59.0, 82.0, 139.0],
    [33.0, 145.0, 140.0],
    [94.0, 201.0, 98.0],
    [253.0, 231.0, 37.0],
];

/// Maps `u ∈ [0, 1]` to an RGB colour.
pub fn colormap(u: f64) -> [u8; 3] {
    let u = if u.is_finite() { u.clamp(0.0, 1.0) } else { 0.0 };
    let pos = u * (PALETTE.len() - 1) as f64;
    let i = (pos.floor() as usize).min(PALETTE.len() - 2);
    let f = pos - i as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (PALETTE[i][c] + f * (PALETTE[i + 1][c] - PALETTE[i][c])).round() as u8;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples, top row first.
    pub pixels: Vec<u8>,
}

/// Renders a `[T × n_mels]` log-mel. Values are min-max scaled; a constant mel maps to the middle colour.
pub fn render_mel(mel: &Tensor) -> Result<RgbImage> {
    let (frames, bins) = mel.shape();
    if frames == 0 || bins == 0 {
        return Err(Error::invalid("cannot plot an empty mel"));
    }
    if mel.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("mel contains non-finite values"));
    }
    let lo = mel.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mel.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let width = frames * PX_PER_FRAME;
    let height = bins * PX_PER_BIN;
    let mut pixels = vec![0u8; width * height * 3];
    for y in 0..height {
        let bin = bins - 1 - y / PX_PER_BIN;
        for x in 0..width {
            let v = mel.get(x / PX_PER_FRAME, bin);
            let u = if span > 0.0 { (v - lo) / span } else { 0.5 };
            let i = (y * width + x) * 3;
            pixels[i..i + 3].copy_from_slice(&colormap(u));
        }
    }
    Ok(RgbImage { width, height, pixels })
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        enc.write_header()?.write_image_data(&img.pixels)?;
    }
    Ok(buf)
}

pub fn plot_mel(mel: &Tensor, out_path: &Path) -> Result<()> {
    let bytes = encode_png(&render_mel(mel)?)?;
    let file = fs::File::create(out_path).map_err(|e| Error::io(out_path, e))?;
    let mut w = BufWriter::new(file);
    std::io::Write::write_all(&mut w, &bytes).map_err(|e| Error::io(out_path, e))?;
    std::io::Write::flush(&mut w).map_err(|e| Error::io(out_path, e))
}
