//! Binary PGM (P5) and PPM (P6) encoders.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub fn encode_pgm(w: usize, h: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    encode("P5", w, h, 1, pixels)
}

/// `rgb` holds three bytes per pixel.
pub fn encode_ppm(w: usize, h: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    encode("P6", w, h, 3, rgb)
}

fn encode(magic: &str, w: usize, h: usize, depth: usize, px: &[u8]) -> Result<Vec<u8>> {
    if px.len() != w * h * depth {
        return Err(Error::Data(format!("{} bytes for a {w}x{h} {magic} image", px.len())));
    }
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(px);
    Ok(out)
}

pub fn write_pgm(path: &Path, w: usize, h: usize, pixels: &[u8]) -> Result<()> {
    fs::write(path, encode_pgm(w, h, pixels)?)?;
    Ok(())
}

pub fn write_ppm(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    fs::write(path, encode_ppm(w, h, rgb)?)?;
    Ok(())
}
