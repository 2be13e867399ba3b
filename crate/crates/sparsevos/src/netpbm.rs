//! Binary PPM (P6) frames and PGM (P5) masks and heat maps.

use std::fs;
use std::path::Path;

use sparsevos_core::{BinaryMask, Tensor};

use crate::error::{Error, Result};

fn header(bytes: &[u8], magic: &[u8; 2]) -> Result<(usize, usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Format(format!("expected {} netpbm file", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("malformed netpbm header".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("malformed netpbm header".into()));
    }
    let [w, h, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    Ok((w, h, maxval, pos + 1))
}

fn payload<'a>(bytes: &'a [u8], start: usize, n: usize) -> Result<&'a [u8]> {
    bytes
        .get(start..start + n)
        .ok_or_else(|| Error::Format(format!("netpbm payload truncated: expected {n} bytes")))
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(img: &Tensor) -> Vec<u8> {
    let (h, w) = (img.dim(0), img.dim(1));
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| quantize(v)));
    out
}

/// Frame `H×W×3` with values in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let (w, h, maxval, start) = header(bytes, b"P6")?;
    let data = payload(bytes, start, w * h * 3)?.iter().map(|&b| b as f32 / maxval as f32).collect();
    Ok(Tensor::new(&[h, w, 3], data)?)
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels);
    out
}

pub fn encode_mask(m: &BinaryMask) -> Vec<u8> {
    let px: Vec<u8> = m.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    encode_pgm(m.width(), m.height(), &px)
}

/// Mask from a PGM; pixels above half of maxval are set.
pub fn decode_mask(bytes: &[u8]) -> Result<BinaryMask> {
    let (w, h, maxval, start) = header(bytes, b"P5")?;
    let bits = payload(bytes, start, w * h)?.iter().map(|&b| 2 * b as usize > maxval).collect();
    Ok(BinaryMask::from_bits(h, w, bits)?)
}

/// Heat map of a non-negative matrix, scaled so its maximum is white.
pub fn encode_heat(m: &Tensor) -> Vec<u8> {
    let max = m.data().iter().copied().fold(0.0f32, f32::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let px: Vec<u8> = m.data().iter().map(|&v| quantize(v * scale)).collect();
    encode_pgm(m.last_dim(), m.len() / m.last_dim().max(1), &px)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&read(path)?).map_err(|e| annotate(e, path))
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    decode_mask(&read(path)?).map_err(|e| annotate(e, path))
}

fn annotate(e: Error, path: &Path) -> Error {
    match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        e => e,
    }
}
