use std::path::Path;

use super::{read_bytes, write_file};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reads one whitespace-delimited header token, skipping `#` comments.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while bytes.get(*pos).is_some_and(u8::is_ascii_whitespace) {
            *pos += 1;
        }
        if bytes.get(*pos) == Some(&b'#') {
            while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Image("truncated PPM header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let t = token(bytes, pos)?;
    std::str::from_utf8(t)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Image(format!("PPM {what} is not a number")))
}

/// Decodes a binary 8-bit PPM (`P6`) into a `(1, 3, H, W)` tensor scaled
/// to [0, 1].
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    if !bytes.starts_with(b"P6") {
        let magic = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(Error::Image(format!("expected binary PPM magic \"P6\", found {magic:?}")));
    }
    let mut pos = 2;
    let width = number(bytes, &mut pos, "width")?;
    let height = number(bytes, &mut pos, "height")?;
    let maxval = number(bytes, &mut pos, "maximum value")?;
    if maxval != 255 {
        return Err(Error::Image(format!("only 8-bit PPM is supported (maximum value {maxval})")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Image(format!("empty PPM image {width}x{height}")));
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Image("truncated PPM header".into()));
    }
    pos += 1;
    let plane = width.checked_mul(height).ok_or_else(|| Error::Image("PPM dimensions overflow".into()))?;
    let need = plane.checked_mul(3).ok_or_else(|| Error::Image("PPM dimensions overflow".into()))?;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(Error::Image(format!("PPM raster has {} bytes, expected {need}", raster.len())));
    }
    let mut data = vec![0f32; need];
    for (i, px) in raster[..need].chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = f32::from(px[c]) / 255.0;
        }
    }
    Tensor::new(&[1, 3, height, width], data)
}

/// Encodes a `(1, 3, H, W)` tensor as binary PPM, clamping to [0, 1].
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let [n, c, h, w] = image.dims4("encode_ppm")?;
    if n != 1 || c != 3 {
        return Err(Error::shape("encode_ppm", format!("expected (1, 3, H, W), got {:?}", image.shape())));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for i in 0..plane {
        for ch in 0..3 {
            out.push((image.data()[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    decode_ppm(&read_bytes(path)?)
}

pub fn save_image(image: &Tensor<f32>, path: &Path) -> Result<()> {
    write_file(path, encode_ppm(image)?)
}
