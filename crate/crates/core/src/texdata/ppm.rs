//! Binary PPM (P6) with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ndtensor::Tensor;

/// Decodes a P6 image into `H×W×3` values `v / maxval`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f64>> {
    let mut pos = 0;
    let mut fields = [0usize; 3];
    if bytes.get(..2) != Some(b"P6") {
        return Err(Error::Format("missing P6 magic".into()));
    }
    pos += 2;
    for f in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
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
            .ok_or_else(|| Error::Format("malformed header".into()))?;
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(Error::Format(format!("empty image {w}×{h}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("maxval {maxval} unsupported (8-bit only)")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("malformed header".into()));
    }
    pos += 1;
    let need = w * h * 3;
    let raster = bytes.get(pos..pos + need).ok_or_else(|| {
        Error::Format(format!(
            "raster truncated: need {need} bytes, have {}",
            bytes.len() - pos
        ))
    })?;
    let scale = maxval as f64;
    Tensor::new(&[h, w, 3], raster.iter().map(|&b| b as f64 / scale).collect())
}

/// Encodes an `H×W×3` image in `[0, 1]`, rounding to 8 bits.
pub fn encode_ppm(image: &Tensor<f64>) -> Result<Vec<u8>> {
    let (h, w, c) = image.hwc("encode_ppm")?;
    if c != 3 {
        return Err(Error::shape("encode_ppm", image.shape(), "expected 3 channels"));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|e| Error::File {
        path: path.to_path_buf(),
        msg: match e {
            Error::Format(m) => m,
            other => other.to_string(),
        },
    })
}

pub fn write_ppm(path: &Path, image: &Tensor<f64>) -> Result<()> {
    fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}
