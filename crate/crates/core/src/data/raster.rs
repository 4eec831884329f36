//! Minimal uncompressed raster format.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SFTR"
//! 4       1     version (1)
//! 5       1     encoding: 0 = u8 (value / 255), 1 = f64 little-endian
//! 6       2     channels, u16 LE
//! 8       4     height, u32 LE
//! 12      4     width, u32 LE
//! 16      ...   payload, channel-major then row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SFTR";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Encoding {
    U8 = 0,
    F64 = 1,
}

/// Serializes a `C×H×W` image. With [`Encoding::U8`] values are clamped to
/// `[0, 1]` and quantized.
pub fn encode(image: &Tensor, encoding: Encoding) -> Result<Vec<u8>> {
    let [c, h, w]: [usize; 3] = image
        .shape()
        .try_into()
        .map_err(|_| Error::dim("raster", format!("need a C×H×W image, got {:?}", image.shape())))?;
    let c16 = u16::try_from(c).map_err(|_| Error::dim("raster", format!("{c} channels do not fit u16")))?;
    let mut out = Vec::with_capacity(HEADER_LEN + image.len() * 8);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(encoding as u8);
    out.extend_from_slice(&c16.to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    match encoding {
        Encoding::U8 => out.extend(image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)),
        Encoding::F64 => image.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

/// Parses raster bytes; `path` is only used in error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |detail: String| Error::format(path, detail);
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(bad("not a raster file (bad magic)".into()));
    }
    if bytes[4] != VERSION {
        return Err(bad(format!("unsupported raster version {}", bytes[4])));
    }
    let c = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if c == 0 || h == 0 || w == 0 {
        return Err(bad(format!("empty raster {c}x{h}x{w}")));
    }
    let n = c * h * w;
    let payload = &bytes[HEADER_LEN..];
    let data: Vec<f64> = match bytes[5] {
        0 if payload.len() == n => payload.iter().map(|&b| f64::from(b) / 255.0).collect(),
        1 if payload.len() == n * 8 => {
            payload.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect()
        }
        0 | 1 => return Err(bad(format!("payload has {} bytes, expected {n} values", payload.len()))),
        e => return Err(bad(format!("unknown encoding {e}"))),
    };
    if data.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite pixel value".into()));
    }
    Tensor::new(&[c, h, w], data)
}

pub fn read_raster(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn write_raster(path: &Path, image: &Tensor, encoding: Encoding) -> Result<()> {
    let bytes = encode(image, encoding)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
