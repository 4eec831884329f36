//! Network weights file.
//!
//! All integers little-endian.
//!
//! ```text
//! magic        4 bytes  "SFTW"
//! version      u8       1
//! config_len   u32      length of the JSON config echo
//! config       bytes    DenseNetConfig as JSON
//! param_count  u32
//!   per parameter:
//!     group_len u16, group name (UTF-8)
//!     name_len  u16, parameter name (UTF-8)
//!     ndim      u8, dims u32 × ndim
//!     payload   f64 × product(dims)
//! norm_count   u32
//!   per batch norm: channels u32, mean f64 × channels, var f64 × channels
//! checksum     u64      first 8 bytes of SHA-256 over everything above
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{build_densenet_lite, DenseNetConfig, Network};
use crate::tensor::BatchNormStats;

pub const MAGIC: &[u8; 4] = b"SFTW";
pub const VERSION: u8 = 1;

fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn encode_weights(net: &Network) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    let config = serde_json::to_vec(net.config())?;
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(net.parameters().len() as u32).to_le_bytes());
    for p in net.parameters() {
        for s in [&net.groups()[p.group].name, &p.name] {
            out.extend_from_slice(&(s.len() as u16).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
        let shape = p.tensor.shape();
        out.push(shape.len() as u8);
        shape.iter().for_each(|&d| out.extend_from_slice(&(d as u32).to_le_bytes()));
        p.tensor.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    let norms = net.batch_norm_stats();
    out.extend_from_slice(&(norms.len() as u32).to_le_bytes());
    for bn in norms {
        out.extend_from_slice(&(bn.channels() as u32).to_le_bytes());
        bn.mean.iter().chain(&bn.var).for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<usize> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::format(self.path, "length overflow"))?)?;
        Ok(bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u16()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.path, "invalid UTF-8 name"))
    }
}

/// Parses a weights file. With `expected` set, the stored tensors must fit
/// that configuration; otherwise the stored config echo is used.
pub fn decode_weights(bytes: &[u8], path: &Path, expected: Option<&DenseNetConfig>) -> Result<Network> {
    if bytes.len() < 4 + 1 + 8 || &bytes[..4] != MAGIC {
        return Err(Error::format(path, "not a weights file (bad magic)"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let computed = checksum(body);
    if stored != computed {
        return Err(Error::Checksum { path: path.to_path_buf(), stored, computed });
    }
    let mut cur = Cursor { bytes: body, pos: 4, path };
    let version = cur.u8()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported weights version {version}")));
    }
    let config_len = cur.u32()?;
    let echo: DenseNetConfig = serde_json::from_slice(cur.take(config_len)?)?;
    let config = expected.unwrap_or(&echo);
    let mut net = build_densenet_lite(config, 0)?;

    let count = cur.u32()?;
    if count != net.parameters().len() {
        return Err(Error::ShapeMismatch {
            parameter: "<parameter count>".into(),
            expected: vec![net.parameters().len()],
            found: vec![count],
        });
    }
    for i in 0..count {
        let _group = cur.string()?;
        let name = cur.string()?;
        let ndim = cur.u8()? as usize;
        let shape = (0..ndim).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
        let target = &mut net.parameters_mut()[i];
        if target.name != name || target.tensor.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                parameter: format!("{} (stored as {name})", target.name),
                expected: target.tensor.shape().to_vec(),
                found: shape,
            });
        }
        let values = cur.f64s(shape.iter().product())?;
        target.tensor.data_mut().copy_from_slice(&values);
    }
    let norms = cur.u32()?;
    if norms != net.batch_norm_stats().len() {
        return Err(Error::format(
            path,
            format!("{norms} batch norms stored, network has {}", net.batch_norm_stats().len()),
        ));
    }
    for i in 0..norms {
        let c = cur.u32()?;
        let expected_c = net.batch_norm_stats()[i].channels();
        if c != expected_c {
            return Err(Error::ShapeMismatch {
                parameter: format!("batch norm {i} statistics"),
                expected: vec![expected_c],
                found: vec![c],
            });
        }
        let mean = cur.f64s(c)?;
        let var = cur.f64s(c)?;
        net.batch_norm_stats_mut()[i] = BatchNormStats { mean, var };
    }
    if cur.pos != body.len() {
        return Err(Error::format(path, format!("{} trailing bytes", body.len() - cur.pos)));
    }
    Ok(net)
}

/// Writes the weights atomically (temporary file, then rename).
pub fn save_weights(net: &Network, path: &Path) -> Result<()> {
    let bytes = encode_weights(net)?;
    write_atomic(path, &bytes)
}

pub fn load_weights(path: &Path, expected: Option<&DenseNetConfig>) -> Result<Network> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes, path, expected)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.tmp", ext.to_string_lossy()),
        None => "tmp".into(),
    });
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn round_trip_is_bitwise() {
        let cfg = DenseNetConfig::default();
        let mut net = build_densenet_lite(&cfg, 42).unwrap();
        net.batch_norm_stats_mut()[0].mean[0] = 0.25;
        let bytes = encode_weights(&net).unwrap();
        let back = decode_weights(&bytes, Path::new("w"), None).unwrap();
        assert_eq!(back.snapshot(), net.snapshot());
        let probe = Tensor::filled(&[2, 1, 16, 16], 0.3);
        assert_eq!(back.eval_logits(&probe).unwrap(), net.eval_logits(&probe).unwrap());
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let net = build_densenet_lite(&DenseNetConfig::default(), 1).unwrap();
        let mut bytes = encode_weights(&net).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        assert!(matches!(decode_weights(&bytes, Path::new("w"), None), Err(Error::Checksum { .. })));
    }

    #[test]
    fn config_mismatch_is_shape_error() {
        let net = build_densenet_lite(&DenseNetConfig::default(), 1).unwrap();
        let bytes = encode_weights(&net).unwrap();
        let other = DenseNetConfig { growth_rate: 6, ..DenseNetConfig::default() };
        assert!(matches!(decode_weights(&bytes, Path::new("w"), Some(&other)), Err(Error::ShapeMismatch { .. })));
    }
}
