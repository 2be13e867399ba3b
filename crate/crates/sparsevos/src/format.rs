//! Binary tensor files (`ESM2`) and named-tensor weight archives (`ESMW`).
//!
//! Both are little-endian: a 4-byte magic, a `u32` version, then tensors as
//! `u32 rank`, `rank × u64` dims and `f32` data. An archive adds a `u32`
//! entry count and a `u32`-length UTF-8 name before each tensor.

use std::fs;
use std::path::Path;

use sparsevos_core::pipeline::{ModelWeights, PipelineConfig};
use sparsevos_core::{Error as CoreError, Tensor};

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"ESM2";
pub const WEIGHTS_MAGIC: &[u8; 4] = b"ESMW";
pub const VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("truncated: need {n} bytes at offset {}, have {}", self.pos, self.buf.len() - self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn header(&mut self, magic: &[u8; 4], what: &'static str) -> Result<()> {
        let m = self.take(4)?;
        if m != magic {
            return Err(Error::Format(format!("bad magic {m:?}, expected {what} file")));
        }
        let v = self.u32()?;
        if v != VERSION {
            return Err(Error::UnsupportedVersion { what, found: v, expected: VERSION });
        }
        Ok(())
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(self.u64()?).map_err(|_| Error::Format("dimension overflows usize".into()))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))?;
        let data = self.take(n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Tensor::new(&shape, data)?)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.extend((t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend((d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend(v.to_le_bytes());
    }
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * t.rank() + 4 * t.len());
    out.extend(TENSOR_MAGIC);
    out.extend(VERSION.to_le_bytes());
    put_tensor(&mut out, t);
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.header(TENSOR_MAGIC, "tensor")?;
    let t = r.tensor()?;
    r.finish()?;
    Ok(t)
}

pub fn encode_archive(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend(WEIGHTS_MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        put_tensor(&mut out, t);
    }
    out
}

pub fn decode_archive(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.header(WEIGHTS_MAGIC, "weights")?;
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_owned();
        out.push((name, r.tensor()?));
    }
    r.finish()?;
    Ok(out)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(format!("{} not found", path.display()))
        } else {
            Error::io(path, e)
        }
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_tensor(t: &Tensor, path: &Path) -> Result<()> {
    write(path, &encode_tensor(t))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&read(path)?)
}

pub fn save_weights(w: &ModelWeights, path: &Path) -> Result<()> {
    write(path, &encode_archive(&w.named_tensors()))
}

/// Loads an archive into the architecture described by `cfg`.
pub fn load_weights(path: &Path, cfg: &PipelineConfig) -> Result<ModelWeights> {
    let tensors = decode_archive(&read(path)?)?;
    let mut w = ModelWeights::init(cfg, 0)?;
    w.assign(&tensors).map_err(|e| match e {
        CoreError::Weights(m) => Error::Format(format!("{}: {m}", path.display())),
        e => e.into(),
    })?;
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use sparsevos_core::RngState;

    #[test]
    fn tensor_round_trip_is_bit_exact() {
        let mut t: Tensor = RngState::new(1).normal_tensor(&[3, 4, 5], 1.0);
        t.data_mut()[0] = f32::MIN_POSITIVE / 2.0;
        t.data_mut()[1] = -0.0;
        let back = decode_tensor(&encode_tensor(&t)).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn truncation_and_magic() {
        let t: Tensor = Tensor::zeros(&[2, 2]);
        let bytes = encode_tensor(&t);
        for cut in 0..bytes.len() {
            assert!(matches!(decode_tensor(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_tensor(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = encode_archive(&[]);
        bytes[4] = 9;
        assert!(matches!(
            decode_archive(&bytes),
            Err(Error::UnsupportedVersion { found: 9, expected: VERSION, .. })
        ));
    }

    #[test]
    fn weights_round_trip() {
        let cfg = PipelineConfig::default();
        let w = ModelWeights::init(&cfg, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.esmw");
        save_weights(&w, &p).unwrap();
        assert_eq!(load_weights(&p, &cfg).unwrap(), w);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_weights(&p, &cfg), Err(Error::Format(_))));
    }

    #[test]
    fn shape_mismatch_is_format_error() {
        let cfg = PipelineConfig::default();
        let w = ModelWeights::init(&cfg, 4).unwrap();
        let mut named = w.named_tensors();
        named[0].1 = Tensor::zeros(&[1]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.esmw");
        fs::write(&p, encode_archive(&named)).unwrap();
        assert!(matches!(load_weights(&p, &cfg), Err(Error::Format(_))));
    }
}
