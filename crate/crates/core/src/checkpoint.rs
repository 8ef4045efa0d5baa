//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "UPL1" | version u32 | element bytes u32 | header length u32 | header (UTF-8 key = value text)
//! tensor count u32 | per tensor: name length u32, name, rank u32, extents u64 × rank
//! payloads in manifest order (IEEE-754, element bytes each)
//! CRC32 of everything above, u32
//! ```

use std::fs;
use std::path::Path;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"UPL1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub header: KeyValues,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Checkpoint<T> {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(T::BYTES as u32).to_le_bytes());
        let header = self.header.to_string();
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for (_, t) in &self.tensors {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let body = verify_envelope(bytes)?;
        let mut r = Reader { buf: body, pos: 12 };
        let elem = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes")) as usize;
        if elem != T::BYTES {
            return Err(Error::Checkpoint(format!(
                "checkpoint stores {}-bit elements, {}-bit requested",
                elem * 8,
                T::BYTES * 8
            )));
        }
        let header_len = r.u32()? as usize;
        let header_text = std::str::from_utf8(r.take(header_len)?)
            .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let header =
            KeyValues::parse(header_text).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(
                    usize::try_from(r.u64()?)
                        .map_err(|_| Error::Checkpoint("extent overflows".into()))?,
                );
            }
            manifest.push((name, shape));
        }
        let mut tensors = Vec::with_capacity(manifest.len());
        for (name, shape) in manifest {
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: extent product overflows")))?;
            let raw = r.take(
                numel
                    .checked_mul(elem)
                    .ok_or_else(|| Error::Checkpoint("payload size overflows".into()))?,
            )?;
            let data = raw.chunks_exact(elem).map(T::read_le).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing payload bytes",
                body.len() - r.pos
            )));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// Checks magic, version and CRC; returns the bytes before the CRC.
fn verify_envelope(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < 20 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("not a UPL1 checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Checkpoint(
            "CRC mismatch: file is corrupt or truncated".into(),
        ));
    }
    Ok(body)
}

/// Element width in bytes stored in a checkpoint file.
pub fn element_bytes(path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let body = verify_envelope(&bytes)?;
    Ok(u32::from_le_bytes(body[8..12].try_into().expect("4 bytes")) as usize)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("payload shorter than its manifest".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f64> {
        let mut header = KeyValues::new();
        header.set("arch", "tiny-vgg");
        Checkpoint {
            header,
            tensors: vec![
                (
                    "a".into(),
                    Tensor::from_f64(vec![2, 2], &[1.0, -2.5, 3.25, 1e-300]).unwrap(),
                ),
                ("b".into(), Tensor::scalar(0.1)),
            ],
        }
    }

    #[test]
    fn encode_decode_encode_is_identical() {
        let bytes = sample().encode();
        let back = Checkpoint::<f64>::decode(&bytes).unwrap();
        assert_eq!(back, sample());
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn corruption_and_truncation_are_detected() {
        let mut bytes = sample().encode();
        let n = bytes.len();
        assert!(Checkpoint::<f64>::decode(&bytes[..n - 1]).is_err());
        bytes[n / 2] ^= 1;
        assert!(matches!(
            Checkpoint::<f64>::decode(&bytes),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn precision_mismatch_is_reported() {
        let bytes = sample().encode();
        assert!(Checkpoint::<f32>::decode(&bytes).is_err());
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = sample().encode();
        bytes[4] = 9;
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        let err = Checkpoint::<f64>::decode(&bytes).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }
}
