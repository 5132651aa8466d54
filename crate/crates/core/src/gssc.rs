//! GSSC binary tensor files: `"GSSC"`, u32 version, u32 dtype code,
//! u32 rank, u32 extents, row-major little-endian payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::NdBuffer;

pub const MAGIC: &[u8; 4] = b"GSSC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F64(Vec<f64>),
    Labels(Vec<u8>),
}

impl Payload {
    pub fn dtype_code(&self) -> u32 {
        match self {
            Payload::F64(_) => 0,
            Payload::Labels(_) => 1,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F64(v) => v.len(),
            Payload::Labels(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GsscFile {
    pub extents: Vec<usize>,
    pub payload: Payload,
}

impl GsscFile {
    pub fn new(extents: &[usize], payload: Payload) -> Result<Self> {
        let n: usize = extents.iter().product();
        if n != payload.len() {
            return Err(Error::dim(format!("extents {extents:?} hold {n} values, payload has {}", payload.len())));
        }
        if extents.iter().any(|&e| e > u32::MAX as usize) {
            return Err(Error::dim("extent does not fit in 32 bits"));
        }
        Ok(Self {
            extents: extents.to_vec(),
            payload,
        })
    }

    pub fn from_buffer(b: &NdBuffer) -> Self {
        Self::new(b.shape(), Payload::F64(b.data().to_vec())).expect("buffer shape matches data")
    }

    pub fn labels(extents: &[usize], labels: Vec<u8>) -> Result<Self> {
        Self::new(extents, Payload::Labels(labels))
    }

    pub fn to_buffer(&self) -> Result<NdBuffer> {
        match &self.payload {
            Payload::F64(v) => NdBuffer::new(&self.extents, v.clone()),
            Payload::Labels(_) => Err(Error::config("label file read as a float tensor")),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.extents.len() + 8 * self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.payload.dtype_code().to_le_bytes());
        out.extend_from_slice(&(self.extents.len() as u32).to_le_bytes());
        for &e in &self.extents {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        match &self.payload {
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::Labels(v) => out.extend_from_slice(v),
        }
        out
    }

    /// Parses bytes; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut pos = 0;
        let mut word = || -> Result<u32> {
            let w = bytes.get(pos..pos + 4).ok_or_else(|| bad("truncated header"))?;
            pos += 4;
            Ok(u32::from_le_bytes(w.try_into().expect("four bytes")))
        };
        if bytes.get(..4) != Some(MAGIC.as_slice()) {
            return Err(bad("missing GSSC magic"));
        }
        word()?;
        let version = word()?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let dtype = word()?;
        let rank = word()? as usize;
        let extents = (0..rank).map(|_| word().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let header = 16 + 4 * rank;
        let n = extents
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| bad("extents overflow"))?;
        let body = &bytes[header..];
        let payload = match dtype {
            0 => {
                if body.len() != n.checked_mul(8).ok_or_else(|| bad("extents overflow"))? {
                    return Err(bad(&format!("payload has {} bytes, expected {}", body.len(), 8 * n)));
                }
                Payload::F64(body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes"))).collect())
            }
            1 => {
                if body.len() != n {
                    return Err(bad(&format!("payload has {} bytes, expected {n}", body.len())));
                }
                Payload::Labels(body.to_vec())
            }
            d => return Err(bad(&format!("unknown dtype code {d}"))),
        };
        Ok(Self { extents, payload })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let f = GsscFile::labels(&[2, 3], vec![0, 1, 2, 3, 255, 7]).unwrap();
        let b = f.to_bytes();
        assert_eq!(&b[..4], b"GSSC");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &2u32.to_le_bytes());
        assert_eq!(&b[16..24], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(b.len(), 24 + 6);
    }

    #[test]
    fn round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.gssc");
        let vals = vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -3.5, f64::INFINITY];
        let f = GsscFile::new(&[3, 2], Payload::F64(vals)).unwrap();
        f.write(&p).unwrap();
        let back = GsscFile::read(&p).unwrap();
        assert_eq!(back.to_bytes(), f.to_bytes());
        assert!(GsscFile::new(&[4], Payload::Labels(vec![1])).is_err());
    }

    #[test]
    fn malformed_inputs() {
        let p = Path::new("mem");
        let good = GsscFile::labels(&[4], vec![1, 2, 3, 4]).unwrap().to_bytes();
        assert!(matches!(GsscFile::from_bytes(b"GSS", p), Err(Error::Format { .. })));
        let mut wrong = good.clone();
        wrong[0] = b'X';
        assert!(GsscFile::from_bytes(&wrong, p).is_err());
        assert!(GsscFile::from_bytes(&good[..good.len() - 1], p).is_err());
        let mut dtype = good.clone();
        dtype[8] = 9;
        assert!(GsscFile::from_bytes(&dtype, p).is_err());
        let missing = GsscFile::read(Path::new("/nonexistent/f.gssc"));
        assert!(matches!(missing, Err(Error::Io { .. })));
    }
}
