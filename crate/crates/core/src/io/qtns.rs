//! QTNS binary tensor container.
//!
//! Layout, little-endian throughout:
//!
//! | bytes       | field                          |
//! |-------------|--------------------------------|
//! | 4           | magic `QTNS`                   |
//! | 2           | version (`u16`, currently 1)   |
//! | 1           | dtype (1 = `f32`, 2 = `i32`)   |
//! | 4           | rank (`u32`)                   |
//! | 8 × rank    | dims (`u64`)                   |
//! | 4 × Π dims  | row-major payload              |

use crate::tensor::{IntTensor, Tensor};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"QTNS";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 1,
    I32 = 2,
}

#[derive(Debug, Error)]
pub enum QtnsError {
    #[error("bad magic {found:?}, expected \"QTNS\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported qtns version {0}")]
    UnknownVersion(u16),
    #[error("unknown dtype code {0}")]
    UnknownDType(u8),
    #[error("expected dtype {expected:?}, file holds {found:?}")]
    WrongDType { expected: DType, found: DType },
    #[error("truncated {section}: need {need} bytes, have {have}")]
    Truncated { section: &'static str, need: usize, have: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("invalid shape {0:?}")]
    BadShape(Vec<u64>),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, QtnsError>;

fn encode(dtype: DType, shape: &[usize], payload: impl Iterator<Item = [u8; 4]>) -> Vec<u8> {
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(11 + 8 * shape.len() + 4 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype as u8);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for b in payload {
        out.extend_from_slice(&b);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &'static str) -> Result<&'a [u8]> {
        let have = self.buf.len() - self.pos;
        if have < n {
            return Err(QtnsError::Truncated { section, need: n, have });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

fn decode(bytes: &[u8]) -> Result<(DType, Vec<usize>, &[u8])> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(QtnsError::BadMagic { found: magic.try_into().expect("4 bytes") });
    }
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(QtnsError::UnknownVersion(version));
    }
    let dtype = match r.take(1, "dtype")?[0] {
        1 => DType::F32,
        2 => DType::I32,
        c => return Err(QtnsError::UnknownDType(c)),
    };
    let rank = u32::from_le_bytes(r.take(4, "rank")?.try_into().expect("4 bytes")) as usize;
    let dims_bytes = r.take(rank.checked_mul(8).ok_or(QtnsError::BadShape(vec![]))?, "dims")?;
    let dims: Vec<u64> = dims_bytes.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, &d| usize::try_from(d).ok().and_then(|d| acc.checked_mul(d)))
        .filter(|&n| rank > 0 && n > 0)
        .ok_or_else(|| QtnsError::BadShape(dims.clone()))?;
    let need = numel.checked_mul(4).ok_or_else(|| QtnsError::BadShape(dims.clone()))?;
    let payload = r.take(need, "payload")?;
    let rest = bytes.len() - r.pos;
    if rest != 0 {
        return Err(QtnsError::TrailingBytes(rest));
    }
    Ok((dtype, dims.into_iter().map(|d| d as usize).collect(), payload))
}

fn expect(found: DType, expected: DType) -> Result<()> {
    if found != expected {
        return Err(QtnsError::WrongDType { expected, found });
    }
    Ok(())
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    encode(DType::F32, t.shape(), t.data().iter().map(|v| v.to_le_bytes()))
}

pub fn encode_int_tensor(t: &IntTensor) -> Vec<u8> {
    encode(DType::I32, t.shape(), t.data().iter().map(|v| v.to_le_bytes()))
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let (dtype, shape, payload) = decode(bytes)?;
    expect(dtype, DType::F32)?;
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Tensor::new(shape.clone(), data).map_err(|_| QtnsError::BadShape(shape.iter().map(|&d| d as u64).collect()))
}

pub fn decode_int_tensor(bytes: &[u8]) -> Result<IntTensor> {
    let (dtype, shape, payload) = decode(bytes)?;
    expect(dtype, DType::I32)?;
    let data = payload.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    IntTensor::new(shape.clone(), data).map_err(|_| QtnsError::BadShape(shape.iter().map(|&d| d as u64).collect()))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| QtnsError::Io { path: path.display().to_string(), source })
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| QtnsError::Io { path: path.display().to_string(), source })
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_tensor(&read(path.as_ref())?)
}

pub fn save(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &encode_tensor(t))
}

pub fn load_int(path: impl AsRef<Path>) -> Result<IntTensor> {
    decode_int_tensor(&read(path.as_ref())?)
}

pub fn save_int(t: &IntTensor, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &encode_int_tensor(t))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tensor {
        Tensor::new(vec![3, 4], (0..12).map(|i| i as f32 * 0.37 - 1.5).collect()).unwrap()
    }

    #[test]
    fn header_bytes() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap();
        let b = encode_tensor(&t);
        let mut expect = b"QTNS".to_vec();
        expect.extend([1, 0, 1, 2, 0, 0, 0]);
        expect.extend(1u64.to_le_bytes());
        expect.extend(2u64.to_le_bytes());
        expect.extend(1.0f32.to_le_bytes());
        expect.extend((-2.0f32).to_le_bytes());
        assert_eq!(b, expect);
    }

    #[test]
    fn round_trip() {
        let t = sample();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.qtns");
        save(&t, &p).unwrap();
        let back = load(&p).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let ints = IntTensor::new(vec![2, 2], vec![-1, 0, 7, i32::MAX]).unwrap();
        save_int(&ints, &p).unwrap();
        assert_eq!(load_int(&p).unwrap(), ints);
    }

    #[test]
    fn rejections_are_distinct() {
        let good = encode_tensor(&sample());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_tensor(&bad), Err(QtnsError::BadMagic { .. })));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode_tensor(&bad), Err(QtnsError::UnknownVersion(2))));
        let mut bad = good.clone();
        bad[6] = 9;
        assert!(matches!(decode_tensor(&bad), Err(QtnsError::UnknownDType(9))));
        assert!(matches!(
            decode_tensor(&good[..good.len() - 1]),
            Err(QtnsError::Truncated { section: "payload", .. })
        ));
        assert!(matches!(decode_int_tensor(&good), Err(QtnsError::WrongDType { .. })));
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(decode_tensor(&long), Err(QtnsError::TrailingBytes(1))));
    }
}
