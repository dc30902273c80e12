//! Binary tensor files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "P2RT" | version: u32 = 1 | dtype: u8 | ndim: u32 | dims: ndim x u32 | payload
//! ```
//!
//! dtype 0 is `f32`, dtype 1 is `f64`. The payload is row-major and exactly
//! `product(dims) * dtype_size` bytes long.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::error::{Error, Result};
use crate::types::{FeatureMap, ScoreMap};

pub const MAGIC: [u8; 4] = *b"P2RT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TensorFileError {
    #[error("bad magic bytes {0:?}, expected \"P2RT\"")]
    BadMagic([u8; 4]),
    #[error("unsupported tensor file version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown dtype code {0}")]
    BadDtype(u8),
    #[error("truncated tensor file: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{extra} unexpected trailing bytes after payload")]
    TrailingBytes { extra: usize },
    #[error("tensor has {actual} dimensions, expected {expected}")]
    Rank { expected: usize, actual: usize },
    #[error("tensor contains non-finite values")]
    NonFinite,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn from_code(code: u8) -> Result<Self, TensorFileError> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(TensorFileError::BadDtype(other)),
        }
    }
}

/// Dense row-major tensor held in 64-bit floats regardless of storage dtype.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::shape("tensor payload", expected, data.len()));
        }
        Ok(Self { dims, data })
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn into_feature_map(self) -> Result<FeatureMap> {
        match self.dims[..] {
            [c, h, w] => FeatureMap::new(c, h, w, self.data),
            _ => Err(TensorFileError::Rank {
                expected: 3,
                actual: self.dims.len(),
            }
            .into()),
        }
    }

    pub fn into_score_map(self) -> Result<ScoreMap> {
        match self.dims[..] {
            [h, w] => ScoreMap::new(self.data, h, w),
            _ => Err(TensorFileError::Rank {
                expected: 2,
                actual: self.dims.len(),
            }
            .into()),
        }
    }
}

impl From<&FeatureMap> for Tensor {
    fn from(f: &FeatureMap) -> Self {
        Tensor {
            dims: vec![f.channels(), f.height(), f.width()],
            data: f.data().to_vec(),
        }
    }
}

impl From<&ScoreMap> for Tensor {
    fn from(s: &ScoreMap) -> Self {
        Tensor {
            dims: vec![s.height(), s.width()],
            data: s.values().to_vec(),
        }
    }
}

pub fn encode_tensor(tensor: &Tensor, dtype: DType) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + 4 * tensor.dims.len() + tensor.numel() * dtype.size());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype as u8);
    out.extend_from_slice(&(tensor.dims.len() as u32).to_le_bytes());
    for &d in &tensor.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match dtype {
        DType::F32 => tensor
            .data
            .iter()
            .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
        DType::F64 => tensor
            .data
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8], TensorFileError> {
        if self.bytes.len() - self.pos < len {
            return Err(TensorFileError::Truncated {
                expected: self.pos + len,
                actual: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TensorFileError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor, TensorFileError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = match cur.take(4) {
        Ok(m) => m.try_into().unwrap(),
        Err(_) => {
            let mut m = [0u8; 4];
            m[..bytes.len()].copy_from_slice(bytes);
            return Err(TensorFileError::BadMagic(m));
        }
    };
    if magic != MAGIC {
        return Err(TensorFileError::BadMagic(magic));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(TensorFileError::UnsupportedVersion(version));
    }
    let dtype = DType::from_code(cur.take(1)?[0])?;
    let ndim = cur.u32()? as usize;
    let mut dims = Vec::with_capacity(ndim.min(16));
    for _ in 0..ndim {
        dims.push(cur.u32()? as usize);
    }
    let numel: usize = dims.iter().product();
    let payload_len = numel * dtype.size();
    let payload = cur.take(payload_len)?;
    if cur.pos != bytes.len() {
        return Err(TensorFileError::TrailingBytes {
            extra: bytes.len() - cur.pos,
        });
    }
    let data: Vec<f64> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    if data.iter().any(|v| !v.is_finite()) {
        return Err(TensorFileError::NonFinite);
    }
    Ok(Tensor { dims, data })
}

pub fn write_tensor<W: Write>(mut writer: W, tensor: &Tensor, dtype: DType) -> io::Result<()> {
    writer.write_all(&encode_tensor(tensor, dtype))
}

pub fn read_tensor<R: Read>(mut reader: R) -> Result<Tensor, TensorFileError> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    decode_tensor(&bytes)
}

pub fn save_tensor(path: impl AsRef<Path>, tensor: &Tensor, dtype: DType) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(tensor, dtype)).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_tensor(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn feature_map_round_trip() {
        let data: Vec<f64> = (0..18).map(|i| i as f64 * 0.37 - 2.0).collect();
        let fm = FeatureMap::new(2, 3, 3, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.p2rt");
        save_tensor(&path, &Tensor::from(&fm), DType::F64).unwrap();
        let back = load_tensor(&path).unwrap().into_feature_map().unwrap();
        assert_eq!(back, fm);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_tensor(&Tensor::new(vec![1], vec![1.0]).unwrap(), DType::F64);
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_tensor(&bytes), Err(TensorFileError::BadMagic(m)) if &m == b"XXXX"));
    }

    #[test]
    fn bad_dtype() {
        let mut bytes = encode_tensor(&Tensor::new(vec![1], vec![1.0]).unwrap(), DType::F64);
        bytes[8] = 7;
        assert!(matches!(decode_tensor(&bytes), Err(TensorFileError::BadDtype(7))));
    }

    #[test]
    fn truncated_payload_reports_byte_counts() {
        let bytes = encode_tensor(&Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap(), DType::F64);
        let header = 4 + 4 + 1 + 4 + 8;
        let cut = &bytes[..bytes.len() - 5];
        match decode_tensor(cut) {
            Err(TensorFileError::Truncated { expected, actual }) => {
                assert_eq!(expected, header + 32);
                assert_eq!(actual, header + 27);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn f32_payload_is_widened() {
        let t = Tensor::new(vec![3], vec![0.5, -1.25, 3.0]).unwrap();
        let back = decode_tensor(&encode_tensor(&t, DType::F32)).unwrap();
        assert_eq!(back, t);
    }

    proptest! {
        #[test]
        fn f64_round_trip_is_bit_exact(
            dims in proptest::collection::vec(1usize..4, 0..4),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|i| f64::from_bits((seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)) >> 2))
                .map(|v| if v.is_finite() { v } else { 0.0 })
                .collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = decode_tensor(&encode_tensor(&t, DType::F64)).unwrap();
            prop_assert_eq!(&back.dims, &t.dims);
            for (a, b) in back.data.iter().zip(&t.data) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
