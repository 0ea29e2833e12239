//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `CVFC`, `u32` version, `u32` array count,
//! then per array a `u16` name length, the UTF-8 name, a `u8` dtype code,
//! a `u8` rank, `rank × u64` dims and the raw row-major data. A `u32`
//! CRC32 of everything before it closes the file.
//!
//! Dtype codes: 0 = f32, 1 = f64, 2 = u64, 3 = u8.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"CVFC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
    U8(Vec<u8>),
}

impl ArrayData {
    fn code(&self) -> u8 {
        match self {
            ArrayData::F32(_) => DType::F32.code(),
            ArrayData::F64(_) => DType::F64.code(),
            ArrayData::U64(_) => 2,
            ArrayData::U8(_) => 3,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U64(v) => v.len(),
            ArrayData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

/// Ordered list of named arrays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub arrays: Vec<NamedArray>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: ArrayData) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize || shape.len() > u8::MAX as usize {
            return Err(Error::Argument(format!("checkpoint entry `{name}` too large")));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Dimension(format!(
                "checkpoint entry `{name}`: shape {shape:?} vs {} values",
                data.len()
            )));
        }
        if self.get(&name).is_some() {
            return Err(Error::Argument(format!("duplicate checkpoint entry `{name}`")));
        }
        self.arrays.push(NamedArray { name, shape, data });
        Ok(())
    }

    pub fn push_tensor<S: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<S>) -> Result<()> {
        let data = match S::DTYPE {
            DType::F32 => ArrayData::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
            DType::F64 => ArrayData::F64(t.data().iter().map(|v| v.as_f64()).collect()),
        };
        self.push(name, t.shape().to_vec(), data)
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    fn require(&self, name: &str) -> Result<&NamedArray> {
        self.get(name)
            .ok_or_else(|| corrupt(format!("missing entry `{name}`")))
    }

    /// A float entry as a tensor of the requested dtype; the stored dtype
    /// must match.
    pub fn tensor<S: Scalar>(&self, name: &str) -> Result<Tensor<S>> {
        let a = self.require(name)?;
        let data: Vec<S> = match (&a.data, S::DTYPE) {
            (ArrayData::F32(v), DType::F32) => v.iter().map(|&x| S::from_f64(x as f64)).collect(),
            (ArrayData::F64(v), DType::F64) => v.iter().map(|&x| S::from_f64(x)).collect(),
            _ => return Err(corrupt(format!("entry `{name}` has dtype code {}", a.data.code()))),
        };
        Tensor::new(&a.shape, data).map_err(|e| corrupt(format!("entry `{name}`: {e}")))
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match &self.require(name)?.data {
            ArrayData::U64(v) => Ok(v),
            _ => Err(corrupt(format!("entry `{name}` is not u64"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match &self.require(name)?.data {
            ArrayData::U8(v) => Ok(v),
            _ => Err(corrupt(format!("entry `{name}` is not u8"))),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            out.extend_from_slice(&(a.name.len() as u16).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.push(a.data.code());
            out.push(a.shape.len() as u8);
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &a.data {
                ArrayData::F32(v) => f32::to_le_bytes_vec(v, &mut out),
                ArrayData::F64(v) => f64::to_le_bytes_vec(v, &mut out),
                ArrayData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::U8(v) => out.extend_from_slice(v),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        if bytes.len() < 8 {
            return Err(corrupt("truncated header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        if bytes.len() < 16 {
            return Err(corrupt("truncated file"));
        }
        let (body, footer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(footer.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(corrupt("CRC mismatch"));
        }

        let mut r = Reader { buf: body, pos: 8 };
        let count = r.u32()? as usize;
        let mut ckpt = Checkpoint::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| corrupt("entry name is not UTF-8"))?
                .to_string();
            let code = r.u8()?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(usize::try_from(r.u64()?).map_err(|_| corrupt("dimension overflow"))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| corrupt("size overflow"))?;
            let width = match code {
                0 => 4,
                1 | 2 => 8,
                3 => 1,
                c => return Err(corrupt(format!("unknown dtype code {c} for `{name}`"))),
            };
            let raw = r.take(n.checked_mul(width).ok_or_else(|| corrupt("size overflow"))?)?;
            let data = match code {
                0 => ArrayData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                1 => ArrayData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
                2 => ArrayData::U64(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
                _ => ArrayData::U8(raw.to_vec()),
            };
            ckpt.push(name, shape, data).map_err(|e| corrupt(e.to_string()))?;
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&bytes)
    }
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
            .ok_or_else(|| corrupt("unexpected end of data"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.push_tensor("w", &Tensor::<f32>::from_f64(&[2, 2], &[1.0, -0.5, f32::MIN_POSITIVE as f64, 3.25]).unwrap())
            .unwrap();
        c.push_tensor("d", &Tensor::<f64>::from_f64(&[3], &[0.1, 0.2, -1e-300]).unwrap())
            .unwrap();
        c.push("rng", vec![2], ArrayData::U64(vec![7, u64::MAX])).unwrap();
        c.push("cfg", vec![3], ArrayData::U8(b"{ }".to_vec())).unwrap();
        c
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let bytes = c.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.encode(), bytes);
        assert_eq!(back.tensor::<f64>("d").unwrap().data()[2].to_bits(), (-1e-300f64).to_bits());
        assert!(back.tensor::<f64>("w").is_err());
    }

    #[test]
    fn header_layout() {
        let bytes = sample().encode();
        assert_eq!(&bytes[..4], b"CVFC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 4);
        assert_eq!(u16::from_le_bytes(bytes[12..14].try_into().unwrap()), 1);
        assert_eq!(bytes[14], b'w');
        assert_eq!(bytes[15], 0);
        assert_eq!(bytes[16], 2);
    }

    #[test]
    fn truncation_is_corrupt() {
        let bytes = sample().encode();
        for cut in [0, 3, 9, 20, bytes.len() - 1] {
            assert!(
                matches!(Checkpoint::decode(&bytes[..cut]), Err(Error::CorruptCheckpoint(_))),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn flipped_byte_is_corrupt() {
        let mut bytes = sample().encode();
        bytes[30] ^= 1;
        assert!(matches!(Checkpoint::decode(&bytes), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn version_bump_is_reported() {
        let mut bytes = sample().encode();
        bytes[4] = 2;
        assert!(matches!(
            Checkpoint::decode(&bytes),
            Err(Error::CheckpointVersion { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn push_validates() {
        let mut c = sample();
        assert!(c.push("w", vec![1], ArrayData::U8(vec![0])).is_err());
        assert!(c.push("x", vec![2], ArrayData::U8(vec![0])).is_err());
    }
}
