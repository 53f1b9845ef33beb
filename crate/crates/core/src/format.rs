//! The `PQKT` binary tensor format.
//!
//! ```text
//! magic "PQKT" | version u8 = 1 | dtype u8 | rank u8 | rank x u64 LE dims | payload
//! ```
//!
//! dtype 0 is `f32` LE, 1 is `i8`, 2 is a bit-packed boolean tensor
//! (LSB-first, `ceil(numel / 8)` bytes).

use std::path::Path;

use crate::error::{PqkError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PQKT";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    I8 = 1,
    Bits = 2,
}

/// One decoded tensor record of any dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    F32(Tensor),
    I8 { shape: Vec<usize>, data: Vec<i8> },
    Bits { shape: Vec<usize>, bits: Vec<bool> },
}

impl Record {
    pub fn dtype(&self) -> DType {
        match self {
            Record::F32(_) => DType::F32,
            Record::I8 { .. } => DType::I8,
            Record::Bits { .. } => DType::Bits,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Record::F32(t) => t.shape(),
            Record::I8 { shape, .. } | Record::Bits { shape, .. } => shape,
        }
    }

    /// Numeric view; `i8` codes and bits become their values as `f32`.
    pub fn into_tensor(self) -> Tensor {
        match self {
            Record::F32(t) => t,
            Record::I8 { shape, data } => Tensor::from_parts(shape, data.into_iter().map(f32::from).collect()),
            Record::Bits { shape, bits } => {
                Tensor::from_parts(shape, bits.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect())
            }
        }
    }
}

pub fn encode(record: &Record) -> Vec<u8> {
    let shape = record.shape();
    let mut out = Vec::with_capacity(7 + 8 * shape.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(record.dtype() as u8);
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match record {
        Record::F32(t) => {
            out.reserve(4 * t.numel());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Record::I8 { data, .. } => out.extend(data.iter().map(|&c| c as u8)),
        Record::Bits { bits, .. } => {
            let mut packed = vec![0u8; bits.len().div_ceil(8)];
            for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
                packed[i / 8] |= 1 << (i % 8);
            }
            out.extend_from_slice(&packed);
        }
    }
    out
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    encode(&Record::F32(t.clone()))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: u64,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(PqkError::format(
                self.base + self.pos as u64,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn offset(&self) -> u64 {
        self.base + self.pos as u64
    }
}

/// Decodes one record from the front of `bytes`, returning it and the number
/// of bytes consumed. `base` is added to offsets in error messages.
pub fn decode(bytes: &[u8], base: u64) -> Result<(Record, usize)> {
    let mut r = Reader { bytes, pos: 0, base };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(PqkError::format(base, format!("bad magic {magic:?}, expected \"PQKT\"")));
    }
    let at = r.offset();
    let version = r.take(1, "version")?[0];
    if version != VERSION {
        return Err(PqkError::format(at, format!("unsupported version {version}")));
    }
    let at = r.offset();
    let dtype = match r.take(1, "dtype")?[0] {
        0 => DType::F32,
        1 => DType::I8,
        2 => DType::Bits,
        other => return Err(PqkError::format(at, format!("unknown dtype {other}"))),
    };
    let rank = r.take(1, "rank")?[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let at = r.offset();
        let d = u64::from_le_bytes(r.take(8, "dimension")?.try_into().expect("8 bytes"));
        if d == 0 || d > u32::MAX as u64 {
            return Err(PqkError::format(at, format!("invalid dimension {d}")));
        }
        shape.push(d as usize);
    }
    let at = r.offset();
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= (1 << 40))
        .ok_or_else(|| PqkError::format(at, "element count overflows"))?;
    let record = match dtype {
        DType::F32 => {
            let raw = r.take(4 * numel, "f32 payload")?;
            let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
            Record::F32(Tensor::from_parts(shape, data))
        }
        DType::I8 => {
            let data = r.take(numel, "i8 payload")?.iter().map(|&b| b as i8).collect();
            Record::I8 { shape, data }
        }
        DType::Bits => {
            let packed = r.take(numel.div_ceil(8), "bit payload")?;
            let bits = (0..numel).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
            Record::Bits { shape, bits }
        }
    };
    Ok((record, r.pos))
}

/// Decodes a buffer holding exactly one record.
pub fn decode_exact(bytes: &[u8], base: u64) -> Result<Record> {
    let (record, used) = decode(bytes, base)?;
    if used != bytes.len() {
        return Err(PqkError::format(
            base + used as u64,
            format!("{} trailing bytes after tensor record", bytes.len() - used),
        ));
    }
    Ok(record)
}

pub fn write_record_file(path: &Path, record: &Record) -> Result<()> {
    std::fs::write(path, encode(record)).map_err(|e| PqkError::io(path, e))
}

pub fn read_record_file(path: &Path) -> Result<Record> {
    let bytes = std::fs::read(path).map_err(|e| PqkError::io(path, e))?;
    decode_exact(&bytes, 0)
}

pub fn write_tensor_file(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_tensor(t)).map_err(|e| PqkError::io(path, e))
}

/// Reads a tensor file of any dtype as `f32`.
pub fn read_tensor_file(path: &Path) -> Result<Tensor> {
    Ok(read_record_file(path)?.into_tensor())
}
