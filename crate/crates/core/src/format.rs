//! Little-endian binary container shared by H-Net, perceptual-net and
//! detector files: 4 magic bytes, a `u32` format version, a kind-specific
//! header, then tensors as `u32 ndim`, `ndim x u32` dims and `f32` data.

use naturalize_autodiff::{Float, Tensor};
use thiserror::Error;

pub const MAX_NDIM: usize = 8;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("format version {found} not supported (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("file truncated: needed {needed} byte(s) at offset {offset}")]
    Truncated { needed: usize, offset: usize },
    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl FormatError {
    /// Stable numeric code per failure class.
    pub fn code(&self) -> u8 {
        match self {
            FormatError::BadMagic { .. } => 1,
            FormatError::VersionMismatch { .. } => 2,
            FormatError::Truncated { .. } => 3,
            FormatError::ArchMismatch(_) => 4,
            FormatError::Malformed(_) => 5,
            FormatError::Io(_) => 6,
        }
    }
}

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u32(version);
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    /// Length-prefixed list of `u32`s.
    pub fn field(&mut self, values: &[usize]) {
        self.u32(values.len() as u32);
        for &v in values {
            self.u32(v as u32);
        }
    }

    pub fn tensor<T: Float>(&mut self, t: &Tensor<T>) {
        self.u32(t.ndim() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for v in t.data() {
            self.buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }

    pub fn tensors<'a, T: Float>(&mut self, ts: impl IntoIterator<Item = &'a Tensor<T>>) {
        let ts: Vec<_> = ts.into_iter().collect();
        self.u32(ts.len() as u32);
        for t in ts {
            self.tensor(t);
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks magic and version, leaving the cursor on the header.
    pub fn open(data: &'a [u8], magic: &[u8; 4], version: u32) -> Result<Self, FormatError> {
        let mut r = Reader { data, pos: 0 };
        let found = r.take(4)?;
        if found != magic {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        let v = r.u32()?;
        if v != version {
            return Err(FormatError::VersionMismatch { expected: version, found: v });
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.data.len().saturating_sub(self.pos) < n {
            return Err(FormatError::Truncated { needed: n, offset: self.pos });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn field(&mut self) -> Result<Vec<usize>, FormatError> {
        let n = self.u32()? as usize;
        if n > self.remaining() / 4 {
            return Err(FormatError::Truncated { needed: n * 4, offset: self.pos });
        }
        (0..n).map(|_| self.u32().map(|v| v as usize)).collect()
    }

    pub fn tensor<T: Float>(&mut self) -> Result<Tensor<T>, FormatError> {
        let ndim = self.u32()? as usize;
        if ndim > MAX_NDIM {
            return Err(FormatError::Malformed(format!("tensor rank {ndim} exceeds {MAX_NDIM}")));
        }
        let shape = (0..ndim).map(|_| self.u32().map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| FormatError::Malformed(format!("tensor shape {shape:?} overflows")))?;
        let bytes =
            count.checked_mul(4).ok_or_else(|| FormatError::Malformed(format!("tensor shape {shape:?} overflows")))?;
        let raw = self.take(bytes)?;
        let data =
            raw.chunks_exact(4).map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect();
        Tensor::new(shape, data).map_err(|e| FormatError::Malformed(e.to_string()))
    }

    pub fn tensors<T: Float>(&mut self) -> Result<Vec<Tensor<T>>, FormatError> {
        let n = self.u32()? as usize;
        // Every tensor takes at least four bytes.
        if n > self.remaining() / 4 {
            return Err(FormatError::Truncated { needed: n * 4, offset: self.pos });
        }
        (0..n).map(|_| self.tensor()).collect()
    }

    pub fn finish(self) -> Result<(), FormatError> {
        if self.pos != self.data.len() {
            return Err(FormatError::Malformed(format!("{} trailing byte(s)", self.data.len() - self.pos)));
        }
        Ok(())
    }
}

/// Overwrites `dst` tensors with `src`, requiring identical shapes.
pub fn assign_all<T: Float>(dst: Vec<&mut Tensor<T>>, src: Vec<Tensor<T>>, what: &str) -> Result<(), FormatError> {
    if dst.len() != src.len() {
        return Err(FormatError::Malformed(format!("{what}: expected {} tensors, found {}", dst.len(), src.len())));
    }
    for (i, (d, s)) in dst.into_iter().zip(src).enumerate() {
        if d.shape() != s.shape() {
            return Err(FormatError::Malformed(format!(
                "{what}: tensor {i} has shape {:?}, expected {:?}",
                s.shape(),
                d.shape()
            )));
        }
        *d = s;
    }
    Ok(())
}
