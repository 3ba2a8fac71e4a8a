//! Versioned little-endian binary containers with a trailing SHA-256 over
//! every preceding byte.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

const CHECKSUM_LEN: usize = 32;

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u16) -> Self {
        let mut buf = Vec::with_capacity(1 << 16);
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&version.to_le_bytes());
        Self { buf }
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

    pub fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.buf.extend_from_slice(b);
    }

    pub fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }

    pub fn shape(&mut self, shape: &[usize]) {
        self.u8(shape.len() as u8);
        for &d in shape {
            self.u32(d as u32);
        }
    }

    pub fn tensor<S: Scalar>(&mut self, t: &Tensor<S>) {
        self.u8(S::DTYPE.code());
        self.shape(t.shape());
        match S::DTYPE {
            DType::F32 => {
                for v in t.data() {
                    self.buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
                }
            }
            DType::F64 => {
                for v in t.data() {
                    self.buf.extend_from_slice(&v.as_f64().to_le_bytes());
                }
            }
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        let digest = Sha256::digest(&self.buf);
        self.buf.extend_from_slice(&digest);
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    /// Verifies magic, version and checksum, returning a reader positioned
    /// after the header.
    pub fn open(buf: &'a [u8], magic: &[u8; 4], version: u16, origin: &'a Path) -> Result<Self> {
        if buf.len() < 6 + CHECKSUM_LEN {
            return Err(Error::Truncated {
                path: origin.to_path_buf(),
                detail: format!("{} bytes is shorter than any container", buf.len()),
            });
        }
        if &buf[..4] != magic {
            return Err(Error::BadMagic {
                path: origin.to_path_buf(),
                observed: u32::from_be_bytes(buf[..4].try_into().unwrap()),
                expected: u32::from_be_bytes(*magic),
            });
        }
        let (body, tail) = buf.split_at(buf.len() - CHECKSUM_LEN);
        if Sha256::digest(body).as_slice() != tail {
            return Err(Error::Container {
                path: origin.to_path_buf(),
                detail: "checksum mismatch".into(),
            });
        }
        let found = u16::from_le_bytes([buf[4], buf[5]]);
        if found != version {
            return Err(Error::Container {
                path: origin.to_path_buf(),
                detail: format!("unsupported version {found} (expected {version})"),
            });
        }
        Ok(Self {
            buf: body,
            pos: 6,
            origin,
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated {
                path: self.origin.to_path_buf(),
                detail: format!("needed {n} bytes at offset {}", self.pos),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }

    pub fn str(&mut self) -> Result<String> {
        let b = self.bytes()?;
        String::from_utf8(b.to_vec()).map_err(|_| self.invalid("string is not UTF-8"))
    }

    pub fn shape(&mut self) -> Result<Vec<usize>> {
        let nd = self.u8()? as usize;
        (0..nd).map(|_| self.u32().map(|d| d as usize)).collect()
    }

    pub fn tensor<S: Scalar>(&mut self) -> Result<Tensor<S>> {
        let code = self.u8()?;
        let dtype = DType::from_code(code).ok_or_else(|| self.invalid(&format!("unknown dtype code {code}")))?;
        let shape = self.shape()?;
        let n: usize = shape.iter().product();
        let data = match dtype {
            DType::F32 => self
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| S::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect(),
            DType::F64 => self
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| S::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        };
        Tensor::new(shape, data).map_err(|e| self.invalid(&e.to_string()))
    }

    pub fn invalid(&self, detail: &str) -> Error {
        Error::Container {
            path: self.origin.to_path_buf(),
            detail: detail.to_string(),
        }
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(self.invalid(&format!("{} trailing bytes", self.buf.len() - self.pos)))
        }
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partially written file.
pub(crate) fn write_file_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
