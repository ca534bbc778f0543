//! Little-endian binary container shared by every artifact.
//!
//! A file starts with the magic bytes `DDSFL\0`, a `u16` format version and
//! a length-prefixed kind string, followed by the payload. Matrices are
//! written as `u32` rows, `u32` cols and row-major values; strings as a
//! `u32` byte length and UTF-8 bytes.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::mathkit::Matrix;

pub const MAGIC: &[u8; 6] = b"DDSFL\0";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(kind: &str) -> Self {
        let mut w = Self { buf: Vec::new() };
        w.buf.extend_from_slice(MAGIC);
        w.u16(FORMAT_VERSION);
        w.string(kind);
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn usize(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("size fits in u32"));
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bool(&mut self, v: bool) {
        self.u8(v as u8);
    }

    pub fn string(&mut self, s: &str) {
        self.usize(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }

    /// Values are narrowed to `f32`.
    pub fn matrix_f32(&mut self, m: &Matrix) {
        self.usize(m.rows());
        self.usize(m.cols());
        for &v in m.as_slice() {
            self.buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    pub fn matrix_f64(&mut self, m: &Matrix) {
        self.usize(m.rows());
        self.usize(m.cols());
        for &v in m.as_slice() {
            self.f64(v);
        }
    }

    pub fn vec_f32(&mut self, v: &[f64]) {
        self.matrix_f32(&Matrix::from_vec(1, v.len(), v.to_vec()).expect("row vector"));
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks magic, version and kind.
    pub fn new(buf: &'a [u8], kind: &str) -> Result<Self> {
        if buf.len() < MAGIC.len() || &buf[..MAGIC.len()] != MAGIC {
            return Err(FormatError::BadMagic.into());
        }
        let mut r = Self { buf, pos: MAGIC.len() };
        let version = r.u16("version")?;
        if version != FORMAT_VERSION {
            return Err(FormatError::VersionMismatch {
                found: version,
                supported: FORMAT_VERSION,
            }
            .into());
        }
        let found = r.string("kind")?;
        if found != kind {
            return Err(FormatError::WrongKind {
                found,
                expected: kind.to_string(),
            }
            .into());
        }
        Ok(r)
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(FormatError::Truncated(what).into());
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub fn usize(&mut self, what: &'static str) -> Result<usize> {
        Ok(self.u32(what)? as usize)
    }

    pub fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self, what: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    pub fn bool(&mut self, what: &'static str) -> Result<bool> {
        match self.u8(what)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(FormatError::Inconsistent(format!("{what}: boolean byte {v}")).into()),
        }
    }

    pub fn string(&mut self, what: &'static str) -> Result<String> {
        let n = self.usize(what)?;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| FormatError::BadString.into())
    }

    fn dims(&mut self, what: &'static str, width: usize) -> Result<(usize, usize)> {
        let rows = self.usize(what)?;
        let cols = self.usize(what)?;
        let need = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(width))
            .ok_or(FormatError::Truncated(what))?;
        if self.buf.len() - self.pos < need {
            return Err(FormatError::Truncated(what).into());
        }
        Ok((rows, cols))
    }

    pub fn matrix_f32(&mut self, what: &'static str) -> Result<Matrix> {
        let (rows, cols) = self.dims(what, 4)?;
        let bytes = self.take(rows * cols * 4, what)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Matrix::from_vec(rows, cols, data)
    }

    pub fn matrix_f64(&mut self, what: &'static str) -> Result<Matrix> {
        let (rows, cols) = self.dims(what, 8)?;
        let bytes = self.take(rows * cols * 8, what)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Matrix::from_vec(rows, cols, data)
    }

    pub fn vec_f32(&mut self, what: &'static str) -> Result<Vec<f64>> {
        let m = self.matrix_f32(what)?;
        if m.rows() != 1 {
            return Err(FormatError::Inconsistent(format!("{what}: expected a row vector")).into());
        }
        Ok(m.into_vec())
    }

    /// Errors unless every byte was consumed.
    pub fn finish(self) -> Result<()> {
        let rest = self.buf.len() - self.pos;
        if rest != 0 {
            return Err(FormatError::TrailingData(rest).into());
        }
        Ok(())
    }
}

/// Writes `bytes` to a temporary file beside `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
