//! Little-endian binary container shared by every persisted artifact.
//!
//! Layout: 4-byte magic, `u32` format version, body, and a trailing CRC-32
//! (IEEE) over every preceding byte.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub(crate) struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut buf = Vec::with_capacity(1 << 12);
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&version.to_le_bytes());
        Encoder { buf }
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

    pub fn usize32(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("value exceeds u32 range"));
    }

    pub fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }

    pub fn str(&mut self, s: &str) {
        self.usize32(s.len());
        self.bytes(s.as_bytes());
    }

    pub fn f32s(&mut self, v: &[f32]) {
        self.buf.reserve(v.len() * 4);
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn u32s(&mut self, v: &[u32]) {
        self.buf.reserve(v.len() * 4);
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }

    pub fn write_to(self, path: &Path) -> Result<()> {
        let bytes = self.finish();
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

pub(crate) struct Decoder<'a> {
    path: PathBuf,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    /// Validates magic, checksum and version, in that order, and positions the
    /// cursor at the start of the body.
    pub fn open(path: &Path, bytes: &'a [u8], magic: &[u8; 4], version: u32) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != magic {
            return Err(Error::format(
                path,
                0,
                format!("missing magic {:?}", String::from_utf8_lossy(magic)),
            ));
        }
        if bytes.len() < 12 {
            return Err(Error::format(path, bytes.len() as u64, "file too short"));
        }
        let body_end = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(Error::Checksum {
                path: path.to_path_buf(),
                stored,
                computed,
            });
        }
        let found = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if found != version {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found,
                expected: version,
            });
        }
        Ok(Decoder {
            path: path.to_path_buf(),
            buf: &bytes[..body_end],
            pos: 8,
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                &self.path,
                self.pos as u64,
                format!("expected {n} more bytes"),
            ));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn usize32(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.usize32()?;
        let at = self.pos;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::format(&self.path, at as u64, "invalid utf-8 string"))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.err("length overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.err("length overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn err(&self, msg: impl Into<String>) -> Error {
        Error::format(&self.path, self.pos as u64, msg)
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err("trailing bytes after body"));
        }
        Ok(())
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads the 4-byte magic of a file without validating the rest.
pub fn peek_magic(path: &Path) -> Result<[u8; 4]> {
    use std::io::Read;
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)
        .map_err(|_| Error::format(path, 0, "file too short for a magic header"))?;
    Ok(magic)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_corruption() {
        let mut enc = Encoder::new(b"TEST", 3);
        enc.u32(7);
        enc.str("abc");
        enc.f32s(&[1.5, -2.0]);
        let bytes = enc.finish();
        let p = Path::new("mem");
        let mut dec = Decoder::open(p, &bytes, b"TEST", 3).unwrap();
        assert_eq!(dec.u32().unwrap(), 7);
        assert_eq!(dec.str().unwrap(), "abc");
        assert_eq!(dec.f32s(2).unwrap(), vec![1.5, -2.0]);
        dec.finish().unwrap();

        assert!(matches!(
            Decoder::open(p, &bytes[..bytes.len() - 3], b"TEST", 3),
            Err(Error::Checksum { .. })
        ));
        assert!(matches!(
            Decoder::open(p, &bytes, b"TEST", 4),
            Err(Error::Version { found: 3, .. })
        ));
        assert!(matches!(
            Decoder::open(p, &bytes, b"NOPE", 3),
            Err(Error::Format { .. })
        ));
    }
}
