//! Offset-tracking little-endian readers/writers for the binary container
//! formats. Every read failure reports the byte offset where decoding
//! stopped, so format errors in corrupt stores are pin-pointable.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub(crate) struct Reader<R> {
    inner: R,
    path: PathBuf,
    offset: u64,
}

impl Reader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(Reader {
            inner: BufReader::new(file),
            path: path.to_path_buf(),
            offset: 0,
        })
    }
}

impl<R: Read> Reader<R> {
    pub fn offset(&self) -> u64 {
        self.offset
    }

    /// Builds a format error at the current offset.
    pub fn error(&self, reason: impl Into<String>) -> Error {
        Error::format(&self.path, self.offset, reason)
    }

    /// Builds a format error at an explicit offset (e.g. the start of the
    /// record that turned out to be invalid).
    pub fn error_at(&self, offset: u64, reason: impl Into<String>) -> Error {
        Error::format(&self.path, offset, reason)
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                Err(self.error("unexpected end of file"))
            }
            Err(e) => Err(Error::io(&self.path, e)),
        }
    }

    pub fn magic(&mut self, expected: &[u8; 4], format_name: &str) -> Result<()> {
        let mut buf = [0u8; 4];
        self.fill(&mut buf)?;
        if &buf != expected {
            return Err(self.error_at(
                0,
                format!(
                    "bad magic {:?}, expected {:?} ({format_name})",
                    String::from_utf8_lossy(&buf),
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        let mut buf = [0u8; 1];
        self.fill(&mut buf)?;
        Ok(buf[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        let mut buf = [0u8; 2];
        self.fill(&mut buf)?;
        Ok(u16::from_le_bytes(buf))
    }

    pub fn u32(&mut self) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.fill(&mut buf)?;
        Ok(u32::from_le_bytes(buf))
    }

    pub fn f64(&mut self) -> Result<f64> {
        let mut buf = [0u8; 8];
        self.fill(&mut buf)?;
        Ok(f64::from_le_bytes(buf))
    }

    /// Reads `n` consecutive f32 values.
    pub fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let mut bytes = vec![0u8; n * 4];
        self.fill(&mut bytes)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    /// Reads a length-prefixed (u16) UTF-8 string.
    pub fn short_string(&mut self) -> Result<String> {
        let start = self.offset;
        let len = self.u16()? as usize;
        let mut bytes = vec![0u8; len];
        self.fill(&mut bytes)?;
        String::from_utf8(bytes).map_err(|_| self.error_at(start, "string is not valid UTF-8"))
    }

    /// Asserts that the stream is exhausted; trailing bytes are a format
    /// error (they indicate truncated writes or a length-field mismatch).
    pub fn expect_eof(&mut self) -> Result<()> {
        let mut buf = [0u8; 1];
        match self.inner.read_exact(&mut buf) {
            Ok(()) => Err(self.error("trailing bytes after final record")),
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Ok(()),
            Err(e) => Err(Error::io(&self.path, e)),
        }
    }
}

pub(crate) struct Writer {
    inner: BufWriter<File>,
    path: PathBuf,
}

impl Writer {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Writer {
            inner: BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    fn put(&mut self, bytes: &[u8]) -> Result<()> {
        self.inner
            .write_all(bytes)
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        self.put(magic)
    }

    pub fn u8(&mut self, v: u8) -> Result<()> {
        self.put(&[v])
    }

    pub fn u16(&mut self, v: u16) -> Result<()> {
        self.put(&v.to_le_bytes())
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        self.put(&v.to_le_bytes())
    }

    pub fn f64(&mut self, v: f64) -> Result<()> {
        self.put(&v.to_le_bytes())
    }

    pub fn f32_slice(&mut self, values: &[f32]) -> Result<()> {
        for v in values {
            self.put(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Writes a length-prefixed (u16) UTF-8 string.
    pub fn short_string(&mut self, s: &str) -> Result<()> {
        let len: u16 = s
            .len()
            .try_into()
            .map_err(|_| Error::validation(format!("string too long for u16 length prefix: {s:?}")))?;
        self.u16(len)?;
        self.put(s.as_bytes())
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }
}
