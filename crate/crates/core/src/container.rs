//! Little-endian binary containers shared by every on-disk model format.
//!
//! Each container starts with a four byte magic tag followed by a `u32`
//! version. Everything after that is format specific and written with the
//! helpers below.

use std::io::{Read, Write};

use crate::error::{Result, RomError};

pub const VERSION: u32 = 1;

pub struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    pub fn new(mut inner: W, magic: &[u8; 4]) -> Result<Self> {
        inner.write_all(magic)?;
        inner.write_all(&VERSION.to_le_bytes())?;
        Ok(Self { inner })
    }

    pub fn u8(&mut self, v: u8) -> Result<()> {
        self.inner.write_all(&[v])?;
        Ok(())
    }

    pub fn u16(&mut self, v: u16) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    pub fn u64(&mut self, v: u64) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    /// Writes a `usize` as `u32`, rejecting values that do not fit.
    pub fn len32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| RomError::arg(format!("dimension {v} does not fit in u32")))?;
        self.u32(v)
    }

    pub fn f64(&mut self, v: f64) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    pub fn f64s(&mut self, vs: &[f64]) -> Result<()> {
        let mut buf = Vec::with_capacity(vs.len() * 8);
        for v in vs {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.inner.write_all(&buf)?;
        Ok(())
    }

    /// `u16` byte length followed by UTF-8 bytes.
    pub fn label(&mut self, s: &str) -> Result<()> {
        let len =
            u16::try_from(s.len()).map_err(|_| RomError::arg(format!("label of {} bytes is too long", s.len())))?;
        self.u16(len)?;
        self.inner.write_all(s.as_bytes())?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub struct Reader<R: Read> {
    inner: R,
    what: &'static str,
}

impl<R: Read> Reader<R> {
    /// Checks the magic tag and version.
    pub fn new(mut inner: R, magic: &[u8; 4], what: &'static str) -> Result<Self> {
        let mut tag = [0u8; 4];
        inner
            .read_exact(&mut tag)
            .map_err(|_| RomError::Format(format!("{what}: file too short for header")))?;
        if &tag != magic {
            return Err(RomError::Format(format!(
                "{what}: bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&tag),
                String::from_utf8_lossy(magic)
            )));
        }
        let mut reader = Self { inner, what };
        let version = reader.u32()?;
        if version != VERSION {
            return Err(RomError::Format(format!("{what}: unsupported version {version}")));
        }
        Ok(reader)
    }

    fn exact<const K: usize>(&mut self) -> Result<[u8; K]> {
        let mut buf = [0u8; K];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| RomError::Format(format!("{}: unexpected end of file", self.what)))?;
        Ok(buf)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.exact::<1>()?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.exact()?))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.exact()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.exact()?))
    }

    pub fn len32(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.exact()?))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| RomError::Format(format!("{}: length overflow", self.what)))?;
        let mut buf = vec![0u8; bytes];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| RomError::Format(format!("{}: unexpected end of file", self.what)))?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }

    pub fn label(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let mut buf = vec![0u8; len];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| RomError::Format(format!("{}: truncated label", self.what)))?;
        String::from_utf8(buf).map_err(|_| RomError::Format(format!("{}: label is not UTF-8", self.what)))
    }

    /// Fails if any bytes remain after the payload.
    pub fn finish(mut self) -> Result<()> {
        let mut rest = [0u8; 1];
        match self.inner.read(&mut rest)? {
            0 => Ok(()),
            _ => Err(RomError::Format(format!("{}: trailing bytes", self.what))),
        }
    }
}
