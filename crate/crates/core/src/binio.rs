//! Little-endian helpers shared by the binary artifact formats.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

fn fmt_err(what: &str) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Format(format!("{what}: {e}"))
}

pub(crate) struct BinWriter<W: Write> {
    inner: W,
}

impl<W: Write> BinWriter<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.inner.write_all(b).map_err(Error::io("writing binary"))
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        self.inner
            .write_u32::<LittleEndian>(v)
            .map_err(Error::io("writing binary"))
    }

    pub fn u64(&mut self, v: u64) -> Result<()> {
        self.inner
            .write_u64::<LittleEndian>(v)
            .map_err(Error::io("writing binary"))
    }

    pub fn usize(&mut self, v: usize) -> Result<()> {
        self.u64(v as u64)
    }

    pub fn f64(&mut self, v: f64) -> Result<()> {
        self.inner
            .write_f64::<LittleEndian>(v)
            .map_err(Error::io("writing binary"))
    }

    pub fn f64s(&mut self, vs: &[f64]) -> Result<()> {
        let mut buf = Vec::with_capacity(vs.len() * 8);
        for v in vs {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.bytes(&buf)
    }

    pub fn str(&mut self, s: &str) -> Result<()> {
        self.u32(s.len() as u32)?;
        self.bytes(s.as_bytes())
    }
}

pub(crate) struct BinReader<R: Read> {
    inner: R,
}

impl<R: Read> BinReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner }
    }

    pub fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        let mut buf = vec![0u8; magic.len()];
        self.inner.read_exact(&mut buf).map_err(fmt_err("magic"))?;
        if buf != magic {
            return Err(Error::Format(format!(
                "expected magic {:?}, found {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(&buf)
            )));
        }
        Ok(())
    }

    pub fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(fmt_err("bytes"))?;
        Ok(buf)
    }

    pub fn u32(&mut self) -> Result<u32> {
        self.inner.read_u32::<LittleEndian>().map_err(fmt_err("u32"))
    }

    pub fn u64(&mut self) -> Result<u64> {
        self.inner.read_u64::<LittleEndian>().map_err(fmt_err("u64"))
    }

    /// Reads a u64 length and rejects values above `limit`.
    pub fn len(&mut self, limit: usize) -> Result<usize> {
        let v = self.u64()?;
        if v > limit as u64 {
            return Err(Error::Format(format!("length {v} exceeds limit {limit}")));
        }
        Ok(v as usize)
    }

    pub fn f64(&mut self) -> Result<f64> {
        self.inner.read_f64::<LittleEndian>().map_err(fmt_err("f64"))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.bytes(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.bytes(n)?).map_err(|e| Error::Format(e.to_string()))
    }

    /// Errors unless the stream is exhausted.
    pub fn finish(mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe) {
            Ok(0) => Ok(()),
            Ok(_) => Err(Error::Format("trailing bytes".into())),
            Err(e) => Err(Error::Format(e.to_string())),
        }
    }
}
