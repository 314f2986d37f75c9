//! Binary record archive shared by embedding tables and checkpoints.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! header : magic "PRTA" | version | width | record count
//! record : key length | key bytes | sub length | sub bytes | n | n × f32 LE
//! ```
//!
//! Embedding files use `width = d_w` with records keyed by (type, value).
//! Checkpoint parameter files use `width = 0` (variable length) with records
//! keyed by (tensor name, shape such as `8x3x4x4`).

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PRTA";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub key: String,
    pub sub: String,
    pub values: Vec<f32>,
}

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

pub fn write_archive(mut w: impl Write, width: u32, records: &[Record]) -> Result<()> {
    let wrap = |e: std::io::Error| Error::Archive(e.to_string());
    w.write_all(MAGIC).map_err(wrap)?;
    put_u32(&mut w, VERSION).map_err(wrap)?;
    put_u32(&mut w, width).map_err(wrap)?;
    put_u32(&mut w, records.len() as u32).map_err(wrap)?;
    let mut buf = Vec::new();
    for r in records {
        if width != 0 && r.values.len() != width as usize {
            return Err(Error::Archive(format!(
                "record {}/{} has {} values, archive width is {width}",
                r.key,
                r.sub,
                r.values.len()
            )));
        }
        buf.clear();
        put_str(&mut buf, &r.key).map_err(wrap)?;
        put_str(&mut buf, &r.sub).map_err(wrap)?;
        put_u32(&mut buf, r.values.len() as u32).map_err(wrap)?;
        for v in &r.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(wrap)?;
    }
    w.flush().map_err(wrap)
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Archive("truncated archive".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Archive("invalid utf-8 key".into()))
    }
}

/// Reads an archive, returning its declared width and records.
pub fn read_archive(mut r: impl Read) -> Result<(u32, Vec<Record>)> {
    let mut data = Vec::new();
    r.read_to_end(&mut data).map_err(|e| Error::Archive(e.to_string()))?;
    let mut c = Cursor { data: &data, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Archive("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch { expected: VERSION, found: version });
    }
    let width = c.u32()?;
    let count = c.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let key = c.string()?;
        let sub = c.string()?;
        let n = c.u32()? as usize;
        if width != 0 && n != width as usize {
            return Err(Error::Archive(format!("record {key}/{sub}: width {n} ≠ {width}")));
        }
        let bytes = c.take(n * 4)?;
        let values = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        records.push(Record { key, sub, values });
    }
    if c.pos != data.len() {
        return Err(Error::Archive("trailing bytes after last record".into()));
    }
    Ok((width, records))
}
