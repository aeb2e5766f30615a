//! Binary checkpoint format.
//!
//! ```text
//! "UQD1"
//! u32 LE   byte length of the architecture block
//! bytes    architecture block (canonical key=value lines, UTF-8)
//! u32 LE   parameter count
//! per parameter:
//!   u32 LE name length, name bytes (UTF-8)
//!   u32 LE rank, rank × u32 LE dims
//!   product(dims) × f64 LE values
//! ```
//!
//! Writing then reading a network reproduces it bit for bit.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ArchConfig, Param, SegNet};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"UQD1";

pub fn to_bytes(net: &SegNet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let arch = net.arch().to_text();
    put_u32(&mut out, arch.len());
    out.extend_from_slice(arch.as_bytes());
    put_u32(&mut out, net.params().len());
    for p in net.params() {
        put_u32(&mut out, p.name.len());
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.value.rank());
        for &d in p.value.shape() {
            put_u32(&mut out, d);
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_string(),
            offset: self.pos,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<&'a str> {
        let start = self.pos;
        let b = self.take(n, what)?;
        std::str::from_utf8(b).map_err(|_| Error::Format {
            path: self.path.to_string(),
            offset: start,
            message: format!("{what} is not UTF-8"),
        })
    }
}

/// Parses checkpoint bytes; `origin` names the source in error messages.
pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<SegNet> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path: origin,
    };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.err("missing UQD1 magic"));
    }
    let arch_len = r.u32("architecture length")?;
    let arch_at = r.pos;
    let arch_text = r.utf8(arch_len, "architecture block")?;
    let arch = ArchConfig::from_text(arch_text).map_err(|e| Error::Format {
        path: origin.to_string(),
        offset: arch_at,
        message: e.to_string(),
    })?;
    let count = r.u32("parameter count")?;
    let mut params = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u32("name length")?;
        let name = r.utf8(name_len, "parameter name")?.to_string();
        let rank = r.u32("rank")?;
        if rank > 8 {
            return Err(r.err(format!("implausible rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| r.u32("dimension"))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8, "parameter values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let value = Tensor::new(shape, data).map_err(|e| r.err(e.to_string()))?;
        params.push(Param { name, value });
    }
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    SegNet::from_params(arch, params).map_err(|e| r.err(e.to_string()))
}

pub fn save(net: &SegNet, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(net)).map_err(|e| Error::io(path, e))
}

/// Loads a network in eval mode.
pub fn load(path: &Path) -> Result<SegNet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, &path.display().to_string())
}
