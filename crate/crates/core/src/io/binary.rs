//! The "ELFE" container: named little-endian float64 arrays behind a JSON
//! header and a config digest.
//!
//! ```text
//! "ELFE" | version u32 | kind u32 | digest [32] | header_len u32 | header
//! n_arrays u32 | { name_len u32 | name | ndim u32 | dims u64… | offset u64 }…
//! data (f64 LE; offsets are in elements from the start of this section)
//! ```

use crate::error::{bail, Result};
use std::io::Write;

pub const MAGIC: &[u8; 4] = b"ELFE";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FileKind {
    Checkpoint = 1,
    Corpus = 2,
    Embeddings = 3,
}

impl FileKind {
    fn from_u32(v: u32) -> Result<Self> {
        Ok(match v {
            1 => FileKind::Checkpoint,
            2 => FileKind::Corpus,
            3 => FileKind::Embeddings,
            _ => bail!(Format, "unknown file kind {}", v),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: FileKind,
    pub digest: [u8; 32],
    pub header: String,
    pub arrays: Vec<Array>,
}

impl Container {
    pub fn array(&self, name: &str) -> Result<&Array> {
        match self.arrays.iter().find(|a| a.name == name) {
            Some(a) => Ok(a),
            None => bail!(Format, "missing array {}", name),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write(&mut out)?;
        Ok(out)
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.kind as u32).to_le_bytes());
        buf.extend_from_slice(&self.digest);
        put_bytes(&mut buf, self.header.as_bytes())?;
        buf.extend_from_slice(&len_u32(self.arrays.len())?.to_le_bytes());
        let mut offset = 0u64;
        for a in &self.arrays {
            if a.shape.iter().product::<usize>() != a.data.len() {
                bail!(Contract, "array {} has shape {:?} but {} values", a.name, a.shape, a.data.len());
            }
            put_bytes(&mut buf, a.name.as_bytes())?;
            buf.extend_from_slice(&len_u32(a.shape.len())?.to_le_bytes());
            for &d in &a.shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            buf.extend_from_slice(&offset.to_le_bytes());
            offset += a.data.len() as u64;
        }
        w.write_all(&buf)?;
        for a in &self.arrays {
            let mut chunk = Vec::with_capacity(a.data.len() * 8);
            for v in &a.data {
                chunk.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&chunk)?;
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            bail!(Format, "not an ELFE file (bad magic)");
        }
        let version = r.u32()?;
        if version != VERSION {
            bail!(Format, "unsupported format version {} (expected {})", version, VERSION);
        }
        let kind = FileKind::from_u32(r.u32()?)?;
        let mut digest = [0u8; 32];
        digest.copy_from_slice(r.take(32)?);
        let header = String::from_utf8(r.prefixed()?.to_vec()).map_err(|_| crate::Error::Format("header is not UTF-8".into()))?;
        let n = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let name = String::from_utf8(r.prefixed()?.to_vec()).map_err(|_| crate::Error::Format("array name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(64));
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let offset = r.u64()? as usize;
            manifest.push((name, shape, offset));
        }
        let data = &bytes[r.pos..];
        let n_values = data.len() / 8;
        let mut arrays = Vec::with_capacity(manifest.len());
        for (name, shape, offset) in manifest {
            let len = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let end = len.and_then(|l| offset.checked_add(l));
            let (len, end) = match (len, end) {
                (Some(l), Some(e)) if e <= n_values => (l, e),
                _ => bail!(Format, "array {} extends past the end of the file (truncated?)", name),
            };
            let values = data[offset * 8..end * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect::<Vec<_>>();
            debug_assert_eq!(values.len(), len);
            arrays.push(Array { name, shape, data: values });
        }
        Ok(Container {
            kind,
            digest,
            header,
            arrays,
        })
    }

    pub fn expect_kind(&self, kind: FileKind) -> Result<()> {
        if self.kind != kind {
            bail!(Format, "expected a {:?} file, found {:?}", kind, self.kind);
        }
        Ok(())
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| crate::Error::Contract(format!("length {n} exceeds u32")))
}

fn put_bytes(buf: &mut Vec<u8>, bytes: &[u8]) -> Result<()> {
    buf.extend_from_slice(&len_u32(bytes.len())?.to_le_bytes());
    buf.extend_from_slice(bytes);
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        match self.pos.checked_add(n) {
            Some(end) if end <= self.bytes.len() => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            _ => bail!(Format, "file truncated at byte {}", self.pos),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn prefixed(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}
