//! Named-tensor container files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "CFCKPT\0\0"
//! version    u32
//! step       u64
//! meta       u32 length + UTF-8 JSON
//! sections   u32 count, then per section:
//!   name     u32 length + UTF-8
//!   entries  u32 count, then per entry:
//!     name   u32 length + UTF-8
//!     dtype  u8   (0 = f32)
//!     rank   u32, then rank x u64 dims
//!     data   numel x 4 bytes, little-endian IEEE-754
//! ```
//!
//! Sections and entries are written in sorted order, so saving a loaded
//! checkpoint reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CFCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub type TensorMap = BTreeMap<String, Tensor>;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub step: u64,
    pub meta: serde_json::Value,
    pub sections: BTreeMap<String, TensorMap>,
}

impl Checkpoint {
    pub fn new(step: u64, meta: serde_json::Value) -> Self {
        Self {
            version: FORMAT_VERSION,
            step,
            meta,
            sections: BTreeMap::new(),
        }
    }

    pub fn section(&self, name: &str) -> Option<&TensorMap> {
        self.sections.get(name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        put_str(&mut out, &serde_json::to_string(&self.meta)?);
        put_u32(&mut out, self.sections.len())?;
        for (name, entries) in &self.sections {
            put_str(&mut out, name);
            put_u32(&mut out, entries.len())?;
            for (ename, t) in entries {
                put_str(&mut out, ename);
                out.push(DTYPE_F32);
                put_u32(&mut out, t.rank())?;
                for &d in t.shape() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                out.reserve(t.numel() * 4);
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let step = r.u64()?;
        let meta = serde_json::from_str(&r.string()?)?;
        let n_sections = r.u32()?;
        let mut sections = BTreeMap::new();
        for _ in 0..n_sections {
            let name = r.string()?;
            let n_entries = r.u32()?;
            let mut entries = TensorMap::new();
            for _ in 0..n_entries {
                let ename = r.string()?;
                let dtype = r.take(1)?[0];
                if dtype != DTYPE_F32 {
                    return Err(Error::Format(format!("`{ename}`: unknown dtype tag {dtype}")));
                }
                let rank = r.u32()? as usize;
                let shape = (0..rank)
                    .map(|_| r.u64().map(|d| d as usize))
                    .collect::<Result<Vec<_>>>()?;
                let numel: usize = shape.iter().product();
                let raw = r.take(
                    numel
                        .checked_mul(4)
                        .ok_or_else(|| Error::Format(format!("`{ename}`: shape {shape:?} overflows")))?,
                )?;
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                entries.insert(ename, Tensor::new(shape, data)?);
            }
            sections.insert(name, entries);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            version,
            step,
            meta,
            sections,
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Atomically replaces `path` with `bytes` (write temp, fsync, rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(f);
        w.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        let f = w.into_inner().map_err(|e| Error::io(&tmp, e.into_error()))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new(42, serde_json::json!({"model": {"dim": 8}}));
        let mut base = TensorMap::new();
        base.insert("w".into(), Tensor::from_fn(&[2, 3], |i| i as f32 - 2.5));
        base.insert("s".into(), Tensor::scalar(-0.0));
        ck.sections.insert("base".into(), base);
        let mut ad = TensorMap::new();
        ad.insert(
            "blk.q.lora_a".into(),
            Tensor::new(vec![1], vec![f32::MIN_POSITIVE]).unwrap(),
        );
        ck.sections.insert("trainable".into(), ad);
        ck
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.step, 42);
        assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());
        assert!(back.sections["base"]["s"].bit_eq(&ck.sections["base"]["s"]));
    }

    #[test]
    fn truncation_and_magic_are_detected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_payloads_round_trip(
            dims in proptest::collection::vec(1usize..5, 0..4),
            seed in any::<u32>(),
        ) {
            let numel: usize = dims.iter().product();
            let data: Vec<f32> = (0..numel)
                .map(|i| f32::from_bits(seed.wrapping_mul(2_654_435_761).wrapping_add(i as u32 * 97)))
                .collect();
            let mut ck = Checkpoint::new(seed as u64, serde_json::Value::Null);
            let mut m = TensorMap::new();
            m.insert("x".into(), Tensor::new(dims.clone(), data).unwrap());
            ck.sections.insert("s".into(), m);
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
            prop_assert!(back.sections["s"]["x"].bit_eq(&ck.sections["s"]["x"]));
        }
    }
}
