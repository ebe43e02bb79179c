//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "GSCKPT01"
//! count    u32
//! entry*   name_len u32, name (UTF-8), trainable u8, ndim u32,
//!          dims u64 * ndim, values f64 * prod(dims)
//! ```
//!
//! A JSON manifest with the shape of every entry is written next to the
//! container as `<file>.json`.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"GSCKPT01";

#[derive(Serialize)]
struct ManifestEntry<'a> {
    name: &'a str,
    shape: &'a [usize],
    trainable: bool,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save(path: &Path, store: &ParamStore) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, p) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[p.trainable as u8])?;
        w.write_all(&(p.value.ndim() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;

    let entries: Vec<ManifestEntry> = store
        .iter()
        .map(|(name, p)| ManifestEntry {
            name,
            shape: p.value.shape(),
            trainable: p.trainable,
        })
        .collect();
    let json = serde_json::to_string_pretty(&entries).map_err(|e| Error::Checkpoint {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    fs::write(manifest_path(path), json + "\n")?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |msg: &str| Error::Checkpoint {
        path: path.display().to_string(),
        msg: msg.to_string(),
    };
    let mut r = Reader {
        buf: &bytes,
        pos: 0,
    };
    if r.take(8) != Some(MAGIC.as_slice()) {
        return Err(bad("not a checkpoint file"));
    }
    let count = r.u32().ok_or_else(|| bad("truncated header"))?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32().ok_or_else(|| bad("truncated entry"))? as usize;
        let name = r.take(len).ok_or_else(|| bad("truncated name"))?;
        let name = std::str::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8"))?;
        let trainable = r.take(1).ok_or_else(|| bad("truncated entry"))?[0] != 0;
        let ndim = r.u32().ok_or_else(|| bad("truncated entry"))? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64().ok_or_else(|| bad("truncated shape"))? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r
            .take(n.checked_mul(8).ok_or_else(|| bad("oversized entry"))?)
            .ok_or_else(|| bad("truncated data"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| bad(&format!("{name}: {e}")))?;
        store.insert(name, t, trainable);
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(store)
}
