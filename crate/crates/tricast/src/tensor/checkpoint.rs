//! Binary container for named tensors.
//!
//! Layout (all integers little-endian): magic `TCKP`, format version u32,
//! entry count u32, then per entry a u32 name length, the UTF-8 name, a u32
//! rank, u64 dimensions, and the row-major f64 payload. The format is
//! deliberately dumb: byte-for-byte reproducible for identical inputs, with
//! no compression or alignment tricks that could vary across platforms.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TCKP";
const VERSION: u32 = 1;

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

fn bad(path: &Path, detail: impl Into<String>) -> Error {
    Error::BadCheckpoint { path: path.to_path_buf(), detail: detail.into() }
}

/// Writes named tensors in iteration order.
pub fn save(path: &Path, entries: &[(&str, &Tensor)]) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| io_err(path, e));
    put(MAGIC)?;
    put(&VERSION.to_le_bytes())?;
    put(&(entries.len() as u32).to_le_bytes())?;
    for (name, tensor) in entries {
        put(&(name.len() as u32).to_le_bytes())?;
        put(name.as_bytes())?;
        put(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &dim in tensor.shape() {
            put(&(dim as u64).to_le_bytes())?;
        }
        for v in tensor.data() {
            put(&v.to_le_bytes())?;
        }
    }
    w.into_inner()
        .map_err(|e| io_err(path, e.into_error()))?
        .sync_all()
        .map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Reads a container back into name/tensor pairs in file order. Loaded
/// tensors do not require gradients; callers opt parameters back in.
pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = Reader { inner: BufReader::new(file), path: path.to_path_buf() };
    let mut magic = [0u8; 4];
    r.fill(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad(path, "bad magic bytes"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(path, format!("unsupported format version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        if name_len > 4096 {
            return Err(bad(path, format!("implausible name length {name_len}")));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.fill(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes).map_err(|_| bad(path, "name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(bad(path, format!("implausible rank {rank} for '{name}'")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut len = 1usize;
        for _ in 0..rank {
            let dim = r.u64()? as usize;
            len = len
                .checked_mul(dim)
                .ok_or_else(|| bad(path, format!("shape overflow for '{name}'")))?;
            shape.push(dim);
        }
        if len > (1 << 28) {
            return Err(bad(path, format!("implausible element count {len} for '{name}'")));
        }
        let mut data = vec![0.0f64; len];
        for v in &mut data {
            *v = r.f64()?;
        }
        entries.push((name, Tensor::new(shape, data)?));
    }
    let mut trailing = [0u8; 1];
    match r.inner.read(&mut trailing) {
        Ok(0) => Ok(entries),
        Ok(_) => Err(bad(path, "trailing bytes after last entry")),
        Err(e) => Err(io_err(path, e)),
    }
}

/// [`load`] keyed by name; duplicate names are rejected.
pub fn load_map(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let mut map = BTreeMap::new();
    for (name, tensor) in load(path)? {
        if map.insert(name.clone(), tensor).is_some() {
            return Err(bad(path, format!("duplicate tensor name '{name}'")));
        }
    }
    Ok(map)
}

struct Reader {
    inner: BufReader<File>,
    path: PathBuf,
}

impl Reader {
    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                bad(&self.path, "truncated file")
            } else {
                io_err(&self.path, e)
            }
        })
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.fill(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.fill(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }
}
