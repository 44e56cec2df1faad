//! Named-tensor checkpoint container.
//!
//! Layout (all integers little-endian `u32` unless noted):
//!
//! ```text
//! magic "LMACK1"
//! tensor count
//!   name length, name bytes, rank, extents[rank], payload (f64 LE)
//! blob count
//!   name length, name bytes, byte length, bytes
//! ```
//!
//! Blobs hold masks, RNG state, the config echo and counters.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"LMACK1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub blobs: Vec<(String, Vec<u8>)>,
}

impl Checkpoint {
    pub fn push_tensor(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn push_blob(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.blobs.push((name.into(), bytes));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn blob(&self, name: &str) -> Option<&[u8]> {
        self.blobs.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_slice())
    }

    pub fn require_tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensor(name)
            .ok_or_else(|| Error::InvalidArgument(format!("checkpoint lacks tensor {name:?}")))
    }

    pub fn require_blob(&self, name: &str) -> Result<&[u8]> {
        self.blob(name)
            .ok_or_else(|| Error::InvalidArgument(format!("checkpoint lacks entry {name:?}")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut put = |b: &[u8]| w.write_all(b).map_err(|e| Error::io(path, e));
        let u32le = |v: usize| (v as u32).to_le_bytes();
        put(CHECKPOINT_MAGIC)?;
        put(&u32le(self.tensors.len()))?;
        for (name, t) in &self.tensors {
            put(&u32le(name.len()))?;
            put(name.as_bytes())?;
            put(&u32le(t.shape().len()))?;
            for &d in t.shape() {
                put(&u32le(d))?;
            }
            for v in t.data() {
                put(&v.to_le_bytes())?;
            }
        }
        put(&u32le(self.blobs.len()))?;
        for (name, b) in &self.blobs {
            put(&u32le(name.len()))?;
            put(name.as_bytes())?;
            put(&u32le(b.len()))?;
            put(b)?;
        }
        drop(put);
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = Cursor {
            inner: BufReader::new(file),
            path,
            offset: 0,
        };
        let magic = r.take(CHECKPOINT_MAGIC.len())?;
        if magic != CHECKPOINT_MAGIC {
            return Err(r.error(0, "not a checkpoint (bad magic)"));
        }
        let mut ck = Checkpoint::default();
        let n = r.u32()?;
        for _ in 0..n {
            let name = r.name()?;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(r.error(r.offset - 4, &format!("tensor {name}: implausible rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                let b = r.take(8)?;
                data.push(f64::from_le_bytes(b.try_into().expect("8 bytes")));
            }
            ck.tensors.push((name, Tensor::new(shape, data)?));
        }
        let n = r.u32()?;
        for _ in 0..n {
            let name = r.name()?;
            let len = r.u32()? as usize;
            let bytes = r.take(len)?;
            ck.blobs.push((name, bytes));
        }
        let mut probe = [0u8; 1];
        if r.inner.read(&mut probe).map_err(|e| Error::io(path, e))? != 0 {
            return Err(r.error(r.offset, "trailing bytes"));
        }
        Ok(ck)
    }
}

struct Cursor<'a> {
    inner: BufReader<File>,
    path: &'a Path,
    offset: u64,
}

impl Cursor<'_> {
    fn error(&self, offset: u64, detail: &str) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset,
            detail: detail.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        let got = (&mut self.inner)
            .take(n as u64)
            .read_to_end(&mut buf)
            .map_err(|e| Error::io(self.path, e))?;
        if got != n {
            return Err(self.error(self.offset, &format!("truncated: needed {n} bytes, found {got}")));
        }
        self.offset += n as u64;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn name(&mut self) -> Result<String> {
        let at = self.offset;
        let len = self.u32()? as usize;
        if len > 4096 {
            return Err(self.error(at, &format!("implausible name length {len}")));
        }
        String::from_utf8(self.take(len)?).map_err(|_| self.error(at + 4, "name is not UTF-8"))
    }
}
