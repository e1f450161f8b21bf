//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!   magic "TTDC" | version u32 | levels u32 | base_channels u32 |
//!   clue u8 | seed u64 | tensor count u32 |
//!   per tensor: name_len u32, name utf-8, ndim u32, dims u32 each,
//!               data f64 little-endian.
//!
//! Tensors appear in canonical parameter order, so writing the same
//! parameters twice produces identical bytes.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{assemble_from_map, ModelConfig, ModelError, ModelParams, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"TTDC";
const VERSION: u32 = 1;

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.config.levels as u32).to_le_bytes())?;
    w.write_all(&(params.config.base_channels as u32).to_le_bytes())?;
    w.write_all(&[params.config.clue_enabled as u8])?;
    w.write_all(&params.seed.to_le_bytes())?;

    let named = params.named();
    w.write_all(&(named.len() as u32).to_le_bytes())?;
    for (name, t) in named {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for d in t.shape() {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn corrupt(&self, detail: impl Into<String>) -> ModelError {
        ModelError::Corrupt {
            offset: self.offset,
            detail: detail.into(),
        }
    }

    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|_| {
            self.corrupt(format!("expected {N} more bytes"))
        })?;
        self.offset += N as u64;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        let mut buf = vec![0u8; len];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| self.corrupt(format!("expected {len}-byte string")))?;
        self.offset += len as u64;
        String::from_utf8(buf).map_err(|_| self.corrupt("name is not valid utf-8"))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let mut r = Reader {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };
    let magic: [u8; 4] = r.bytes()?;
    if &magic != MAGIC {
        return Err(r.corrupt(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.corrupt(format!("unsupported version {version}")));
    }
    let levels = r.u32()? as usize;
    let base_channels = r.u32()? as usize;
    let clue = r.bytes::<1>()?[0];
    if clue > 1 {
        return Err(r.corrupt(format!("clue flag must be 0 or 1, got {clue}")));
    }
    let seed = r.u64()?;
    let cfg = ModelConfig::new(levels, base_channels, clue == 1)?;

    let count = r.u32()? as usize;
    let mut tensors: HashMap<String, Tensor> = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        if name_len > 4096 {
            return Err(r.corrupt(format!("implausible name length {name_len}")));
        }
        let name = r.string(name_len)?;
        let ndim = r.u32()? as usize;
        if ndim > 8 {
            return Err(r.corrupt(format!("implausible rank {ndim} for {name}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(r.bytes()?));
        }
        tensors.insert(name, Tensor::new(shape, data)?);
    }

    assemble_from_map(&cfg, seed, tensors)
}
