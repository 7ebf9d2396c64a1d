//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes   "CHNETCKP"
//! version   u32
//! epoch     u64       epochs trained when saved
//! config    u32 length + UTF-8 TOML model configuration
//! params    u32 count, then per tensor: u32 name length, name,
//!           u32 rank, u64 per dim, f64 per element
//! buffers   u32 count, then per buffer: u32 name length, name,
//!           running mean tensor, running variance tensor (rank/dims/data as above)
//! ```

use std::fs;
use std::path::Path;

use crate::arch::{ModelConfig, Network};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CHNETCKP";
pub const VERSION: u32 = 1;

/// A restored network together with the epoch it was saved at.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub network: Network,
    pub epoch: u64,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidShape(format!("{v} does not fit in a u32 field")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(buf: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(buf, s.len())?;
    buf.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_tensor(buf: &mut Vec<u8>, t: &Tensor) -> Result<()> {
    put_u32(buf, t.dims().len())?;
    for &d in t.dims() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn to_bytes(network: &Network, epoch: u64) -> Result<Vec<u8>> {
    let config = toml::to_string(network.config()).map_err(|e| Error::Config(format!("serializing model config: {e}")))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&epoch.to_le_bytes());
    put_str(&mut buf, &config)?;
    put_u32(&mut buf, network.params.len())?;
    for (_, name, t) in network.params.iter() {
        put_str(&mut buf, name)?;
        put_tensor(&mut buf, t)?;
    }
    put_u32(&mut buf, network.buffers.len())?;
    for (name, stats) in network.buffers.iter() {
        put_str(&mut buf, name)?;
        put_tensor(&mut buf, &stats.mean)?;
        put_tensor(&mut buf, &stats.var)?;
    }
    Ok(buf)
}

pub fn save(path: &Path, network: &Network, epoch: u64) -> Result<()> {
    fs::write(path, to_bytes(network, epoch)?)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format { path: self.path.to_path_buf(), message: message.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(format!("truncated at byte {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.err("non-UTF-8 string"))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        let dims = (0..rank).map(|_| Ok(self.u64()? as usize)).collect::<Result<Vec<_>>>()?;
        let numel = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| self.err("dims overflow"))?;
        let raw = self.take(numel.checked_mul(8).ok_or_else(|| self.err("tensor too large"))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Tensor::from_vec(dims, data)
    }
}

fn replace(slot: &mut Tensor, value: Tensor, what: &str, r: &Reader<'_>) -> Result<()> {
    if slot.dims() != value.dims() {
        return Err(r.err(format!("{what}: stored shape {} does not match model shape {}", value.shape(), slot.shape())));
    }
    *slot = value;
    Ok(())
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(r.err("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: VERSION });
    }
    let epoch = r.u64()?;
    let config_text = r.string()?;
    let config: ModelConfig = toml::from_str(&config_text).map_err(|e| r.err(format!("embedded config: {e}")))?;
    let mut network = Network::new(&config, 0)?;

    let n_params = r.u32()? as usize;
    if n_params != network.params.len() {
        return Err(r.err(format!("{n_params} parameter tensors stored, model has {}", network.params.len())));
    }
    for _ in 0..n_params {
        let name = r.string()?;
        let value = r.tensor()?;
        let id = network.params.find(&name).ok_or_else(|| r.err(format!("unknown parameter `{name}`")))?;
        replace(network.params.get_mut(id), value, &name, &r)?;
    }

    let n_buffers = r.u32()? as usize;
    if n_buffers != network.buffers.len() {
        return Err(r.err(format!("{n_buffers} buffers stored, model has {}", network.buffers.len())));
    }
    let mut loaded = Vec::with_capacity(n_buffers);
    for _ in 0..n_buffers {
        let name = r.string()?;
        let mean = r.tensor()?;
        let var = r.tensor()?;
        loaded.push((name, mean, var));
    }
    for ((name, stats), (stored, mean, var)) in network.buffers.iter_mut().zip(loaded) {
        if name != stored {
            return Err(r.err(format!("buffer `{stored}` found where `{name}` was expected")));
        }
        replace(&mut stats.mean, mean, name, &r)?;
        replace(&mut stats.var, var, name, &r)?;
    }
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { network, epoch })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::Format { path: path.to_path_buf(), message: e.to_string() })?;
    from_bytes(&bytes, path)
}
