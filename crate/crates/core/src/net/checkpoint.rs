//! Parameter checkpoints.
//!
//! Layout (little-endian): `"SGCK"`, `u32` version, `u32` entry count, then
//! per entry `u32` name length, UTF-8 name, `u32` rank, `rank` x `u32` dims;
//! then every entry's `f32` payload in manifest order.

use std::path::Path;

use super::{Network, NetworkConfig, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SGCK";
pub const CHECKPOINT_VERSION: u32 = 1;
/// File names used by [`save_model`] / [`load_model`].
pub const MODEL_CONFIG_FILE: &str = "model.json";
pub const MODEL_WEIGHTS_FILE: &str = "model.sgck";

pub fn encode_checkpoint(store: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for p in store.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                expected: end,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parameters in file order. Decay flags are not stored and read as false.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamStore<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            found: magic.try_into().expect("4 bytes"),
            expected: *CHECKPOINT_MAGIC,
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Format(format!("parameter name: {e}")))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        entries.push((name, shape));
    }
    let mut store = ParamStore::new();
    for (name, shape) in entries {
        let n: usize = shape.iter().product();
        let data = r
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        store.add(name, Tensor::new(shape, data)?, false);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint payload",
            bytes.len() - r.pos
        )));
    }
    Ok(store)
}

pub fn write_checkpoint(path: impl AsRef<Path>, store: &ParamStore<f32>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(store)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore<f32>> {
    let path = path.as_ref();
    decode_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Writes `model.json` and `model.sgck` into `dir`.
pub fn save_model(dir: impl AsRef<Path>, net: &Network<f32>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg = dir.join(MODEL_CONFIG_FILE);
    std::fs::write(&cfg, serde_json::to_string_pretty(net.config())?).map_err(|e| Error::io(&cfg, e))?;
    write_checkpoint(dir.join(MODEL_WEIGHTS_FILE), net.params())
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<Network<f32>> {
    let dir = dir.as_ref();
    let cfg = dir.join(MODEL_CONFIG_FILE);
    let text = std::fs::read_to_string(&cfg).map_err(|e| Error::io(&cfg, e))?;
    let config: NetworkConfig = serde_json::from_str(&text)?;
    Network::from_params(config, read_checkpoint(dir.join(MODEL_WEIGHTS_FILE))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_exact() {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::new(vec![2, 3], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.0, 4.0, 5.0]).unwrap(), true);
        s.add("a.bias", Tensor::new(vec![2], vec![0.25, -7.0]).unwrap(), false);
        let bytes = encode_checkpoint(&s);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(encode_checkpoint(&back), bytes);
        assert_eq!(back.value(0).data(), s.value(0).data());
    }

    #[test]
    fn truncation_detected() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(vec![4], vec![1.0f32; 4]).unwrap(), true);
        let bytes = encode_checkpoint(&s);
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 1]), Err(Error::Truncated { .. })));
    }
}
