//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!   magic "HIBACKPT" · version u32 · dtype u8 (0=f32, 1=f64) ·
//!   config JSON (u64 length + bytes) · step u64 · adam step u64 ·
//!   rng state (32-byte seed, u64 stream, u128 word position) ·
//!   three tensor tables (params, first moments, second moments) ·
//!   trailer "HIBAEND\0".
//!
//! A tensor table is `count u64` then per tensor: name (u64 length +
//! bytes), rank u64, dims u64…, raw values at the dtype's width. Values
//! are stored at native precision so a round trip is bit-exact in both
//! f32 and f64 modes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::rng::PrngState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::adam::AdamState;
use crate::train::config::TrainConfig;

const MAGIC: &[u8; 8] = b"HIBACKPT";
const TRAILER: &[u8; 8] = b"HIBAEND\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct CheckpointState<T> {
    pub config: TrainConfig,
    pub step: u64,
    pub params: ParamStore<T>,
    pub adam: AdamState<T>,
    pub rng: PrngState,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_table<T: Scalar>(out: &mut Vec<u8>, table: &BTreeMap<String, Tensor<T>>) {
    put_u64(out, table.len() as u64);
    for (name, tensor) in table {
        put_u64(out, name.len() as u64);
        out.extend_from_slice(name.as_bytes());
        put_u64(out, tensor.rank() as u64);
        for &d in tensor.shape() {
            put_u64(out, d as u64);
        }
        for &v in tensor.data() {
            v.put_le(out);
        }
    }
}

pub fn encode<T: Scalar>(state: &CheckpointState<T>) -> Result<Vec<u8>> {
    let config_json = serde_json::to_vec(&state.config)
        .map_err(|e| Error::format(format!("encoding checkpoint config: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    out.push(T::dtype_tag());
    put_u64(&mut out, config_json.len() as u64);
    out.extend_from_slice(&config_json);
    put_u64(&mut out, state.step);
    put_u64(&mut out, state.adam.t);
    out.extend_from_slice(&state.rng.seed);
    put_u64(&mut out, state.rng.stream);
    out.extend_from_slice(&state.rng.word_pos.to_le_bytes());
    put_table(&mut out, &state.params);
    put_table(&mut out, &state.adam.m);
    put_table(&mut out, &state.adam.v);
    out.extend_from_slice(TRAILER);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format("checkpoint truncated".to_string()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u64()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::format("checkpoint contains a non-UTF8 name".to_string()))
    }
}

fn read_table<T: Scalar>(r: &mut Reader) -> Result<BTreeMap<String, Tensor<T>>> {
    let count = r.u64()? as usize;
    let mut table = BTreeMap::new();
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u64()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let width = T::byte_width();
        let raw = r.take(numel * width)?;
        let data: Vec<T> = raw.chunks_exact(width).map(T::get_le).collect();
        table.insert(name, Tensor::new(shape, data)?);
    }
    Ok(table)
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<CheckpointState<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::format("bad checkpoint magic".to_string()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let dtype = r.take(1)?[0];
    if dtype != T::dtype_tag() {
        return Err(Error::format(format!(
            "checkpoint dtype tag {dtype} does not match requested precision (expected {})",
            T::dtype_tag()
        )));
    }
    let config_len = r.u64()? as usize;
    let config: TrainConfig = serde_json::from_slice(r.take(config_len)?)
        .map_err(|e| Error::format(format!("invalid checkpoint config: {e}")))?;
    let step = r.u64()?;
    let adam_t = r.u64()?;
    let mut seed = [0u8; 32];
    seed.copy_from_slice(r.take(32)?);
    let stream = r.u64()?;
    let word_pos = r.u128()?;
    let params = read_table::<T>(&mut r)?;
    let m = read_table::<T>(&mut r)?;
    let v = read_table::<T>(&mut r)?;
    if r.take(8)? != TRAILER {
        return Err(Error::format("bad checkpoint trailer".to_string()));
    }
    Ok(CheckpointState {
        config,
        step,
        params,
        adam: AdamState { m, v, t: adam_t },
        rng: PrngState { seed, stream, word_pos },
    })
}

pub fn save_checkpoint<T: Scalar>(path: &Path, state: &CheckpointState<T>) -> Result<()> {
    let bytes = encode(state)?;
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<CheckpointState<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode(&bytes)
}

/// Header metadata without loading tensors (dtype-independent).
pub struct CheckpointMeta {
    pub version: u32,
    pub dtype: u8,
    pub config: TrainConfig,
    pub step: u64,
}

pub fn peek_checkpoint(path: &Path) -> Result<CheckpointMeta> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::format("bad checkpoint magic".to_string()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let dtype = r.take(1)?[0];
    let config_len = r.u64()? as usize;
    let config: TrainConfig = serde_json::from_slice(r.take(config_len)?)
        .map_err(|e| Error::format(format!("invalid checkpoint config: {e}")))?;
    let step = r.u64()?;
    Ok(CheckpointMeta { version, dtype, config, step })
}
