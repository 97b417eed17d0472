//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "POCONCKP" | u32 version | str config_hash | u32 n_modules
//! per module: str name | str fingerprint | u32 n_tensors
//! per tensor: str path | str dtype | u32 ndim | u64 dims[ndim] | u64 nbytes | raw bytes
//! ```
//!
//! `str` is a `u32` byte length followed by UTF-8.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{NnError, Result};
use crate::network::StateDict;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"POCONCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config_hash: String,
    pub modules: BTreeMap<String, StateDict<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(config_hash: impl Into<String>) -> Self {
        Self { config_hash: config_hash.into(), modules: BTreeMap::new() }
    }

    pub fn with_module(mut self, name: impl Into<String>, state: StateDict<T>) -> Self {
        self.modules.insert(name.into(), state);
        self
    }

    pub fn module(&self, name: &str) -> Result<&StateDict<T>> {
        self.modules.get(name).ok_or_else(|| NnError::MissingTensor(name.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.config_hash);
        out.extend_from_slice(&(self.modules.len() as u32).to_le_bytes());
        for (name, state) in &self.modules {
            put_str(&mut out, name);
            put_str(&mut out, &state.fingerprint);
            out.extend_from_slice(&(state.tensors.len() as u32).to_le_bytes());
            for (path, t) in &state.tensors {
                put_str(&mut out, path);
                put_str(&mut out, T::DTYPE);
                out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
                for &d in t.shape() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                out.extend_from_slice(&((t.numel() * T::BYTES) as u64).to_le_bytes());
                for &v in t.data() {
                    v.write_le(&mut out);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(NnError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(NnError::Format(format!("unsupported version {version}")));
        }
        let config_hash = r.string()?;
        let n_modules = r.u32()?;
        let mut modules = BTreeMap::new();
        for _ in 0..n_modules {
            let name = r.string()?;
            let fingerprint = r.string()?;
            let n_tensors = r.u32()?;
            let mut tensors = BTreeMap::new();
            for _ in 0..n_tensors {
                let path = r.string()?;
                let dtype = r.string()?;
                if dtype != T::DTYPE {
                    return Err(NnError::Format(format!(
                        "tensor {path} has dtype {dtype}, expected {}",
                        T::DTYPE
                    )));
                }
                let ndim = r.u32()? as usize;
                let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                let nbytes = r.u64()? as usize;
                let numel: usize = shape.iter().product();
                if nbytes != numel * T::BYTES {
                    return Err(NnError::Format(format!("tensor {path}: {nbytes} bytes for shape {shape:?}")));
                }
                let raw = r.take(nbytes)?;
                let data = raw.chunks(T::BYTES).map(T::read_le).collect();
                tensors.insert(path, Tensor::new(&shape, data)?);
            }
            modules.insert(name, StateDict { fingerprint, tensors });
        }
        if r.pos != bytes.len() {
            return Err(NnError::Format("trailing bytes".into()));
        }
        Ok(Self { config_hash, modules })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| NnError::Format("unexpected end of checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| NnError::Format(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{BatchNorm, Layer, Linear};
    use crate::network::Network;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    proptest! {
        #[test]
        fn bytes_round_trip(seed in 0u64..1000, width in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = Network::<f32>::new("p", vec![
                Layer::Linear(Linear::new(3, width, &mut rng)),
                Layer::BatchNorm(BatchNorm::new(width)),
            ]);
            let ck = Checkpoint::new("cfg").with_module("main", net.state_dict());
            let back = Checkpoint::<f32>::from_bytes(&ck.to_bytes()).unwrap();
            prop_assert_eq!(back, ck);
        }
    }

    #[test]
    fn truncated_and_wrong_dtype_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Network::<f64>::new("p", vec![Layer::Linear(Linear::new(2, 2, &mut rng))]);
        let bytes = Checkpoint::new("h").with_module("m", net.state_dict()).to_bytes();
        assert!(Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bytes), Err(NnError::Format(_))));
    }
}
