//! Binary checkpoint container.
//!
//! Little-endian layout:
//!
//! ```text
//! "STNC" | version u32 = 1 | tensor count u32
//! per tensor: name len u16 | UTF-8 name | dtype u8 | rank u8 | dims u64 × rank | payload
//! ```
//!
//! Adam moments are stored as `<param>.adam.m` / `<param>.adam.v`, the step
//! counter as the one-element tensor `adam.t`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::pipeline::Denoiser;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"STNC";
pub const VERSION: u32 = 1;
const ADAM_M: &str = ".adam.m";
const ADAM_V: &str = ".adam.v";
const ADAM_T: &str = "adam.t";

/// Named tensors read from or destined for a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_store(store: &ParamStore<T>, adam: Option<&AdamState<T>>) -> Self {
        let mut tensors: Vec<(String, Tensor<T>)> =
            store.ids().map(|id| (store.name(id).to_owned(), store.value(id).clone())).collect();
        if let Some(st) = adam {
            for id in store.trainable_ids() {
                if let (Some(m), Some(v)) = (&st.m[id.index()], &st.v[id.index()]) {
                    tensors.push((format!("{}{ADAM_M}", store.name(id)), m.clone()));
                    tensors.push((format!("{}{ADAM_V}", store.name(id)), v.clone()));
                }
            }
            tensors.push((ADAM_T.to_owned(), Tensor::scalar(T::of(st.t as f64))));
        }
        Checkpoint { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(T::DTYPE);
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Checkpoint { path: path.to_owned(), reason };
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4).ok_or_else(|| bad("file too short for header".into()))?;
        if magic != MAGIC {
            return Err(bad(format!("bad magic bytes {magic:?}, expected \"STNC\"")));
        }
        let version = r.u32().ok_or_else(|| bad("truncated header".into()))?;
        if version != VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let count = r.u32().ok_or_else(|| bad("truncated header".into()))?;
        let mut tensors = Vec::with_capacity(count as usize);
        for i in 0..count {
            let trunc = || bad(format!("truncated at tensor {i}"));
            let len = r.u16().ok_or_else(trunc)? as usize;
            let name = std::str::from_utf8(r.take(len).ok_or_else(trunc)?)
                .map_err(|_| bad(format!("tensor {i} name is not UTF-8")))?
                .to_owned();
            let dtype = r.u8().ok_or_else(trunc)?;
            if dtype != T::DTYPE {
                return Err(bad(format!("tensor {name} has dtype {dtype}, expected {}", T::DTYPE)));
            }
            let rank = r.u8().ok_or_else(trunc)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64().ok_or_else(trunc)? as usize);
            }
            let n: usize = shape.iter().product();
            let payload = r.take(n * T::BYTES).ok_or_else(trunc)?;
            let data = payload.chunks_exact(T::BYTES).map(T::read_le).collect();
            let t = Tensor::new(&shape, data).map_err(|e| bad(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { tensors })
    }

    /// Overwrites every tensor of `store` (and `adam`, if present in the file)
    /// by name. Missing or extra tensors are an error.
    pub fn restore(&self, store: &mut ParamStore<T>, path: &Path) -> Result<Option<AdamState<T>>> {
        let bad = |reason: String| Error::Checkpoint { path: path.to_owned(), reason };
        let mut used = vec![false; self.tensors.len()];
        let find = |name: &str, used: &mut Vec<bool>| {
            self.tensors.iter().position(|(n, _)| n == name).map(|i| {
                used[i] = true;
                &self.tensors[i].1
            })
        };
        let ids: Vec<_> = store.ids().collect();
        for &id in &ids {
            let name = store.name(id).to_owned();
            let t = find(&name, &mut used).ok_or_else(|| bad(format!("missing tensor {name}")))?;
            store.set(&name, t.clone()).map_err(|e| bad(e.to_string()))?;
        }
        let adam = match find(ADAM_T, &mut used) {
            None => None,
            Some(t) => {
                let mut st = AdamState::new(store);
                st.t = t.data()[0].f64() as u64;
                for &id in &ids {
                    if !store.is_trainable(id) {
                        continue;
                    }
                    let name = store.name(id);
                    for (suffix, slot) in [(ADAM_M, &mut st.m[id.index()]), (ADAM_V, &mut st.v[id.index()])] {
                        let key = format!("{name}{suffix}");
                        let t = find(&key, &mut used).ok_or_else(|| bad(format!("missing tensor {key}")))?;
                        if t.shape() != store.value(id).shape() {
                            return Err(bad(format!("{key} has shape {:?}", t.shape())));
                        }
                        *slot = Some(t.clone());
                    }
                }
                Some(st)
            }
        };
        if let Some(i) = used.iter().position(|u| !u) {
            return Err(bad(format!("unexpected tensor {}", self.tensors[i].0)));
        }
        Ok(adam)
    }

    /// Rebuilds the default pipeline from the stored tensors.
    pub fn into_denoiser(self, path: &Path) -> Result<(Denoiser<T>, Option<AdamState<T>>)> {
        let mut model = Denoiser::init(0);
        let adam = self.restore(&mut model.store, path)?;
        Ok((model, adam))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }
    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }
    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes(b.try_into().unwrap()))
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`, so an
/// interrupted write never clobbers the previous file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = PathBuf::from(path);
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    tmp.set_file_name(name);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint<T: Scalar>(path: &Path, store: &ParamStore<T>, adam: Option<&AdamState<T>>) -> Result<()> {
    write_atomic(path, &Checkpoint::from_store(store, adam).to_bytes())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}
