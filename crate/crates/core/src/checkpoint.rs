//! Binary checkpoint: named tensors followed by the run configuration.
//!
//! ```text
//! "GCNN" | version u16 | count u32
//! count × { name_len u32 | name | dtype u8 | rank u8 | rank × extent u64 | payload }
//! config_len u32 | config TOML
//! ```
//!
//! Integers and payloads are little-endian. dtype: 1 = f32, 2 = f64, 3 = u64.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::{RunConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::network::GraphCnnModel;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"GCNN";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl TensorData {
    fn code(&self) -> u8 {
        match self {
            TensorData::F32(_) => 1,
            TensorData::F64(_) => 2,
            TensorData::U64(_) => 3,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        let f = t.data().iter().map(|v| v.to_f64().unwrap());
        match T::DTYPE {
            1 => TensorData::F32(f.map(|v| v as f32).collect()),
            _ => TensorData::F64(f.collect()),
        }
    }

    fn to_scalars<T: Scalar>(&self, name: &str) -> Result<Vec<T>> {
        match self {
            TensorData::F32(v) if T::DTYPE == 1 => Ok(v.iter().map(|&x| T::from_f64_lossy(f64::from(x))).collect()),
            TensorData::F64(v) if T::DTYPE == 2 => Ok(v.iter().map(|&x| T::from_f64_lossy(x)).collect()),
            _ => Err(Error::Checkpoint(format!("`{name}` is not stored as {}", T::NAME))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
    pub config_text: String,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn text(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 text".into()))
    }
}

impl Checkpoint {
    pub fn new(config: &RunConfig) -> Result<Self> {
        Ok(Checkpoint { entries: Vec::new(), config_text: config.to_toml()? })
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: TensorData) {
        self.entries.push(Entry { name: name.into(), shape, data });
    }

    pub fn push_tensor<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.push(name, t.shape().to_vec(), TensorData::from_tensor(t));
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self.get(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        Tensor::new(e.shape.clone(), e.data.to_scalars(name)?)
            .map_err(|err| Error::Checkpoint(format!("`{name}`: {err}")))
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match self.get(name).map(|e| &e.data) {
            Some(TensorData::U64(v)) => Ok(v),
            Some(_) => Err(Error::Checkpoint(format!("`{name}` is not a u64 tensor"))),
            None => Err(Error::Checkpoint(format!("missing tensor `{name}`"))),
        }
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::from_toml(&self.config_text).map_err(|e| Error::Checkpoint(format!("embedded configuration: {e}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.data.code());
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &e.data {
                TensorData::F32(v) => v.iter().for_each(|x| x.write_le(&mut out)),
                TensorData::F64(v) => v.iter().for_each(|x| x.write_le(&mut out)),
                TensorData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out.extend_from_slice(&(self.config_text.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let count = r.u32()?;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()?;
            let name = r.text(len)?;
            let code = r.u8()?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            // n·8 must fit, so the payload sizes below cannot overflow
            let n = shape.iter().try_fold(8usize, |a, &d| a.checked_mul(d)).map(|b| b / 8);
            let n = n.ok_or_else(|| Error::Checkpoint(format!("`{name}` extents overflow")))?;
            let data = match code {
                1 => TensorData::F32(r.take(n * 4)?.chunks_exact(4).map(f32::read_le).collect()),
                2 => TensorData::F64(r.take(n * 8)?.chunks_exact(8).map(f64::read_le).collect()),
                3 => TensorData::U64(
                    r.take(n * 8)?.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect(),
                ),
                c => return Err(Error::Checkpoint(format!("`{name}` has unknown dtype {c}"))),
            };
            entries.push(Entry { name, shape, data });
        }
        let len = r.u32()?;
        let config_text = r.text(len)?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { entries, config_text })
    }

    /// Write atomically through a temporary sibling file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Parameters and running statistics of `model`, with `train` recorded
    /// alongside the network configuration.
    pub fn from_model<T: Scalar>(model: &GraphCnnModel<T>, train: &TrainConfig) -> Result<Self> {
        let cfg = RunConfig { network: model.config().clone(), train: train.clone() };
        let mut ck = Checkpoint::new(&cfg)?;
        for (name, t) in model.store.iter() {
            ck.push_tensor(name, t);
        }
        for (name, i) in model.arch.bn_layers() {
            let s = &model.stats[i];
            let c = s.mean.len();
            ck.push_tensor(format!("{name}.bn.running_mean"), &Tensor::new(vec![c], s.mean.clone())?);
            ck.push_tensor(format!("{name}.bn.running_var"), &Tensor::new(vec![c], s.var.clone())?);
            ck.push(format!("{name}.bn.initialized"), vec![1], TensorData::U64(vec![u64::from(s.initialized)]));
        }
        Ok(ck)
    }

    /// Rebuild the model; every parameter must be present with its exact shape.
    pub fn to_model<T: Scalar>(&self) -> Result<GraphCnnModel<T>> {
        let cfg = self.config()?;
        let mut model = GraphCnnModel::<T>::new(cfg.network)?;
        for id in model.store.ids().collect::<Vec<_>>() {
            let name = model.store.name(id).to_string();
            let t = self.tensor::<T>(&name)?;
            if t.shape() != model.store.get(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, configuration needs {:?}",
                    t.shape(),
                    model.store.get(id).shape()
                )));
            }
            *model.store.get_mut(id) = t;
        }
        let bn: Vec<(String, usize)> = model.arch.bn_layers().into_iter().map(|(n, i)| (n.to_string(), i)).collect();
        for (name, i) in bn {
            let s = &mut model.stats[i];
            let c = s.mean.len();
            let mean = self.tensor::<T>(&format!("{name}.bn.running_mean"))?;
            let var = self.tensor::<T>(&format!("{name}.bn.running_var"))?;
            if mean.len() != c || var.len() != c {
                return Err(Error::Checkpoint(format!("`{name}` running statistics have the wrong length")));
            }
            s.mean = mean.into_data();
            s.var = var.into_data();
            s.initialized = self.u64s(&format!("{name}.bn.initialized"))? == [1];
        }
        Ok(model)
    }
}

/// Lowercase hex SHA-256.
pub fn digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
