//! Binary container for checkpoints and memory snapshots.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes   b"CTXC"
//! version    u32       CONTAINER_VERSION
//! header_len u64       byte length of the JSON header
//! header     JSON      { "kind", "meta", "tensors": [{ "name", "dtype", "shape" }] }
//! payload              tensors in header order, row-major;
//!                      dtype "f64" as IEEE-754 doubles, "u64" as unsigned 64-bit ints
//! ```
//!
//! `meta` holds the model config (kind "model") or memory metadata
//! (kind "memory": `d_model`, `next_position`, `num_layers`).

use std::collections::HashMap;
use std::io::{Read, Write};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvmem::{KvMemory, LayerKv, TokenRole};
use crate::model::{ModelConfig, ToyTransformer, Weights};

pub const MAGIC: &[u8; 4] = b"CTXC";
pub const CONTAINER_VERSION: u32 = 1;
const MAX_HEADER: u64 = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    U64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
}

impl TensorInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    U64(Vec<u64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn f64(name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            data: TensorData::F64(data),
        }
    }

    pub fn u64(name: impl Into<String>, data: Vec<u64>) -> Self {
        Self {
            name: name.into(),
            shape: vec![data.len()],
            data: TensorData::U64(data),
        }
    }

    fn info(&self) -> TensorInfo {
        TensorInfo {
            name: self.name.clone(),
            dtype: match self.data {
                TensorData::F64(_) => Dtype::F64,
                TensorData::U64(_) => Dtype::U64,
            },
            shape: self.shape.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<Tensor>,
}

impl Container {
    pub fn write(&self, mut out: impl Write) -> Result<()> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self.tensors.iter().map(Tensor::info).collect(),
        };
        for (t, info) in self.tensors.iter().zip(&header.tensors) {
            let len = match &t.data {
                TensorData::F64(v) => v.len(),
                TensorData::U64(v) => v.len(),
            };
            if len != info.numel() {
                return Err(Error::Format(format!("tensor {} has {len} values for shape {:?}", t.name, t.shape)));
            }
        }
        let json = serde_json::to_vec(&header)?;
        out.write_all(MAGIC)?;
        out.write_all(&CONTAINER_VERSION.to_le_bytes())?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        for t in &self.tensors {
            match &t.data {
                TensorData::F64(v) => v.iter().try_for_each(|x| out.write_all(&x.to_le_bytes()))?,
                TensorData::U64(v) => v.iter().try_for_each(|x| out.write_all(&x.to_le_bytes()))?,
            }
        }
        Ok(())
    }

    pub fn read(mut input: impl Read) -> Result<Self> {
        let header = read_header(&mut input)?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for info in &header.tensors {
            let n = info.numel();
            let mut buf = vec![0u8; n * 8];
            input
                .read_exact(&mut buf)
                .map_err(|_| Error::Format(format!("truncated payload in tensor {}", info.name)))?;
            let words = buf.chunks_exact(8).map(|b| <[u8; 8]>::try_from(b).expect("8 bytes"));
            let data = match info.dtype {
                Dtype::F64 => TensorData::F64(words.map(f64::from_le_bytes).collect()),
                Dtype::U64 => TensorData::U64(words.map(u64::from_le_bytes).collect()),
            };
            tensors.push(Tensor {
                name: info.name.clone(),
                shape: info.shape.clone(),
                data,
            });
        }
        let mut rest = [0u8; 1];
        if input.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after payload".into()));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!("expected a {kind} container, found {}", self.kind)));
        }
        Ok(())
    }
}

/// Reads only the magic, version and JSON header.
pub fn read_header(mut input: impl Read) -> Result<Header> {
    let mut magic = [0u8; 4];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::Format("file too short for magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CONTAINER_VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version} (expected {CONTAINER_VERSION})"
        )));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > MAX_HEADER {
        return Err(Error::Format(format!("header of {len} bytes is implausibly large")));
    }
    let mut json = vec![0u8; len as usize];
    input
        .read_exact(&mut json)
        .map_err(|_| Error::Format("truncated header".into()))?;
    Ok(serde_json::from_slice(&json)?)
}

pub fn model_container(model: &ToyTransformer) -> Result<Container> {
    let mut tensors = Vec::new();
    model.weights().visit(|name, shape, data| tensors.push(Tensor::f64(name, shape, data.to_vec())));
    Ok(Container {
        kind: "model".into(),
        meta: serde_json::to_value(model.config())?,
        tensors,
    })
}

pub fn save_model(model: &ToyTransformer, out: impl Write) -> Result<()> {
    model_container(model)?.write(out)
}

pub fn load_model(input: impl Read) -> Result<ToyTransformer> {
    let c = Container::read(input)?;
    c.expect_kind("model")?;
    let config: ModelConfig = serde_json::from_value(c.meta)?;
    config.validate()?;
    let mut stored: HashMap<String, Tensor> = c.tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
    let mut weights = Weights::zeros(&config);
    let mut expected = Vec::new();
    weights.visit(|name, shape, _| expected.push((name.to_string(), shape.to_vec())));
    let mut values = HashMap::new();
    for (name, shape) in &expected {
        let t = stored
            .remove(name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        if &t.shape != shape {
            return Err(Error::Format(format!("tensor {name}: shape {:?}, expected {shape:?}", t.shape)));
        }
        let TensorData::F64(data) = t.data else {
            return Err(Error::Format(format!("tensor {name} must be f64")));
        };
        values.insert(name.clone(), data);
    }
    if let Some(name) = stored.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {name}")));
    }
    weights.visit_mut(|name, dst| dst.copy_from_slice(&values[name]));
    ToyTransformer::from_weights(config, weights)
}

#[derive(Serialize, Deserialize)]
struct MemoryMeta {
    num_layers: usize,
    d_model: usize,
    next_position: usize,
}

pub fn memory_container(memory: &KvMemory) -> Container {
    let d = memory.d_model();
    let mut tensors = Vec::new();
    for (l, layer) in memory.layers().iter().enumerate() {
        let n = layer.len();
        let flat = |a: &Array2<f64>| a.iter().copied().collect::<Vec<_>>();
        tensors.push(Tensor::f64(format!("layers.{l}.keys"), &[n, d], flat(&layer.keys)));
        tensors.push(Tensor::f64(format!("layers.{l}.values"), &[n, d], flat(&layer.values)));
        tensors.push(Tensor::u64(
            format!("layers.{l}.positions"),
            layer.positions.iter().map(|&p| p as u64).collect(),
        ));
        tensors.push(Tensor::u64(
            format!("layers.{l}.roles"),
            layer.roles.iter().map(|r| r.code() as u64).collect(),
        ));
        tensors.push(Tensor::u64(
            format!("layers.{l}.chunks"),
            layer.chunks.iter().map(|&c| c as u64).collect(),
        ));
    }
    let meta = MemoryMeta {
        num_layers: memory.num_layers(),
        d_model: d,
        next_position: memory.next_position(),
    };
    Container {
        kind: "memory".into(),
        meta: serde_json::to_value(meta).expect("plain struct"),
        tensors,
    }
}

pub fn save_memory(memory: &KvMemory, out: impl Write) -> Result<()> {
    memory_container(memory).write(out)
}

pub fn load_memory(input: impl Read) -> Result<KvMemory> {
    let c = Container::read(input)?;
    c.expect_kind("memory")?;
    let meta: MemoryMeta = serde_json::from_value(c.meta)?;
    let mut stored: HashMap<String, Tensor> = c.tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
    let mut take = |name: String| {
        stored
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    };
    let mut layers = Vec::with_capacity(meta.num_layers);
    for l in 0..meta.num_layers {
        let matrix = |t: Tensor| -> Result<Array2<f64>> {
            match (t.shape.as_slice(), t.data) {
                (&[n, d], TensorData::F64(v)) if d == meta.d_model => {
                    Ok(Array2::from_shape_vec((n, d), v).expect("numel checked on read"))
                }
                _ => Err(Error::Format(format!("tensor {} must be f64 [n, {}]", t.name, meta.d_model))),
            }
        };
        let ints = |t: Tensor| -> Result<Vec<u64>> {
            match t.data {
                TensorData::U64(v) => Ok(v),
                TensorData::F64(_) => Err(Error::Format(format!("tensor {} must be u64", t.name))),
            }
        };
        let keys = matrix(take(format!("layers.{l}.keys"))?)?;
        let values = matrix(take(format!("layers.{l}.values"))?)?;
        let positions = ints(take(format!("layers.{l}.positions"))?)?
            .into_iter()
            .map(|p| p as usize)
            .collect();
        let roles = ints(take(format!("layers.{l}.roles"))?)?
            .into_iter()
            .map(|c| TokenRole::from_code(c as i64).ok_or_else(|| Error::Format(format!("unknown role code {c}"))))
            .collect::<Result<Vec<_>>>()?;
        let chunks = ints(take(format!("layers.{l}.chunks"))?)?
            .into_iter()
            .map(|c| u32::try_from(c).map_err(|_| Error::Format(format!("chunk id {c} out of range"))))
            .collect::<Result<Vec<_>>>()?;
        layers.push(LayerKv {
            keys,
            values,
            positions,
            roles,
            chunks,
        });
    }
    if let Some(name) = stored.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {name}")));
    }
    KvMemory::from_layers(layers, meta.d_model, meta.next_position)
}

/// Summary printed by `model inspect`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inspection {
    pub kind: String,
    pub version: u32,
    pub meta: serde_json::Value,
    pub num_tensors: usize,
    pub num_values: usize,
    /// Parameter (or entry) counts keyed by top-level group.
    pub groups: Vec<(String, usize)>,
}

pub fn inspect(input: impl Read) -> Result<Inspection> {
    let header = read_header(input)?;
    let mut groups: Vec<(String, usize)> = Vec::new();
    for t in &header.tensors {
        let group = match t.name.split('.').collect::<Vec<_>>().as_slice() {
            ["layers", l, ..] => format!("layers.{l}"),
            [name, ..] => (*name).to_string(),
            [] => String::new(),
        };
        match groups.iter_mut().find(|(g, _)| *g == group) {
            Some((_, n)) => *n += t.numel(),
            None => groups.push((group, t.numel())),
        }
    }
    Ok(Inspection {
        kind: header.kind,
        version: CONTAINER_VERSION,
        meta: header.meta,
        num_tensors: header.tensors.len(),
        num_values: header.tensors.iter().map(TensorInfo::numel).sum(),
        groups,
    })
}
