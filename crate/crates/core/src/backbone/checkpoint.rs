use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::backbone::{GptAlpha, GptAlphaConfig, ParamStore};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::{DType, Scalar};

const MAGIC: &[u8; 8] = b"KVMCKPT\0";
const VERSION: u32 = 1;

/// Binary container of named tensors plus an embedded JSON document.
///
/// Layout, all integers little-endian:
///
/// ```text
/// magic "KVMCKPT\0" | u32 version | u32 n | n bytes of UTF-8 JSON
/// u32 count, then per tensor:
///   u32 name_len | name | u8 dtype (0 = f32, 1 = f64) | u32 rank | rank x u64 dims | payload
/// ```
///
/// The JSON document holds the model configuration under `"model"`; other
/// keys (training state, run config) are free-form.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: Value,
    pub tensors: Vec<(String, Tensor<T>)>,
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    Ok(b)
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_model(model: &GptAlpha<T>) -> Self {
        Self {
            config: json!({ "model": model.config }),
            tensors: model.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn model_config(&self) -> Result<GptAlphaConfig> {
        let v = self
            .config
            .get("model")
            .ok_or_else(|| Error::Format("checkpoint has no model configuration".into()))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    /// Rebuilds the model from the embedded config and the parameter tensors.
    /// Tensors whose names are not model parameters are ignored.
    pub fn model(&self) -> Result<GptAlpha<T>> {
        let config = self.model_config()?;
        let template = ParamStore::<T>::init(&config, &mut ChaCha8Rng::seed_from_u64(0));
        let mut params = ParamStore::new();
        for i in 0..template.len() {
            let name = template.name(i);
            let t = self
                .get(name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing parameter `{name}`")))?;
            params.insert(name, t.clone(), template.decays(i));
        }
        GptAlpha::from_parts(config, params)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let text = serde_json::to_string(&self.config)?;
        buf.extend_from_slice(&(text.len() as u32).to_le_bytes());
        buf.extend_from_slice(text.as_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(T::DTYPE.tag());
            buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                x.write_le(&mut buf);
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Reads a container written in either precision, converting to `T`.
    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let magic = read_bytes(&mut r, 8)?;
        if magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let n = read_u32(&mut r)? as usize;
        let text = String::from_utf8(read_bytes(&mut r, n)?).map_err(|e| Error::Format(e.to_string()))?;
        let config: Value = serde_json::from_str(&text)?;
        let count = read_u32(&mut r)?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let n = read_u32(&mut r)? as usize;
            let name = String::from_utf8(read_bytes(&mut r, n)?).map_err(|e| Error::Format(e.to_string()))?;
            let tag = read_bytes(&mut r, 1)?[0];
            let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown dtype tag {tag} for `{name}`")))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let b = read_bytes(&mut r, 8)?;
                shape.push(u64::from_le_bytes(b.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = read_bytes(&mut r, numel * dtype.size())?;
            let data: Vec<T> = match dtype {
                DType::F32 => raw.chunks_exact(4).map(|b| T::of(f32::read_le(b) as f64)).collect(),
                DType::F64 => raw.chunks_exact(8).map(|b| T::of(f64::read_le(b))).collect(),
            };
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { config, tensors })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}
