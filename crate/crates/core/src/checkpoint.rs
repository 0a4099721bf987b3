//! Flat binary tensor container for base models and adapters.
//!
//! Layout: 8-byte magic, u64 little-endian header length, JSON header,
//! then every tensor's elements little-endian at the header's offsets.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lm::{Scalar, ToyLm, ToyLmConfig, Vocabulary};
use crate::peft_trainer::{Adapter, PeftParams};

pub const MAGIC: &[u8; 8] = b"AUTFEWCK";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset from the start of the data section.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    /// `model` or `peft`.
    pub kind: String,
    pub seed: u64,
    pub config_hash: String,
    pub tensors: Vec<TensorEntry>,
    pub extra: serde_json::Value,
}

/// Hex SHA-256 of the value's JSON serialization.
pub fn config_hash(value: &impl Serialize) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Hash identifying a base model's architecture and vocabulary.
pub fn model_hash<F: Scalar>(model: &ToyLm<F>) -> Result<String> {
    config_hash(&(model.config(), model.vocab()))
}

struct Container {
    header: Header,
    data: Vec<u8>,
}

impl Container {
    fn new(kind: &str, seed: u64, config_hash: String, extra: serde_json::Value) -> Self {
        Container {
            header: Header {
                kind: kind.into(),
                seed,
                config_hash,
                tensors: Vec::new(),
                extra,
            },
            data: Vec::new(),
        }
    }

    fn push<F: Scalar>(&mut self, name: String, shape: Vec<usize>, values: impl Iterator<Item = F>) {
        self.header.tensors.push(TensorEntry {
            name,
            shape,
            dtype: F::DTYPE.into(),
            offset: self.data.len() as u64,
        });
        for x in values {
            x.write_le(&mut self.data);
        }
    }

    fn write(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(16 + header.len() + self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.data);
        fs::write(path, out)?;
        Ok(())
    }

    fn read(path: &Path, kind: &str) -> Result<Self> {
        let bytes = fs::read(path)?;
        let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let end = 16usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..end])?;
        if header.kind != kind {
            return Err(bad(&format!("holds a {} checkpoint, expected {kind}", header.kind)));
        }
        Ok(Container {
            header,
            data: bytes[end..].to_vec(),
        })
    }

    fn tensor<F: Scalar>(&self, e: &TensorEntry) -> Result<Vec<F>> {
        let width = match e.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(Error::Checkpoint(format!("tensor {} has unknown dtype {other}", e.name))),
        };
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let slice = start
            .checked_add(n * width)
            .and_then(|end| self.data.get(start..end))
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} is out of bounds", e.name)))?;
        Ok(slice
            .chunks_exact(width)
            .map(|c| if width == 4 { F::of(f32::read_le(c) as f64) } else { F::of(f64::read_le(c)) })
            .collect())
    }

    fn tensors<F: Scalar>(&self) -> Result<HashMap<String, (Vec<usize>, Vec<F>)>> {
        self.header
            .tensors
            .iter()
            .map(|e| Ok((e.name.clone(), (e.shape.clone(), self.tensor(e)?))))
            .collect()
    }
}

fn matrix<F>(name: &str, shape: &[usize], values: Vec<F>) -> Result<Array2<F>> {
    match shape {
        [r, c] => Array2::from_shape_vec((*r, *c), values).map_err(|e| Error::Checkpoint(format!("{name}: {e}"))),
        _ => Err(Error::Checkpoint(format!("tensor {name} is not a matrix"))),
    }
}

#[derive(Serialize, Deserialize)]
struct ModelExtra {
    config: ToyLmConfig,
    vocab: Vocabulary,
}

pub fn save_model<F: Scalar>(model: &ToyLm<F>, path: impl AsRef<Path>) -> Result<()> {
    let extra = serde_json::to_value(ModelExtra {
        config: model.config().clone(),
        vocab: model.vocab().clone(),
    })?;
    let mut c = Container::new("model", model.seed(), model_hash(model)?, extra);
    for (name, p) in model.param_names().iter().zip(model.params()) {
        c.push(name.clone(), p.shape().to_vec(), p.iter().copied());
    }
    c.write(path.as_ref())
}

pub fn load_model<F: Scalar>(path: impl AsRef<Path>) -> Result<ToyLm<F>> {
    let c = Container::read(path.as_ref(), "model")?;
    let extra: ModelExtra = serde_json::from_value(c.header.extra.clone())?;
    let tensors = c
        .tensors::<F>()?
        .into_iter()
        .map(|(name, (shape, v))| Ok((name.clone(), matrix(&name, &shape, v)?)))
        .collect::<Result<HashMap<_, _>>>()?;
    let model = ToyLm::from_tensors(extra.config, extra.vocab, c.header.seed, tensors)?;
    if model_hash(&model)? != c.header.config_hash {
        return Err(Error::Checkpoint("config hash does not match the stored configuration".into()));
    }
    Ok(model)
}

#[derive(Serialize, Deserialize)]
struct PeftExtra {
    rank: usize,
    targets: Vec<String>,
}

/// Save adapters; the header's config hash names the base model.
pub fn save_peft<F: Scalar>(model: &ToyLm<F>, peft: &PeftParams<F>, seed: u64, path: impl AsRef<Path>) -> Result<()> {
    let names: Vec<String> = peft.targets().iter().map(|&t| model.param_names()[t].clone()).collect();
    let extra = serde_json::to_value(PeftExtra {
        rank: peft.rank(),
        targets: names.clone(),
    })?;
    let mut c = Container::new("peft", seed, model_hash(model)?, extra);
    for (name, ad) in names.iter().zip(&peft.adapters) {
        c.push(format!("{name}.lambda"), vec![ad.d_out()], ad.lambda().iter().copied());
        c.push(format!("{name}.a"), ad.a().shape().to_vec(), ad.a().iter().copied());
        c.push(format!("{name}.b"), ad.b().shape().to_vec(), ad.b().iter().copied());
    }
    c.write(path.as_ref())
}

/// Load adapters for `model`; fails if they were trained on another base.
pub fn load_peft<F: Scalar>(model: &ToyLm<F>, path: impl AsRef<Path>) -> Result<(PeftParams<F>, u64)> {
    let c = Container::read(path.as_ref(), "peft")?;
    if c.header.config_hash != model_hash(model)? {
        return Err(Error::Checkpoint("adapters were trained on a different base model".into()));
    }
    let extra: PeftExtra = serde_json::from_value(c.header.extra.clone())?;
    let mut tensors = c.tensors::<F>()?;
    let mut take = |key: String| {
        tensors
            .remove(&key)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))
    };
    let adapters = extra
        .targets
        .iter()
        .map(|name| {
            let (_, lambda) = take(format!("{name}.lambda"))?;
            let (sa, a) = take(format!("{name}.a"))?;
            let (sb, b) = take(format!("{name}.b"))?;
            Adapter::new(
                Array1::from(lambda),
                matrix(&format!("{name}.a"), &sa, a)?,
                matrix(&format!("{name}.b"), &sb, b)?,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let peft = PeftParams::from_adapters(model, adapters)?;
    if peft.rank() != extra.rank {
        return Err(Error::Checkpoint(format!("rank {} does not match header rank {}", peft.rank(), extra.rank)));
    }
    Ok((peft, c.header.seed))
}
