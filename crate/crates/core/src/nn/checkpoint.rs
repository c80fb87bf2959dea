//! LSNC checkpoint files.
//!
//! Layout: `b"LSNC"`, `u32` version (1), `u32` manifest byte length, UTF-8
//! JSON manifest, then concatenated little-endian `f32` tensor payloads.
//! Manifest offsets are relative to the start of the payload section. BN
//! running statistics are stored so adapted checkpoints are self-contained.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Model, ModelConfig};
use super::tensor::Real;
use crate::adapt::OnlineStats;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LSNC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    /// Streaming AdaBN accumulators, one per BN layer, when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adabn_accumulators: Option<Vec<OnlineStats>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub adabn_accumulators: Option<Vec<OnlineStats>>,
}

impl<T: Real> Checkpoint<T> {
    pub fn new(model: Model<T>) -> Self {
        Self {
            model,
            adabn_accumulators: None,
        }
    }
}

fn named_tensors<T: Real>(model: &Model<T>) -> Vec<(String, Vec<usize>, Vec<T>)> {
    let mut out = Vec::new();
    let mut push_unit = |prefix: String, u: &super::model::ConvUnit<T>| {
        let s = u.layer.spec;
        let l = &u.layer;
        out.push((format!("{prefix}.weight"), vec![s.c_out, s.in_per_group(), s.k], l.weight.clone()));
        out.push((format!("{prefix}.bias"), vec![s.c_out], l.bias.clone()));
        out.push((format!("{prefix}.bn.gamma"), vec![s.c_out], l.bn.gamma.clone()));
        out.push((format!("{prefix}.bn.beta"), vec![s.c_out], l.bn.beta.clone()));
        out.push((format!("{prefix}.bn.running_mean"), vec![s.c_out], l.bn.run_mean.clone()));
        out.push((format!("{prefix}.bn.running_var"), vec![s.c_out], l.bn.run_var.clone()));
    };
    push_unit("stem".into(), &model.stem);
    for (b, block) in model.blocks.iter().enumerate() {
        push_unit(format!("blocks.{b}.conv0"), &block.units[0]);
        push_unit(format!("blocks.{b}.conv1"), &block.units[1]);
    }
    let n_in = model.head_inputs();
    let n_out = model.config().n_classes;
    out.push(("head.weight".into(), vec![n_out, n_in], model.head_weight.clone()));
    out.push(("head.bias".into(), vec![n_out], model.head_bias.clone()));
    out
}

pub fn to_bytes<T: Real>(ckpt: &Checkpoint<T>) -> Result<Vec<u8>> {
    let tensors = named_tensors(&ckpt.model);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for (name, shape, data) in tensors {
        entries.push(TensorEntry {
            name,
            shape,
            offset: payload.len() as u64,
        });
        for v in data {
            payload.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        config: ckpt.model.config().clone(),
        tensors: entries,
        adabn_accumulators: ckpt.adabn_accumulators.clone(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(12 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format("checkpoint truncated in header"))
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err(Error::format("not an LSNC checkpoint (bad magic)"));
    }
    let version = read_u32(bytes, 4)?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported LSNC version {version}")));
    }
    let mlen = read_u32(bytes, 8)? as usize;
    let json = bytes
        .get(12..12 + mlen)
        .ok_or_else(|| Error::format("checkpoint truncated in manifest"))?;
    let manifest: Manifest = serde_json::from_slice(json)?;
    let payload = &bytes[12 + mlen..];

    let mut model = Model::<T>::new(manifest.config.clone(), 0)?;
    let expected = named_tensors(&model);
    if expected.len() != manifest.tensors.len() {
        return Err(Error::format(format!(
            "manifest lists {} tensors, config implies {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    let mut values: Vec<Vec<T>> = Vec::with_capacity(expected.len());
    for ((name, shape, _), entry) in expected.iter().zip(&manifest.tensors) {
        if &entry.name != name || &entry.shape != shape {
            return Err(Error::format(format!(
                "tensor `{}` {:?} does not match expected `{name}` {shape:?}",
                entry.name, entry.shape
            )));
        }
        let count: usize = shape.iter().product();
        let start = entry.offset as usize;
        let raw = payload
            .get(start..start + 4 * count)
            .ok_or_else(|| Error::format(format!("payload of `{name}` truncated")))?;
        values.push(
            raw.chunks_exact(4)
                .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect(),
        );
    }

    let mut it = values.into_iter();
    for u in model.units_mut() {
        let l = &mut u.layer;
        l.weight = it.next().unwrap();
        l.bias = it.next().unwrap();
        l.bn.gamma = it.next().unwrap();
        l.bn.beta = it.next().unwrap();
        l.bn.run_mean = it.next().unwrap();
        l.bn.run_var = it.next().unwrap();
    }
    model.head_weight = it.next().unwrap();
    model.head_bias = it.next().unwrap();

    if let Some(acc) = &manifest.adabn_accumulators {
        if acc.len() != model.units().len() {
            return Err(Error::format("AdaBN accumulators do not cover every BN layer"));
        }
    }
    Ok(Checkpoint {
        model,
        adabn_accumulators: manifest.adabn_accumulators,
    })
}

pub fn save<T: Real>(ckpt: &Checkpoint<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(ckpt)?;
    let mut f = fs::File::create(path).map_err(Error::at(path))?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    from_bytes(&fs::read(path).map_err(Error::at(path))?)
}
