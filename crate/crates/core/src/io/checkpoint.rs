//! Checkpoint container: JSON header plus little-endian raw tensor
//! payload in one file. Save -> load -> save is byte-identical, which the
//! resume-equivalence guarantee builds on.
//!
//! Layout: magic `LLCK` | u32 format version | u64 header length |
//! header JSON | payload bytes. Tensor entries appear in a fixed order:
//! model parameters in `named_params` order, then first/second moments.

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::growth::GrowthEvent;
use crate::model::{
    schedule_from_descriptor, LayerParams, LayerSchedule, Model, ModelConfig, LAYER_PARAM_NAMES,
};
use crate::numerics::{Element, Tensor};
use crate::trainer::{AdamwState, Moment};

pub const MAGIC: &[u8; 4] = b"LLCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    byte_len: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: String,
    step: u64,
    /// Current model shape (depth reflects growth so far).
    model_config: ModelConfig,
    /// Base schedule descriptor in effect when saved.
    schedule_descriptor: String,
    run_config: RunConfig,
    growth_events: Vec<GrowthEvent>,
    rng_seed: u64,
    tensors: Vec<TensorEntry>,
}

pub struct Checkpoint<E: Element> {
    pub model: Model<E>,
    pub opt: AdamwState<E>,
    pub step: u64,
    pub schedule_descriptor: String,
    pub run_config: RunConfig,
    pub growth_events: Vec<GrowthEvent>,
    pub rng_seed: u64,
}

pub enum LoadedCheckpoint {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

impl LoadedCheckpoint {
    pub fn step(&self) -> u64 {
        match self {
            LoadedCheckpoint::F32(c) => c.step,
            LoadedCheckpoint::F64(c) => c.step,
        }
    }

    pub fn run_config(&self) -> &RunConfig {
        match self {
            LoadedCheckpoint::F32(c) => &c.run_config,
            LoadedCheckpoint::F64(c) => &c.run_config,
        }
    }
}

impl<E: Element> Checkpoint<E> {
    /// All tensors in serialization order: parameters, then moments.
    fn tensor_list(&self) -> Vec<(String, &Tensor<E>)> {
        let mut out = self.model.named_params();
        let mut moments: Vec<(String, &Tensor<E>)> = Vec::new();
        moments.push(("opt.m.embed".into(), &self.opt.embed.m));
        moments.push(("opt.v.embed".into(), &self.opt.embed.v));
        for (i, layer) in self.opt.layers.iter().enumerate() {
            for (name, m) in LAYER_PARAM_NAMES.iter().zip(layer.iter()) {
                moments.push((format!("opt.m.layers.{}.{}", i, name), &m.m));
                moments.push((format!("opt.v.layers.{}.{}", i, name), &m.v));
            }
        }
        moments.push(("opt.m.final_norm.gamma".into(), &self.opt.final_gamma.m));
        moments.push(("opt.v.final_norm.gamma".into(), &self.opt.final_gamma.v));
        moments.push(("opt.m.final_norm.beta".into(), &self.opt.final_beta.m));
        moments.push(("opt.v.final_norm.beta".into(), &self.opt.final_beta.v));
        if let Some(h) = &self.opt.lm_head {
            moments.push(("opt.m.lm_head".into(), &h.m));
            moments.push(("opt.v.lm_head".into(), &h.v));
        }
        out.extend(moments);
        out
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let tensors = self.tensor_list();
        let mut entries = Vec::with_capacity(tensors.len());
        let mut payload: Vec<u8> = Vec::new();
        for (name, t) in &tensors {
            let bytes = t.to_le_bytes();
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
                byte_len: bytes.len() as u64,
            });
            payload.extend_from_slice(&bytes);
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            dtype: E::DTYPE.to_string(),
            step: self.step,
            model_config: self.model.config().clone(),
            schedule_descriptor: self.schedule_descriptor.clone(),
            run_config: self.run_config.clone(),
            growth_events: self.growth_events.clone(),
            rng_seed: self.rng_seed,
            tensors: entries,
        };
        let header_json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + header_json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        out.extend_from_slice(&payload);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Schedule to evaluate under: the stored one, or an override, which
    /// must bind against the checkpoint's physical layer count.
    pub fn schedule_for(&self, descriptor: Option<&str>) -> Result<LayerSchedule> {
        let text = descriptor.unwrap_or(&self.schedule_descriptor);
        schedule_from_descriptor(text, self.model.config().n_physical_layers)
    }
}

fn take_tensor<E: Element>(
    payload: &[u8],
    entries: &mut std::collections::VecDeque<TensorEntry>,
    expect_name: &str,
) -> Result<Tensor<E>> {
    let entry = entries
        .pop_front()
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", expect_name)))?;
    if entry.name != expect_name {
        return Err(Error::Checkpoint(format!(
            "tensor order mismatch: found {}, expected {}",
            entry.name, expect_name
        )));
    }
    let lo = entry.offset as usize;
    let hi = lo + entry.byte_len as usize;
    if hi > payload.len() {
        return Err(Error::Checkpoint(format!("tensor {} exceeds payload", entry.name)));
    }
    Tensor::from_le_bytes(entry.shape.clone(), &payload[lo..hi])
}

fn load_typed<E: Element>(header: &Header, payload: &[u8]) -> Result<Checkpoint<E>> {
    use std::collections::VecDeque;
    let mut entries: VecDeque<TensorEntry> = header.tensors.iter().cloned().collect();
    let config = header.model_config.clone();

    let embed = take_tensor::<E>(payload, &mut entries, "embed")?;
    let mut layers = Vec::with_capacity(config.n_physical_layers);
    for i in 0..config.n_physical_layers {
        let mut t: Vec<Tensor<E>> = Vec::with_capacity(10);
        for name in LAYER_PARAM_NAMES {
            t.push(take_tensor(payload, &mut entries, &format!("layers.{}.{}", i, name))?);
        }
        layers.push(LayerParams {
            ln1_gamma: t[0].clone(),
            ln1_beta: t[1].clone(),
            w_q: t[2].clone(),
            w_k: t[3].clone(),
            w_v: t[4].clone(),
            w_o: t[5].clone(),
            ln2_gamma: t[6].clone(),
            ln2_beta: t[7].clone(),
            w_up: t[8].clone(),
            w_down: t[9].clone(),
        });
    }
    let final_gamma = take_tensor::<E>(payload, &mut entries, "final_norm.gamma")?;
    let final_beta = take_tensor::<E>(payload, &mut entries, "final_norm.beta")?;
    let lm_head = if config.tied_embedding {
        None
    } else {
        Some(take_tensor::<E>(payload, &mut entries, "lm_head")?)
    };
    let model = Model::from_parts(config.clone(), embed, layers, final_gamma, final_beta, lm_head)?;

    let moment = |entries: &mut VecDeque<TensorEntry>, name: &str| -> Result<Moment<E>> {
        Ok(Moment {
            m: take_tensor(payload, entries, &format!("opt.m.{}", name))?,
            v: take_tensor(payload, entries, &format!("opt.v.{}", name))?,
        })
    };
    let opt_embed = moment(&mut entries, "embed")?;
    let mut opt_layers = Vec::with_capacity(config.n_physical_layers);
    for i in 0..config.n_physical_layers {
        let mut ms: Vec<Moment<E>> = Vec::with_capacity(10);
        for name in LAYER_PARAM_NAMES {
            ms.push(moment(&mut entries, &format!("layers.{}.{}", i, name))?);
        }
        opt_layers.push([
            ms[0].clone(),
            ms[1].clone(),
            ms[2].clone(),
            ms[3].clone(),
            ms[4].clone(),
            ms[5].clone(),
            ms[6].clone(),
            ms[7].clone(),
            ms[8].clone(),
            ms[9].clone(),
        ]);
    }
    let opt_final_gamma = moment(&mut entries, "final_norm.gamma")?;
    let opt_final_beta = moment(&mut entries, "final_norm.beta")?;
    let opt_lm_head = if config.tied_embedding {
        None
    } else {
        Some(moment(&mut entries, "lm_head")?)
    };
    if let Some(extra) = entries.pop_front() {
        return Err(Error::Checkpoint(format!("unexpected trailing tensor {}", extra.name)));
    }
    Ok(Checkpoint {
        model,
        opt: AdamwState {
            embed: opt_embed,
            layers: opt_layers,
            final_gamma: opt_final_gamma,
            final_beta: opt_final_beta,
            lm_head: opt_lm_head,
            step: header.step,
        },
        step: header.step,
        schedule_descriptor: header.schedule_descriptor.clone(),
        run_config: header.run_config.clone(),
        growth_events: header.growth_events.clone(),
        rng_seed: header.rng_seed,
    })
}

pub fn load(path: &std::path::Path) -> Result<LoadedCheckpoint> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint format {} unsupported (expected {})",
            version, FORMAT_VERSION
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if 16 + header_len > bytes.len() {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])?;
    let payload = &bytes[16 + header_len..];
    match header.dtype.as_str() {
        "f32" => Ok(LoadedCheckpoint::F32(load_typed::<f32>(&header, payload)?)),
        "f64" => Ok(LoadedCheckpoint::F64(load_typed::<f64>(&header, payload)?)),
        other => Err(Error::Checkpoint(format!("unknown dtype {:?}", other))),
    }
}
