//! Checkpoint files: `"QENO"`, version, entry count, then per entry the
//! name, rank, extents and `f64` payload; a trailing FNV-1a checksum covers
//! every payload byte.

use std::fs;
use std::path::Path;

use super::model::Model;
use super::optim::Adam;
use crate::binio::{fnv1a64, Reader};
use crate::config::{model_from_text, model_to_text};
use crate::error::{Error, FormatError, Result};
use crate::params::ModelParams;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::topology::EntanglementGraph;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"QENO";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Prefix of bookkeeping entries that are not model parameters.
pub const META_PREFIX: &str = "meta.";

pub fn encode_checkpoint<T: Scalar>(entries: &ModelParams<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut hash_input = Vec::new();
    for (name, t) in entries.iter() {
        let nb = name.as_bytes();
        let len = u16::try_from(nb.len()).map_err(|_| Error::Contract(format!("name `{name}` too long")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Contract(format!("`{name}` has rank > 255")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(nb);
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Contract(format!("`{name}` extent exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        let start = out.len();
        for v in t.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        hash_input.extend_from_slice(&out[start..]);
    }
    out.extend_from_slice(&fnv1a64(&hash_input).to_le_bytes());
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams<f64>> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::Version {
            expected: CHECKPOINT_VERSION,
            found: version,
        }
        .into());
    }
    let count = r.u32()? as usize;
    let mut params = ModelParams::new();
    let mut hash_input = Vec::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| FormatError::Malformed("entry name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        if rank == 0 {
            return Err(FormatError::Shape(format!("`{name}` has rank 0")).into());
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        if shape.contains(&0) {
            return Err(FormatError::Shape(format!("`{name}` has a zero extent {shape:?}")).into());
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| FormatError::Shape(format!("`{name}` extents {shape:?} overflow")))?;
        let payload = r.take(n)?;
        hash_input.extend_from_slice(payload);
        let data = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        params
            .insert(name.clone(), Tensor::new(shape, data)?)
            .map_err(|_| FormatError::Malformed(format!("duplicate entry `{name}`")))?;
    }
    let stored = r.u64()?;
    let computed = fnv1a64(&hash_input);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed }.into());
    }
    if r.remaining() != 0 {
        return Err(FormatError::Malformed(format!("{} trailing bytes at offset {}", r.remaining(), r.pos())).into());
    }
    Ok(params)
}

pub fn save_checkpoint<T: Scalar>(entries: &ModelParams<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(entries)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams<f64>> {
    decode_checkpoint(&fs::read(path)?)
}

/// Split loaded entries into model parameters and `meta.` entries.
pub fn split_meta(entries: ModelParams<f64>) -> Result<(ModelParams<f64>, ModelParams<f64>)> {
    let mut params = ModelParams::new();
    let mut meta = ModelParams::new();
    for (name, t) in entries.iter() {
        if name.starts_with(META_PREFIX) {
            meta.insert(name, t.clone())?;
        } else {
            params.insert(name, t.clone())?;
        }
    }
    Ok((params, meta))
}

/// Store text as one `f64` per byte.
pub fn text_entry(text: &str) -> Tensor<f64> {
    let bytes: Vec<f64> = text.bytes().map(f64::from).collect();
    if bytes.is_empty() {
        Tensor::zeros(vec![1])
    } else {
        Tensor::new(vec![bytes.len()], bytes).expect("non-empty")
    }
}

pub fn entry_text(t: &Tensor<f64>) -> Result<String> {
    let bytes = t
        .data()
        .iter()
        .filter(|&&v| v != 0.0)
        .map(|&v| {
            if v.fract() == 0.0 && (1.0..=255.0).contains(&v) {
                Ok(v as u8)
            } else {
                Err(FormatError::Malformed(format!("{v} is not a text byte")))
            }
        })
        .collect::<Result<Vec<u8>, _>>()?;
    String::from_utf8(bytes).map_err(|_| FormatError::Malformed("text entry is not UTF-8".into()).into())
}

/// Bookkeeping stored next to the parameters of a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    /// Last completed epoch.
    pub epoch: usize,
    pub seed: u64,
    pub lr: f64,
    pub clip_norm: f64,
    /// Validation share of the sequence split the model was trained with.
    pub val_fraction: f64,
}

/// Parameters, config text, optimizer identity, frozen topology and
/// training counters as one entry table.
pub fn model_entries<T: Scalar>(model: &Model<T>, meta: &CheckpointMeta) -> Result<ModelParams<f64>> {
    let mut out = ModelParams::new();
    for (name, t) in model.params.iter() {
        out.insert(
            name,
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.as_f64()).collect())?,
        )?;
    }
    let opt = Adam::<f64>::new(meta.lr);
    out.insert("meta.config", text_entry(&model_to_text(&model.config)))?;
    out.insert("meta.optimizer", text_entry("adam"))?;
    out.insert(
        "meta.optimizer.hyper",
        Tensor::new(vec![5], vec![opt.lr, opt.beta1, opt.beta2, opt.eps, meta.clip_norm])?,
    )?;
    out.insert("meta.val_fraction", Tensor::new(vec![1], vec![meta.val_fraction])?)?;
    out.insert("meta.epoch", Tensor::new(vec![1], vec![meta.epoch as f64])?)?;
    out.insert(
        "meta.seed",
        Tensor::new(
            vec![2],
            vec![(meta.seed >> 32) as f64, (meta.seed & 0xFFFF_FFFF) as f64],
        )?,
    )?;
    if let Some(g) = model.topology() {
        if !g.is_empty() {
            let flat = g.edges().iter().flat_map(|&(c, t)| [c as f64, t as f64]).collect();
            out.insert("meta.topology", Tensor::new(vec![g.len(), 2], flat)?)?;
        }
    }
    Ok(out)
}

pub fn save_model<T: Scalar>(model: &Model<T>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    save_checkpoint(&model_entries(model, meta)?, path)
}

fn meta_get<'a>(meta: &'a ModelParams<f64>, name: &str) -> Result<&'a Tensor<f64>> {
    meta.get(name)
        .ok_or_else(|| FormatError::Malformed(format!("checkpoint lacks `{name}`")).into())
}

/// Rebuild a model and its bookkeeping from checkpoint entries.
pub fn model_from_entries(entries: ModelParams<f64>) -> Result<(Model<f64>, CheckpointMeta)> {
    let (params, meta) = split_meta(entries)?;
    let config = model_from_text(&entry_text(meta_get(&meta, "meta.config")?)?)?;
    let hyper = meta_get(&meta, "meta.optimizer.hyper")?.data().to_vec();
    let seed = meta_get(&meta, "meta.seed")?.data().to_vec();
    let epoch = meta_get(&meta, "meta.epoch")?.data()[0];
    let val_fraction = meta_get(&meta, "meta.val_fraction")?.data()[0];
    if hyper.len() != 5 || seed.len() != 2 {
        return Err(FormatError::Malformed("bad optimizer or seed entry".into()).into());
    }
    let mut model = Model::with_params(config, params)?;
    if let Some(t) = meta.get("meta.topology") {
        let d = t.data();
        let edges = d.chunks(2).map(|e| (e[0] as usize, e[1] as usize)).collect();
        model.set_topology(EntanglementGraph::from_edges(model.config.teqe.qubits, edges)?)?;
    }
    Ok((
        model,
        CheckpointMeta {
            epoch: epoch as usize,
            seed: ((seed[0] as u64) << 32) | seed[1] as u64,
            lr: hyper[0],
            clip_norm: hyper[4],
            val_fraction,
        },
    ))
}

pub fn load_model(path: &Path) -> Result<(Model<f64>, CheckpointMeta)> {
    model_from_entries(load_checkpoint(path)?)
}
