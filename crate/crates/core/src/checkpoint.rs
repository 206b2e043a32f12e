//! Checkpoint container: a magic header, a JSON descriptor and a raw
//! little-endian f64 payload, so round trips are bit-exact.
//!
//! Layout: 8-byte magic, u64 LE header length, JSON header, payload. The
//! header carries the model configuration, the step counter and a tensor
//! directory with byte offsets into the payload. Optimizer moments are
//! stored under reserved name prefixes when resume state is requested.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{CoreError, Result};
use crate::model::{ModelConfig, Vae};
use crate::training::AdamState;

const MAGIC: &[u8; 8] = b"CAMLOCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

const PARAM_PREFIX: &str = "param/";
const ADAM_M_PREFIX: &str = "adam.m/";
const ADAM_V_PREFIX: &str = "adam.v/";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    step: usize,
    adam_updates: Option<usize>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Vae,
    /// Completed optimizer steps at save time.
    pub step: usize,
    pub adam: Option<AdamState>,
}

fn collect_tensors(cp: &Checkpoint) -> Vec<(String, &Tensor)> {
    let mut out: Vec<(String, &Tensor)> = cp
        .model
        .params()
        .iter()
        .map(|(k, t)| (format!("{PARAM_PREFIX}{k}"), t))
        .collect();
    if let Some(adam) = &cp.adam {
        out.extend(adam.m.iter().map(|(k, t)| (format!("{ADAM_M_PREFIX}{k}"), t)));
        out.extend(adam.v.iter().map(|(k, t)| (format!("{ADAM_V_PREFIX}{k}"), t)));
    }
    out
}

pub fn save_checkpoint(path: &Path, cp: &Checkpoint) -> Result<()> {
    let tensors = collect_tensors(cp);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += (t.len() * 8) as u64;
    }
    let header = Header {
        version: CHECKPOINT_VERSION,
        config: cp.model.config().clone(),
        step: cp.step,
        adam_updates: cp.adam.as_ref().map(|a| a.updates),
        tensors: entries,
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    f.write_all(&header_bytes)?;
    for (_, t) in &tensors {
        for &v in t.iter() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let err = |m: String| CoreError::Checkpoint(m);
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);

    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(err(format!("{}: not a checkpoint file", path.display())));
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    if header.version != CHECKPOINT_VERSION {
        return Err(err(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }

    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;

    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + n * 8;
        if end > payload.len() {
            return Err(err(format!("tensor {} overruns payload", e.name)));
        }
        let values: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let t = ArrayD::from_shape_vec(IxDyn(&e.shape), values)
            .map_err(|_| err(format!("tensor {} shape mismatch", e.name)))?;
        if tensors.insert(e.name.clone(), t).is_some() {
            return Err(err(format!("duplicate tensor {}", e.name)));
        }
    }

    let mut params = BTreeMap::new();
    let mut adam_m = BTreeMap::new();
    let mut adam_v = BTreeMap::new();
    for (name, t) in tensors {
        if let Some(rest) = name.strip_prefix(PARAM_PREFIX) {
            params.insert(rest.to_string(), t);
        } else if let Some(rest) = name.strip_prefix(ADAM_M_PREFIX) {
            adam_m.insert(rest.to_string(), t);
        } else if let Some(rest) = name.strip_prefix(ADAM_V_PREFIX) {
            adam_v.insert(rest.to_string(), t);
        } else {
            return Err(err(format!("unknown tensor namespace in {name}")));
        }
    }

    let model = Vae::from_parts(header.config, params)?;
    let adam = match header.adam_updates {
        None => None,
        Some(updates) => {
            let keys: Vec<&String> = model.params().keys().collect();
            if adam_m.len() != keys.len() || adam_v.len() != keys.len() {
                return Err(err("incomplete optimizer state".to_string()));
            }
            Some(AdamState {
                m: adam_m,
                v: adam_v,
                updates,
            })
        }
    };
    Ok(Checkpoint {
        model,
        step: header.step,
        adam,
    })
}
