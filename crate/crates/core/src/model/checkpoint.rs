//! JSON checkpoint container.
//!
//! ```json
//! {
//!   "format": "relattn-checkpoint",
//!   "version": 1,
//!   "seed": 7,
//!   "config": { ...EncoderConfig... },
//!   "tensors": [ { "name": "embedding", "shape": [64, 64], "data": [...] }, ... ]
//! }
//! ```
//!
//! Tensors appear in [`ModelParams::named`] order with row-major data.
//! Floats are written with shortest round-trip formatting, so a load
//! reproduces every parameter bit for bit.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EncoderConfig, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_FORMAT: &str = "relattn-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub config: EncoderConfig,
    pub params: ModelParams,
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Container {
    format: String,
    version: u32,
    seed: u64,
    config: EncoderConfig,
    tensors: Vec<NamedTensor>,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let tensors = ckpt
        .params
        .named()
        .into_iter()
        .map(|(name, t)| NamedTensor {
            name,
            shape: t.shape().to_vec(),
            data: t.to_vec(),
        })
        .collect();
    let container = Container {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        seed: ckpt.seed,
        config: ckpt.config.clone(),
        tensors,
    };
    let text = serde_json::to_string(&container).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let container: Container = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if container.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unexpected format tag {:?}", container.format)));
    }
    if container.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", container.version)));
    }
    container.config.validate()?;

    let mut by_name: HashMap<String, NamedTensor> = HashMap::new();
    for t in container.tensors {
        if let Some(dup) = by_name.insert(t.name.clone(), t) {
            return Err(Error::Checkpoint(format!("duplicate tensor {}", dup.name)));
        }
    }
    // the skeleton fixes names and shapes; its values are all overwritten
    let mut params = ModelParams::init(&container.config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut failure = None;
    params.visit_mut(|name, slot| {
        if failure.is_some() {
            return;
        }
        match by_name.remove(name) {
            None => failure = Some(format!("missing tensor {name}")),
            Some(t) if t.shape != slot.shape() => {
                failure = Some(format!("tensor {name} has shape {:?}, expected {:?}", t.shape, slot.shape()))
            }
            Some(t) => match Tensor::new(&t.shape, t.data) {
                Ok(value) => *slot = value,
                Err(e) => failure = Some(format!("tensor {name}: {e}")),
            },
        }
    });
    if let Some(msg) = failure {
        return Err(Error::Checkpoint(msg));
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint {
        seed: container.seed,
        config: container.config,
        params,
    })
}
