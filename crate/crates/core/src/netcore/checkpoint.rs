//! Versioned JSON snapshots of a model and its training state.
//!
//! Floats are written in shortest round-trip form and parsed with exact
//! round-tripping, so save -> load reproduces every bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Model, ModelSpec};
use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::labelspace::Dataset;
use crate::optim::{AdamState, PlateauPolicy};

pub const CHECKPOINT_FORMAT: &str = "chestloc-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub spec: ModelSpec,
    pub params: Vec<NamedTensor>,
    pub norm_buffers: Vec<(Vec<f64>, Vec<f64>)>,
    /// Epochs completed when the snapshot was taken.
    pub epoch: usize,
    pub optimizer: Option<AdamState>,
    pub plateau: Option<PlateauPolicy>,
    pub normalization: Vec<(Dataset, Standardizer)>,
}

impl Checkpoint {
    pub fn capture(model: &Model) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            spec: model.spec().clone(),
            params: model
                .params()
                .into_iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    values: p.value.clone(),
                })
                .collect(),
            norm_buffers: model.norm_buffers(),
            epoch: 0,
            optimizer: None,
            plateau: None,
            normalization: Vec::new(),
        }
    }

    /// Rebuilds the model, checking every tensor name and shape.
    pub fn restore_model(&self) -> Result<Model> {
        let mut model = Model::uninitialized(self.spec.clone())?;
        {
            let params = model.params_mut();
            if params.len() != self.params.len() {
                return Err(Error::Shape(format!(
                    "checkpoint has {} tensors, architecture has {}",
                    self.params.len(),
                    params.len()
                )));
            }
            for (p, saved) in params.into_iter().zip(&self.params) {
                if p.name != saved.name || p.shape != saved.shape || saved.values.len() != p.len() {
                    return Err(Error::Shape(format!(
                        "checkpoint tensor `{}` {:?} does not match `{}` {:?}",
                        saved.name, saved.shape, p.name, p.shape
                    )));
                }
                p.value.clone_from(&saved.values);
            }
        }
        model.set_norm_buffers(&self.norm_buffers)?;
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Checkpoint::from_json(&text)
    }
}
