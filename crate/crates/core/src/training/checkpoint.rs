use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::{AdamState, Moments};
use super::EpochRecord;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::generator::Vocabulary;
use crate::model::{Model, ModelDims};
use crate::numerics::Matrix;

pub const CHECKPOINT_FORMAT: &str = "motalk.checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub frozen: bool,
    /// Row-major values.
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentBlock {
    pub name: String,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Everything needed to rebuild a model and continue its optimizer:
/// config, input widths, vocabulary, parameters in store order, Adam
/// moments, and progress counters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: RunConfig,
    pub dims: ModelDims,
    pub vocab: Vec<String>,
    pub stage: u8,
    pub epoch: usize,
    pub step: u64,
    pub total_steps: u64,
    pub history: Vec<EpochRecord>,
    pub params: Vec<ParamBlock>,
    pub adam_t: u64,
    pub moments: Vec<MomentBlock>,
}

impl Checkpoint {
    pub fn capture(model: &Model, adam: &AdamState) -> Self {
        let params = model
            .store
            .iter()
            .map(|(_, p)| ParamBlock {
                name: p.name.clone(),
                rows: p.value.rows(),
                cols: p.value.cols(),
                frozen: p.frozen,
                values: p.value.data().to_vec(),
            })
            .collect();
        let moments = model
            .store
            .iter()
            .filter_map(|(id, p)| {
                let mo = adam.moments.get(id.index())?.as_ref()?;
                Some(MomentBlock {
                    name: p.name.clone(),
                    m: mo.m.data().to_vec(),
                    v: mo.v.data().to_vec(),
                })
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            dims: model.dims,
            vocab: model.tokenizer.vocab.tokens().to_vec(),
            stage: 1,
            epoch: 0,
            step: 0,
            total_steps: 0,
            history: Vec::new(),
            params,
            adam_t: adam.t,
            moments,
        }
    }

    /// Rebuilds the model (attaching adapters if the checkpoint has them)
    /// and the optimizer state.
    pub fn restore(&self) -> Result<(Model, AdamState)> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let vocab = Vocabulary::from_tokens(self.vocab.clone())?;
        let mut model = Model::new(&self.config, self.dims, vocab)?;
        if self.params.iter().any(|p| p.name.starts_with("decoder.lora.")) {
            model.attach_adapters()?;
        }
        if model.store.len() != self.params.len() {
            return Err(Error::Validation(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for block in &self.params {
            let id = model
                .store
                .id(&block.name)
                .ok_or_else(|| Error::Validation(format!("unknown parameter {}", block.name)))?;
            model
                .store
                .set_value(id, Matrix::new(block.rows, block.cols, block.values.clone())?)?;
            model.store.set_frozen(id, block.frozen);
        }
        let mut adam = AdamState {
            t: self.adam_t,
            moments: vec![None; model.store.len()],
        };
        for mb in &self.moments {
            let id = model
                .store
                .id(&mb.name)
                .ok_or_else(|| Error::Validation(format!("moments for unknown parameter {}", mb.name)))?;
            let (r, c) = model.store.value(id).shape();
            adam.moments[id.index()] = Some(Moments {
                m: Matrix::new(r, c, mb.m.clone())?,
                v: Matrix::new(r, c, mb.v.clone())?,
            });
        }
        Ok((model, adam))
    }

    /// Compact JSON with shortest round-trip floats, newline-terminated.
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("checkpoint: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
