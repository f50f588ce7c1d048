use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, TrainConfig};
use super::model::TinyLm;
use crate::error::{Error, Result};
use crate::ode::{DynamicsCheckpoint, OdeDynamics};
use crate::record::TensorRecord;
use crate::rng::Rng;

/// Model, dynamics, configs and random-stream state in one versioned JSON
/// document. Floats are written in shortest round-trip form, so
/// save -> load -> save reproduces the file byte for byte.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub step: usize,
    pub model_config: ModelConfig,
    pub train_config: Option<TrainConfig>,
    pub model: Vec<TensorRecord>,
    pub dynamics: Option<DynamicsCheckpoint>,
    pub rng: BTreeMap<String, Rng>,
}

impl Checkpoint {
    pub const FORMAT: &'static str = "ctxlab-checkpoint";

    pub fn new(model: &TinyLm, dynamics: Option<&OdeDynamics>, train_config: Option<TrainConfig>, step: usize) -> Self {
        Self {
            format: Self::FORMAT.into(),
            version: 1,
            step,
            model_config: model.config().clone(),
            train_config,
            model: model.to_records(),
            dynamics: dynamics.map(DynamicsCheckpoint::from_dynamics),
            rng: BTreeMap::new(),
        }
    }

    pub fn model(&self) -> Result<TinyLm> {
        TinyLm::from_records(self.model_config.clone(), &self.model)
    }

    pub fn dynamics(&self) -> Result<Option<OdeDynamics>> {
        self.dynamics
            .as_ref()
            .map(|d| OdeDynamics::from_records(d.d, d.amp, &d.tensors))
            .transpose()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec(self)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ck: Self = serde_json::from_slice(bytes)?;
        if ck.format != Self::FORMAT || ck.version != 1 {
            return Err(Error::Format(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
