//! JSON checkpoints. Floats are written in shortest round-trip decimal
//! form, so save → load restores every parameter bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::Optimizer;
use crate::params::{Dims, ParamVector, Segment};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Policy,
    Reward,
}

/// One model's parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub model_kind: ModelKind,
    pub seed: u64,
    pub dims: Dims,
    pub segments: Vec<Segment>,
    pub values: Vec<f64>,
}

impl ModelCheckpoint {
    pub fn new(kind: ModelKind, seed: u64, params: &ParamVector) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            model_kind: kind,
            seed,
            dims: params.dims,
            segments: params.segments(),
            values: params.values.clone(),
        }
    }

    pub fn params(&self) -> Result<ParamVector> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format_version {} is not supported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.segments != self.dims.segments() {
            return Err(Error::Checkpoint("segment table does not match dims".into()));
        }
        ParamVector::from_values(self.dims, self.values.clone())
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.model_kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind:?} checkpoint, found {:?}",
                self.model_kind
            )));
        }
        Ok(())
    }
}

/// Everything needed to resume a run after `completed_iterations`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunCheckpoint {
    pub format_version: u32,
    pub config_hash: String,
    pub completed_iterations: usize,
    pub global_step: usize,
    pub policy: ModelCheckpoint,
    pub reward_model: ModelCheckpoint,
    pub optimizer: Optimizer,
}

impl RunCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// Load and verify the format version and, when given, the config hash.
    pub fn load(path: &Path, expected_hash: Option<&str>) -> Result<Self> {
        let ck: Self = read_json(path)?;
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: format_version {} is not supported (expected {FORMAT_VERSION})",
                path.display(),
                ck.format_version
            )));
        }
        if let Some(h) = expected_hash {
            if ck.config_hash != h {
                return Err(Error::Checkpoint(format!(
                    "{}: config hash mismatch: checkpoint has {}, current config is {h}",
                    path.display(),
                    ck.config_hash
                )));
            }
        }
        ck.policy.expect_kind(ModelKind::Policy)?;
        ck.reward_model.expect_kind(ModelKind::Reward)?;
        Ok(ck)
    }
}

/// A standalone model file or the matching half of a run checkpoint.
pub fn load_model(path: &Path, kind: ModelKind) -> Result<ParamVector> {
    // A checkpoint that cannot be read is a bad input, not a runtime fault.
    let v: serde_json::Value = read_json(path).map_err(|e| match e {
        Error::Io { .. } => Error::Checkpoint(e.to_string()),
        other => other,
    })?;
    let model = if v.get("config_hash").is_some() {
        let run: RunCheckpoint = serde_json::from_value(v)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        match kind {
            ModelKind::Policy => run.policy,
            ModelKind::Reward => run.reward_model,
        }
    } else {
        serde_json::from_value::<ModelCheckpoint>(v)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?
    };
    model.expect_kind(kind)?;
    model.params()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}
