//! Checkpoints: configuration, parameters, optimizer state and step, as JSON.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use vidseg_core::model::{Model, ModelError};
use vidseg_core::tensor::{AdamW, Array, ParamStore};
use vidseg_core::vidgen::CategoryRecord;

use crate::config::RunConfig;

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("unsupported checkpoint format {0}")]
    Format(u32),
    #[error("checkpoint does not match its model configuration: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub config: RunConfig,
    /// Completed optimization steps.
    pub step: usize,
    pub categories: Vec<CategoryRecord>,
    pub params: BTreeMap<String, Array>,
    pub optimizer: AdamW,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        std::fs::write(path, text).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let c: Checkpoint = serde_json::from_str(&text).map_err(|source| CheckpointError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        if c.format != CHECKPOINT_FORMAT {
            return Err(CheckpointError::Format(c.format));
        }
        for (name, a) in &c.params {
            if a.shape().iter().product::<usize>() != a.len() {
                return Err(CheckpointError::Incompatible(format!(
                    "parameter {name} has {} values for shape {:?}",
                    a.len(),
                    a.shape()
                )));
            }
        }
        Ok(c)
    }

    /// Rebuilds the network described by the embedded configuration and loads
    /// the stored weights into it.
    pub fn model(&self) -> Result<(Model, ParamStore), CheckpointError> {
        self.config
            .validate()
            .map_err(|e| CheckpointError::Incompatible(e.to_string()))?;
        let (model, mut store) = Model::new(self.config.model.clone(), self.config.seed)?;
        store.load_named(&self.params).map_err(CheckpointError::Incompatible)?;
        Ok((model, store))
    }
}
