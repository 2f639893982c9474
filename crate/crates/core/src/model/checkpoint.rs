//! Versioned JSON container for a model and, optionally, training state.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, PromptIqa};
use crate::nn::ParamStore;
use crate::training::TrainStateRecord;

pub const CHECKPOINT_FORMAT: &str = "promptiqa.checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub config_hash: String,
    pub params: ParamStore,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_state: Option<TrainStateRecord>,
}

impl Checkpoint {
    pub fn from_model(model: &PromptIqa, train_state: Option<TrainStateRecord>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: model.config().clone(),
            config_hash: model.config().hash(),
            params: model.params().clone(),
            train_state,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec(self)?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Reads a checkpoint and checks its format, version and that the
    /// stored hash matches the stored config.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
        let ck: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| Error::file(path, e))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::file(
                path,
                format!("unsupported checkpoint {} v{}", ck.format, ck.version),
            ));
        }
        let actual = ck.config.hash();
        if actual != ck.config_hash {
            return Err(Error::ConfigHashMismatch {
                expected: ck.config_hash,
                found: actual,
            });
        }
        Ok(ck)
    }

    /// Refuses to proceed unless the checkpoint was built from `expected`.
    pub fn check_config(&self, expected: &ModelConfig) -> Result<()> {
        let want = expected.hash();
        if want != self.config_hash {
            return Err(Error::ConfigHashMismatch {
                expected: want,
                found: self.config_hash.clone(),
            });
        }
        Ok(())
    }

    pub fn model(&self) -> Result<PromptIqa> {
        PromptIqa::from_params(self.config.clone(), self.params.clone())
    }
}
