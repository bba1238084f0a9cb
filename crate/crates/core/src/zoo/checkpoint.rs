use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Autoencoder, TrainingConfig, TrainingReport};
use crate::error::{Error, Result};
use crate::store;

pub const CHECKPOINT_FORMAT: &str = "latent-origin-checkpoint/1";

/// JSON container for a model plus how it was trained.
///
/// `content_hash` is the SHA-256 of the compact JSON encoding of `model`, checked on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub content_hash: String,
    pub model: Autoencoder,
    #[serde(default)]
    pub training: Option<TrainingConfig>,
    #[serde(default)]
    pub report: Option<TrainingReport>,
    /// Wall-clock training time. Kept outside `report` so reports stay reproducible.
    #[serde(default)]
    pub train_seconds: Option<f64>,
}

impl Checkpoint {
    pub fn new(
        model: Autoencoder,
        training: Option<TrainingConfig>,
        report: Option<TrainingReport>,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            content_hash: model_hash(&model),
            model,
            training,
            report,
            train_seconds: None,
        }
    }

    pub fn with_train_seconds(mut self, seconds: f64) -> Self {
        self.train_seconds = Some(seconds);
        self
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        store::save_json(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let ck: Checkpoint = store::load_json(path)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("unsupported checkpoint format `{}`", ck.format),
            });
        }
        let actual = model_hash(&ck.model);
        if actual != ck.content_hash {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!(
                    "content hash mismatch: file says {}, parameters hash to {actual}",
                    ck.content_hash
                ),
            });
        }
        Ok(ck)
    }
}

pub(crate) fn model_hash(model: &Autoencoder) -> String {
    let bytes = serde_json::to_vec(model).expect("model serializes");
    store::sha256_hex(&bytes)
}
