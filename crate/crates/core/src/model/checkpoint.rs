use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, SamaModel, TrainConfig, Vocab};
use crate::error::{Error, Result};
use crate::params::{ParamStore, SerializedTensor};

/// Single JSON archive: configs, vocabulary and every tensor by module path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab: Vocab,
    pub params: BTreeMap<String, SerializedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &SamaModel, train: &TrainConfig) -> Self {
        Self {
            model: model.config.clone(),
            train: train.clone(),
            vocab: model.vocab.clone(),
            params: model.params.to_serialized(),
        }
    }

    pub fn into_model(self) -> Result<SamaModel> {
        let params = ParamStore::from_serialized(self.params)
            .map_err(|e| Error::Data(format!("checkpoint tensor has a bad shape: {e}")))?;
        SamaModel::from_parts(self.model, self.vocab, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }
}
