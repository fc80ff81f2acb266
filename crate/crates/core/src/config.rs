//! Run configuration: one TOML file with `[data]`, `[generator]`, `[bert]`,
//! `[cnn_d]` and `[train]` tables, every key optional.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bert::BertConfig;
use crate::cnn_d::CnnDConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::synth::DataConfig;
use crate::tensor::Float;
use crate::train::{Models, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub generator: GeneratorConfig,
    pub bert: BertConfig,
    pub cnn_d: CnnDConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.generator.validate()?;
        self.bert.validate()?;
        self.train.validate()?;
        if self.generator.input_dims != self.data.mri_dims {
            return Err(Error::Config(format!(
                "generator.input_dims {:?} differ from data.mri_dims {:?}",
                self.generator.input_dims, self.data.mri_dims
            )));
        }
        if self.generator.output_dims != self.data.pet_dims {
            return Err(Error::Config(format!(
                "generator.output_dims {:?} differ from data.pet_dims {:?}",
                self.generator.output_dims, self.data.pet_dims
            )));
        }
        Ok(())
    }

    pub fn build_models<T: Float>(&self) -> Result<Models<T>> {
        Models::new(
            self.generator.clone(),
            self.bert.clone(),
            self.train.use_cnn_d.then(|| self.cnn_d.clone()),
        )
    }
}
