use coffee_core::event::SourceType;
use coffee_core::harness::ModelSettings;
use coffee_core::model::ModelConfig;
use coffee_core::trainer::TrainConfig;
use coffee_core::world::World;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Model shape as written in a `train --config` file. The vocabulary comes
/// from the world, so it is not part of the file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModelSpec")]
pub struct ModelSpec {
    pub sources: Vec<SourceType>,
    pub max_len: usize,
    pub enrichment: bool,
    #[serde(flatten)]
    pub settings: ModelSettings,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            sources: SourceType::ALL.to_vec(),
            max_len: 100,
            enrichment: false,
            settings: ModelSettings::default(),
        }
    }
}

/// `deny_unknown_fields` has no effect next to `flatten`, so keys matching
/// neither the spec nor the settings are collected here and rejected.
#[derive(Deserialize)]
struct RawModelSpec {
    #[serde(default = "default_sources")]
    sources: Vec<SourceType>,
    #[serde(default = "default_max_len")]
    max_len: usize,
    #[serde(default)]
    enrichment: bool,
    #[serde(flatten)]
    settings: ModelSettings,
    #[serde(flatten)]
    unknown: BTreeMap<String, toml::Value>,
}

fn default_sources() -> Vec<SourceType> {
    ModelSpec::default().sources
}

fn default_max_len() -> usize {
    ModelSpec::default().max_len
}

impl TryFrom<RawModelSpec> for ModelSpec {
    type Error = String;

    fn try_from(raw: RawModelSpec) -> Result<Self, String> {
        if let Some(key) = raw.unknown.keys().next() {
            return Err(format!("unknown model key `{key}`"));
        }
        Ok(ModelSpec {
            sources: raw.sources,
            max_len: raw.max_len,
            enrichment: raw.enrichment,
            settings: raw.settings,
        })
    }
}

/// Contents of a `train --config` file:
///
/// ```toml
/// [model]
/// sources = ["ad_impression"]
/// max_len = 200
///
/// [train]
/// lr = 0.003
/// ```
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    pub model: ModelSpec,
    pub train: TrainConfig,
}

impl RunSpec {
    pub fn from_toml_str(text: &str) -> Result<Self, String> {
        let spec: RunSpec = toml::from_str(text).map_err(|e| e.to_string())?;
        spec.train.validate().map_err(|e| e.to_string())?;
        Ok(spec)
    }

    pub fn model_config(&self, world: &World) -> ModelConfig {
        self.model
            .settings
            .model_config(world, &self.model.sources, self.model.max_len, self.model.enrichment)
    }
}
