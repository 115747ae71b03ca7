//! Run configuration: one JSON document describing schema, data, model and
//! training settings. Unknown keys are rejected; referenced paths are
//! validated when the file is loaded and resolved relative to it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rct_core::data::{load_dataset, Dataset};
use rct_core::model::ModelConfig;
use rct_core::schema::FeatureSchema;
use rct_core::synthgen::{self, GenConfig};
use rct_core::training::TrainConfig;

use crate::CliError;

pub const PRESET_SYNTH_STD: &str = "synth-std";

fn default_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

fn default_split_seed() -> u64 {
    7
}

/// Where the records come from: a JSONL file, an inline generator config,
/// or a named preset. Exactly one must be set.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generate: Option<GenConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default = "default_split_seed")]
    pub split_seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<PathBuf>,
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl RunConfig {
    /// Parse and validate, resolving relative paths against the config
    /// file's directory.
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let mut config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(schema) = &config.schema {
            config.schema = Some(resolve_existing(base, schema)?);
        }
        if let Some(data) = &config.data.path {
            config.data.path = Some(resolve_existing(base, data)?);
        }
        if let Some(out) = &config.output {
            config.output = Some(base.join(out));
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let sources = [
            self.data.path.is_some(),
            self.data.generate.is_some(),
            self.data.preset.is_some(),
        ]
        .iter()
        .filter(|&&b| b)
        .count();
        if sources != 1 {
            return Err(CliError::config(
                "data section must set exactly one of path, generate or preset".to_string(),
            ));
        }
        if let Some(preset) = &self.data.preset {
            if preset != PRESET_SYNTH_STD {
                return Err(CliError::config(format!("unknown preset '{preset}'")));
            }
        } else if self.schema.is_none() {
            return Err(CliError::config(
                "schema path is required unless a preset supplies it".to_string(),
            ));
        }
        self.model.validate().map_err(CliError::from_config_err)?;
        self.train.validate().map_err(CliError::from_config_err)?;
        Ok(())
    }

    /// Load the schema and produce the raw (unsplit, unencoded) dataset.
    pub fn resolve_data(&self) -> Result<(FeatureSchema, Dataset), CliError> {
        if let Some(preset) = &self.data.preset {
            debug_assert_eq!(preset, PRESET_SYNTH_STD);
            let (gen_config, schema) = synthgen::synth_std();
            let ds = synthgen::generate(&gen_config, &schema).map_err(CliError::from_config_err)?;
            return Ok((schema, ds));
        }
        let schema_path = self.schema.as_ref().expect("validated");
        let schema = FeatureSchema::load(schema_path).map_err(CliError::from_config_err)?;
        if let Some(gen_config) = &self.data.generate {
            let ds = synthgen::generate(gen_config, &schema).map_err(CliError::from_config_err)?;
            return Ok((schema, ds));
        }
        let path = self.data.path.as_ref().expect("validated");
        let ds = load_dataset(path, &schema).map_err(CliError::from_config_err)?;
        Ok((schema, ds))
    }
}

/// Self-contained generator description; also the provenance sidecar format.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenFileConfig {
    pub schema: FeatureSchema,
    pub gen: GenConfig,
}

impl GenFileConfig {
    pub fn load(path: &Path) -> Result<GenFileConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let config: GenFileConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        config
            .schema
            .validate()
            .map_err(CliError::from_config_err)?;
        config
            .gen
            .validate(&config.schema)
            .map_err(CliError::from_config_err)?;
        Ok(config)
    }

    pub fn preset_synth_std() -> GenFileConfig {
        let (gen, schema) = synthgen::synth_std();
        GenFileConfig { schema, gen }
    }
}

fn resolve_existing(base: &Path, p: &Path) -> Result<PathBuf, CliError> {
    let resolved = if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    };
    if !resolved.exists() {
        return Err(CliError::config(format!(
            "referenced path does not exist: {}",
            resolved.display()
        )));
    }
    Ok(resolved)
}
