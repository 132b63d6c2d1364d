//! Run files: trainer and fine-tuning sections plus an environment class.
//!
//! A run file may name a shipped preset with `preset = "gridslope"`; its own
//! keys are then merged over the preset, table by table.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::env::class::{EnvironmentClass, GRIDSLOPE, MULTIGRID, RUN_SECTIONS};
use crate::error::{Error, Result};
use crate::finetune::FinetuneConfig;
use crate::pretrain::TrainerConfig;

pub const PRESETS: [&str; 2] = ["gridslope", "multigrid"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub trainer: TrainerConfig,
    pub finetune: FinetuneConfig,
    pub class: EnvironmentClass,
}

fn preset_text(name: &str) -> Result<&'static str> {
    match name {
        "gridslope" => Ok(GRIDSLOPE),
        "multigrid" => Ok(MULTIGRID),
        other => Err(Error::Config(format!("unknown preset {other:?}"))),
    }
}

fn parse_table(text: &str) -> Result<toml::Table> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

fn section<T: serde::de::DeserializeOwned + Default>(table: &mut toml::Table, key: &str) -> Result<T> {
    match table.remove(key) {
        None => Ok(T::default()),
        Some(v) => v
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("[{key}]: {e}"))),
    }
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        Self::from_toml_str(preset_text(name)?)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut table = parse_table(text)?;
        if let Some(name) = table.remove("preset") {
            let name = name
                .as_str()
                .ok_or_else(|| Error::Config("preset must be a string".into()))?
                .to_string();
            let mut base = parse_table(preset_text(&name)?)?;
            merge(&mut base, table);
            table = base;
        }
        let trainer: TrainerConfig = section(&mut table, "trainer")?;
        let finetune: FinetuneConfig = section(&mut table, "finetune")?;
        debug_assert!(RUN_SECTIONS.iter().all(|k| !table.contains_key(*k)));
        let class = EnvironmentClass::from_toml_table(table)?;
        trainer.validate()?;
        finetune.validate()?;
        Ok(Self {
            trainer,
            finetune,
            class,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Fully resolved run file with every default spelled out.
    pub fn to_toml_string(&self) -> String {
        let mut table = parse_table(&self.class.to_toml_string()).expect("class serializes");
        table.insert(
            "trainer".into(),
            toml::Value::try_from(&self.trainer).expect("trainer serializes"),
        );
        table.insert(
            "finetune".into(),
            toml::Value::try_from(&self.finetune).expect("finetune serializes"),
        );
        toml::to_string(&table).expect("run config serializes")
    }

    /// JSON with sorted keys; independent of key order in the source file.
    pub fn canonical_json(&self) -> String {
        let table = parse_table(&self.to_toml_string()).expect("round trip");
        let value = serde_json::to_value(&table).expect("toml maps to json");
        serde_json::to_string(&value).expect("json serializes")
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}
