//! Finite environment classes with a sampling distribution over members.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gridworld::{GridworldConfig, Rect, Slope};
use crate::error::{Error, Result};

pub(crate) const GRIDSLOPE: &str = include_str!("../../presets/gridslope.cfg");
pub(crate) const MULTIGRID: &str = include_str!("../../presets/multigrid.cfg");

/// Sections of a run file that do not describe the class.
pub(crate) const RUN_SECTIONS: [&str; 3] = ["preset", "trainer", "finetune"];

fn preset(text: &str) -> EnvironmentClass {
    let mut table: toml::Table = toml::from_str(text).expect("shipped preset parses");
    for key in RUN_SECTIONS {
        table.remove(key);
    }
    EnvironmentClass::from_toml_table(table).expect("shipped preset is valid")
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentClass {
    pub name: String,
    pub configs: Vec<GridworldConfig>,
    /// Sampling probability of each config.
    pub weights: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassFile {
    name: String,
    #[serde(rename = "config")]
    configs: Vec<ConfigEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigEntry {
    name: String,
    weight: f64,
    #[serde(default = "default_side")]
    side: f64,
    #[serde(default = "default_max_step")]
    max_step: f64,
    initial: [f64; 4],
    walls: Vec<[f64; 4]>,
    slope: Slope,
}

fn default_side() -> f64 {
    2.0
}

fn default_max_step() -> f64 {
    0.2
}

fn rect(r: [f64; 4]) -> Rect {
    Rect::new(r[0], r[1], r[2], r[3])
}

fn unrect(r: &Rect) -> [f64; 4] {
    [r.x0, r.y0, r.x1, r.y1]
}

impl EnvironmentClass {
    pub fn new(name: impl Into<String>, configs: Vec<GridworldConfig>, weights: Vec<f64>) -> Result<Self> {
        let class = Self {
            name: name.into(),
            configs,
            weights,
        };
        class.validate()?;
        Ok(class)
    }

    pub fn validate(&self) -> Result<()> {
        if self.configs.is_empty() {
            return Err(Error::Config("environment class has no configs".into()));
        }
        if self.weights.len() != self.configs.len() {
            return Err(Error::Config(format!(
                "{} weights for {} configs",
                self.weights.len(),
                self.configs.len()
            )));
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("weights must be finite and nonnegative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("weights sum to {total}, not 1")));
        }
        self.configs.iter().try_for_each(GridworldConfig::validate)
    }

    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }

    /// Index of the config called `name`.
    pub fn position(&self, name: &str) -> Option<usize> {
        self.configs.iter().position(|c| c.name == name)
    }

    /// Index `i` with probability `weights[i]`.
    pub fn sample_environment<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, &w) in self.weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            acc += w;
            last = i;
            if u < acc {
                return i;
            }
        }
        last
    }

    /// Same configs with a different sampling distribution.
    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        Self::new(self.name.clone(), self.configs.clone(), weights)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: ClassFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_file(file)
    }

    /// Class described by the `name` and `[[config]]` entries of a parsed table.
    pub fn from_toml_table(table: toml::Table) -> Result<Self> {
        let file: ClassFile = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Self::from_file(file)
    }

    fn from_file(file: ClassFile) -> Result<Self> {
        let (configs, weights) = file
            .configs
            .into_iter()
            .map(|c| {
                (
                    GridworldConfig {
                        name: c.name,
                        side: c.side,
                        max_step: c.max_step,
                        slope: c.slope,
                        initial: rect(c.initial),
                        walls: c.walls.into_iter().map(rect).collect(),
                    },
                    c.weight,
                )
            })
            .unzip();
        Self::new(file.name, configs, weights)
    }

    pub fn to_toml_string(&self) -> String {
        let file = ClassFile {
            name: self.name.clone(),
            configs: self
                .configs
                .iter()
                .zip(&self.weights)
                .map(|(c, &weight)| ConfigEntry {
                    name: c.name.clone(),
                    weight,
                    side: c.side,
                    max_step: c.max_step,
                    initial: unrect(&c.initial),
                    walls: c.walls.iter().map(unrect).collect(),
                    slope: c.slope,
                })
                .collect(),
        };
        toml::to_string(&file).expect("class serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// GWS and GWN with `p = [0.8, 0.2]`.
    pub fn gridslope() -> Self {
        preset(GRIDSLOPE)
    }

    /// Ten configs, uniformly weighted; config 0 is the adverse GWN variant.
    pub fn multigrid() -> Self {
        preset(MULTIGRID)
    }
}
