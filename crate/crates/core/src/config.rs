//! Experiment configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::GeneratorConfig;
use crate::error::{Error, Result};
use crate::experts::ArchitectureSpec;
use crate::train::{Ablation, AdaptConfig, PretrainConfig};

/// Which runs a sweep performs for every seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub seeds: Vec<u64>,
    /// Ablation tags, each parsed by [`Ablation::parse`].
    pub variants: Vec<String>,
    /// Also train every architecture on the labelled target split.
    pub supervised: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            variants: [
                "full",
                "voting_only",
                "no_ema",
                "no_mid",
                "no_mtri",
                "no_ar",
                "baseline_ensemble",
                "independent",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            supervised: true,
        }
    }
}

impl SweepConfig {
    pub fn ablations(&self) -> Result<Vec<Ablation>> {
        self.variants.iter().map(|v| Ablation::parse(v)).collect()
    }
}

/// Everything needed to reproduce a run. The top-level `seed` seeds the
/// generator and every training stage that has no seed of its own.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub generator: GeneratorConfig,
    pub experts: Vec<ArchitectureSpec>,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            generator: GeneratorConfig::default(),
            experts: ArchitectureSpec::defaults(),
            pretrain: PretrainConfig {
                eval_every: 10,
                ..PretrainConfig::default()
            },
            adapt: AdaptConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = if text.trim_start().starts_with('{') {
            let value: serde_json::Value = serde_json::from_str(text)?;
            if value.get("generator").and_then(|g| g.get("seed")).is_some() {
                return Err(generator_seed_error());
            }
            serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?
        } else {
            let value: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
            if value
                .get("generator")
                .and_then(|g| g.as_table())
                .is_some_and(|g| g.contains_key("seed"))
            {
                return Err(generator_seed_error());
            }
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        };
        cfg.resolved()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Copies the top-level seed into the generator and checks every section.
    pub fn resolved(mut self) -> Result<Self> {
        self.generator.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    /// The same experiment under another seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.seed = seed;
        cfg.generator.seed = seed;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        if self.experts.len() < 2 {
            return Err(Error::Config(format!(
                "need at least 2 experts, got {}",
                self.experts.len()
            )));
        }
        for spec in &self.experts {
            spec.validate()?;
        }
        self.pretrain.validate()?;
        self.adapt.validate()?;
        self.sweep.ablations()?;
        if self.sweep.seeds.is_empty() {
            return Err(Error::Config("sweep.seeds is empty".into()));
        }
        Ok(())
    }

    /// The resolved configuration as TOML, written into every run directory.
    pub fn to_toml(&self) -> Result<String> {
        let err = |e: &dyn std::fmt::Display| Error::Config(format!("cannot serialize config: {e}"));
        let mut table = toml::Table::try_from(self).map_err(|e| err(&e))?;
        if let Some(generator) = table.get_mut("generator").and_then(|g| g.as_table_mut()) {
            generator.remove("seed");
        }
        toml::to_string(&table).map_err(|e| err(&e))
    }
}

fn generator_seed_error() -> Error {
    Error::Config("`generator.seed` is derived from the top-level `seed`; set that instead".into())
}
