//! Layered run configuration: defaults, then a TOML file, then command-line
//! flags, with per-key provenance recorded and the resolved copy written
//! into every output directory.

use std::collections::BTreeMap;
use std::path::Path;

use aeroseg_core::data::{ExportFormat, NormParams};
use aeroseg_core::error::{Error, Result};
use aeroseg_core::geometry::RamParams;
use aeroseg_core::model::ModelConfig;
use aeroseg_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    pub train_images: usize,
    pub val_images: usize,
    pub instances_per_image: usize,
    pub img_side: usize,
    pub size_min: f64,
    pub size_max: f64,
    pub noise: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            train_images: 50,
            val_images: 10,
            instances_per_image: 3,
            img_side: 256,
            size_min: 8.0,
            size_max: 64.0,
            noise: 0.04,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnotateSection {
    /// Instances with predicted quality below tau land on the review list.
    pub tau: f64,
    pub format: ExportFormat,
}

impl Default for AnnotateSection {
    fn default() -> Self {
        AnnotateSection {
            tau: 0.5,
            format: ExportFormat::Png,
        }
    }
}

/// Everything a run needs, fully resolved before any work starts.
#[derive(Clone, Debug, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub ram: RamParams,
    pub norm: NormParams,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthSection,
    pub annotate: AnnotateSection,
}

pub struct ResolvedConfig {
    pub cfg: RunConfig,
    /// Dotted key path -> "default" | "file" | "flag".
    pub provenance: BTreeMap<String, &'static str>,
}

fn collect_leaf_keys(value: &toml::Value, prefix: &str, out: &mut Vec<String>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let path = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                collect_leaf_keys(v, &path, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

impl ResolvedConfig {
    /// Defaults, optionally overlaid by a config file. Flags come afterwards
    /// through [`ResolvedConfig::set_flag`].
    pub fn load(file: Option<&Path>) -> Result<Self> {
        let mut provenance = BTreeMap::new();
        let defaults = RunConfig::default();
        let default_toml = toml::Value::try_from(&defaults)
            .map_err(|e| Error::config(format!("serializing defaults: {e}")))?;
        let mut keys = Vec::new();
        collect_leaf_keys(&default_toml, "", &mut keys);
        for k in keys {
            provenance.insert(k, "default");
        }

        let cfg = match file {
            None => defaults,
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
                let value: toml::Value = text
                    .parse()
                    .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
                let mut file_keys = Vec::new();
                collect_leaf_keys(&value, "", &mut file_keys);
                for k in file_keys {
                    provenance.insert(k, "file");
                }
                // missing keys fall back to defaults via serde(default)
                toml::from_str(&text)
                    .map_err(|e| Error::config(format!("{}: {e}", path.display())))?
            }
        };
        Ok(ResolvedConfig { cfg, provenance })
    }

    /// Apply one flag override (no-op when the flag was not given).
    pub fn set_flag<T>(&mut self, key: &'static str, value: Option<T>, apply: impl FnOnce(&mut RunConfig, T)) {
        if let Some(v) = value {
            apply(&mut self.cfg, v);
            self.provenance.insert(key.to_string(), "flag");
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.cfg.ram.validate()?;
        self.cfg.train.validate()?;
        self.cfg.model.encoder.validate()?;
        self.cfg.model.decoder_config().validate()?;
        if !(0.0..=1.0).contains(&self.cfg.annotate.tau) {
            return Err(Error::config(format!(
                "annotate.tau must lie in [0,1], got {}",
                self.cfg.annotate.tau
            )));
        }
        Ok(())
    }

    /// Write the resolved config (re-runnable TOML with per-key source
    /// comments) into an output directory.
    pub fn write_into(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let body = toml::to_string_pretty(&self.cfg)
            .map_err(|e| Error::config(format!("serializing config: {e}")))?;
        let mut annotated = String::new();
        let mut table = String::new();
        for line in body.lines() {
            let trimmed = line.trim();
            if trimmed.starts_with('[') && trimmed.ends_with(']') {
                table = trimmed.trim_matches(['[', ']']).to_string();
                annotated.push_str(line);
            } else if let Some((key, _)) = trimmed.split_once('=') {
                let key = key.trim();
                let path = if table.is_empty() {
                    key.to_string()
                } else {
                    format!("{table}.{key}")
                };
                let src = self.provenance.get(&path).copied().unwrap_or("default");
                annotated.push_str(line);
                annotated.push_str(&format!("  # {src}"));
            } else {
                annotated.push_str(line);
            }
            annotated.push('\n');
        }
        std::fs::write(dir.join("config.toml"), annotated)?;
        Ok(())
    }
}
