//! Layered run configuration: built-in defaults, then a TOML file, then
//! `key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::datagen::DatagenConfig;
use crate::error::{Error, IoContext, Result};
use crate::losses::LossWeights;
use crate::mmpnet::MmpNetConfig;
use crate::mmprnn::NetConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Raw sharp sequences for `datagen`.
    pub raw: Option<PathBuf>,
    /// Generated dataset root.
    pub data: Option<PathBuf>,
    pub mmp_checkpoint: Option<PathBuf>,
    pub deblur_checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split: String,
    /// Measure per-frame runtime.
    pub runtime: bool,
    /// Runtime input size; the first test frame's size when absent.
    pub runtime_height: Option<usize>,
    pub runtime_width: Option<usize>,
    pub warmup_frames: usize,
    pub timed_frames: usize,
    /// Write restored frames next to the report.
    pub save_outputs: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: "test".into(),
            runtime: true,
            runtime_height: None,
            runtime_width: None,
            warmup_frames: 5,
            timed_frames: 20,
            save_outputs: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub datagen: DatagenConfig,
    pub mmpnet: MmpNetConfig,
    pub net: NetConfig,
    pub loss: LossWeights,
    /// MMP-Net training recipe.
    pub train_mmp: TrainConfig,
    /// Deblurring-network training recipe.
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            datagen: DatagenConfig::default(),
            mmpnet: MmpNetConfig::default(),
            net: NetConfig::default(),
            loss: LossWeights::default(),
            train_mmp: TrainConfig::mmpnet(),
            train: TrainConfig::deblur(),
            eval: EvalConfig::default(),
        }
    }
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

impl RunConfig {
    fn defaults_table() -> Table {
        Table::try_from(RunConfig::default()).expect("defaults serialise to TOML")
    }

    /// Resolves a possibly bare key: keys naming a top-level field are kept,
    /// bare keys are looked up in `section`.
    fn qualify(key: &str, section: Option<&str>, defaults: &Table) -> String {
        let head = key.split('.').next().unwrap_or(key);
        if defaults.contains_key(head) {
            return key.to_string();
        }
        match section {
            Some(s) if defaults.get(s).and_then(Value::as_table).is_some_and(|t| t.contains_key(head) || !key.contains('.')) => {
                format!("{s}.{key}")
            }
            _ => key.to_string(),
        }
    }

    /// Defaults ← `file` ← `overrides` (`key=value`, dotted keys, bare keys
    /// resolved inside `section`).
    pub fn resolve(file: Option<&Path>, overrides: &[String], section: Option<&str>) -> Result<Self> {
        let defaults = Self::defaults_table();
        let mut table = defaults.clone();
        if let Some(path) = file {
            let text = fs::read_to_string(path).at(path)?;
            let parsed: Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut table, parsed);
        }
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not of the form key=value")))?;
            let key = Self::qualify(key.trim(), section, &defaults);
            let mut node = &mut table;
            let parts: Vec<&str> = key.split('.').collect();
            for p in &parts[..parts.len() - 1] {
                node = match node.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new())) {
                    Value::Table(t) => t,
                    _ => return Err(Error::Config(format!("`{p}` in `{key}` is not a section"))),
                };
            }
            node.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |r: Result<()>| r.map_err(|e| Error::Config(e.to_string()));
        wrap(self.datagen.validate())?;
        wrap(self.mmpnet.validate())?;
        wrap(self.net.validate())?;
        wrap(self.loss.validate())?;
        wrap(self.train_mmp.validate())?;
        wrap(self.train.validate())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises to TOML")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialises to JSON")
    }

    /// Writes `config.toml` into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).at(dir)?;
        let path = dir.join("config.toml");
        fs::write(&path, self.to_toml()).at(&path)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::PriorSource;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::resolve(None, &[], None).unwrap();
        assert_eq!(cfg, RunConfig::default());
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn file_then_flags_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "seed = 7\n[net]\nn_c = 16\nF = 5\n[train]\nbase_lr = 1e-3\n").unwrap();
        let cfg = RunConfig::resolve(Some(&path), &["net.n_c=12".into(), "train.prior=\"gt\"".into()], None).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.net.n_c, 12);
        assert_eq!(cfg.net.frames, 5);
        assert_eq!(cfg.net.n_a, 9);
        assert_eq!(cfg.train.base_lr, 1e-3);
        assert_eq!(cfg.train.prior, PriorSource::Gt);
    }

    #[test]
    fn bare_keys_resolve_in_section() {
        let cfg = RunConfig::resolve(None, &["window_range=[7,7]".into(), "stride=2".into()], Some("datagen")).unwrap();
        assert_eq!(cfg.datagen.window_range, [7, 7]);
        assert_eq!(cfg.datagen.stride, Some(2));
        let cfg = RunConfig::resolve(None, &["prior=none".into()], Some("train")).unwrap();
        assert_eq!(cfg.train.prior, PriorSource::None);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::resolve(None, &["net.bogus=1".into()], None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("bogus"), "{err}");
        assert!(RunConfig::resolve(None, &["novalue".into()], None).unwrap_err().to_string().contains("novalue"));
        assert!(RunConfig::resolve(None, &["net.n_c=0".into()], None).is_err());
    }
}
