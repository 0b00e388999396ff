//! Union of every configurable key: model, training, data, and paths.
//!
//! Sources apply in order: defaults, the `--config` file, `--set` pairs,
//! then dedicated flags.

use std::path::{Path, PathBuf};

use graphten::config::{parse_bool, parse_kv, parse_list, unknown_key, KvMap};
use graphten::texdata::{SyntheticSpec, DATA_KEYS};
use graphten::trainer::{ModelConfig, TrainConfig, MODEL_KEYS, TRAIN_KEYS};
use graphten::{Error, Result};

const RUN_KEYS: &[&str] = &[
    "data.split",
    "data.strict",
    "paths.data",
    "paths.out",
    "paths.checkpoint",
];

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: SyntheticSpec,
    /// Train/val/test fractions used when a dataset carries no split file.
    pub split: [f64; 3],
    /// Fail on the first unreadable image instead of skipping it.
    pub strict: bool,
    pub data_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: SyntheticSpec::default(),
            split: [0.8, 0.1, 0.1],
            strict: true,
            data_dir: None,
            out: None,
            checkpoint: None,
        }
    }
}

pub fn known_keys() -> impl Iterator<Item = &'static str> {
    MODEL_KEYS
        .iter()
        .chain(TRAIN_KEYS)
        .chain(DATA_KEYS)
        .chain(RUN_KEYS)
        .copied()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.model.apply(key, value)? || self.train.apply(key, value)? || self.data.apply(key, value)? {
            return Ok(());
        }
        match key {
            "data.split" => {
                let f: Vec<f64> = parse_list(key, value)?;
                self.split = f
                    .try_into()
                    .map_err(|_| Error::Config(format!("{key}: expected three fractions, got {value:?}")))?;
            }
            "data.strict" => self.strict = parse_bool(key, value)?,
            "paths.data" => self.data_dir = Some(value.into()),
            "paths.out" => self.out = Some(value.into()),
            "paths.checkpoint" => self.checkpoint = Some(value.into()),
            _ => return Err(unknown_key(key, known_keys())),
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        for (k, v) in parse_kv(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {pair:?}")))?;
        self.set(k.trim(), v.trim())
    }

    /// Data-generation keys as canonical text, for `spec.txt`.
    pub fn data_text(&self) -> String {
        let mut kv = KvMap::new();
        self.data.to_kv(&mut kv);
        kv.insert("data.split".into(), graphten::config::join(&self.split));
        graphten::config::to_text(&kv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_known_key_is_settable() {
        let mut defaults = KvMap::new();
        let rc = RunConfig::default();
        rc.model.to_kv(&mut defaults);
        rc.train.to_kv(&mut defaults);
        rc.data.to_kv(&mut defaults);
        let mut rc2 = RunConfig::default();
        for (k, v) in &defaults {
            rc2.set(k, v).unwrap();
        }
        rc2.set("data.split", "1,0,0").unwrap();
        rc2.set("paths.out", "x").unwrap();
        assert_eq!(rc2.split, [1.0, 0.0, 0.0]);
        assert_eq!(rc2.model, rc.model);
    }

    #[test]
    fn unknown_key_suggests_nearest() {
        let e = RunConfig::default().set("train.lr_dorp", "3").unwrap_err().to_string();
        assert!(e.contains("train.lr_drop"), "{e}");
        assert!(RunConfig::default().set_pair("novalue").is_err());
    }
}
