//! Experiment configuration: a nested TOML document with dotted overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::affinity::DriftConfig;
use crate::error::{DriftError, Result};
use crate::mgda::QpOptions;
use crate::trainer::TrainConfig;

/// Settings of the two-component mixture transport experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransportConfig {
    pub particles: usize,
    pub targets: usize,
    /// Distance of each mixture mean from the origin along the first axis.
    pub separation: f64,
    pub sigma: f64,
    pub eta: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig {
            particles: 256,
            targets: 512,
            separation: 3.0,
            sigma: 0.5,
            eta: 0.5,
            steps: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Field settings for `drift-field` and `transport`.
    pub drift: DriftConfig,
    pub transport: TransportConfig,
    /// Solver settings for `mgda`.
    pub mgda: QpOptions,
    pub train: TrainConfig,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            drift: DriftConfig::default(),
            transport: TransportConfig::default(),
            mgda: QpOptions::default(),
            train: TrainConfig::default(),
            output: PathBuf::from("out"),
        }
    }
}

fn config_err(msg: impl std::fmt::Display) -> DriftError {
    DriftError::Config(msg.to_string())
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `a.b.c=value` to a TOML table, creating intermediate tables.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{assignment}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("bad override key `{key}`")));
    }
    let (last, parents) = path.split_last().expect("nonempty path");
    let mut cur = doc;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_err(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Builds the config from an optional TOML file, dotted overrides and a
    /// seed that applies to every seeded experiment.
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| config_err(format!("cannot read {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| config_err(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let mut cfg: ExperimentConfig = toml::Value::Table(doc).try_into().map_err(config_err)?;
        if let Some(s) = seed {
            cfg.transport.seed = s;
            cfg.train.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: DriftError| config_err(e);
        self.drift.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        let t = &self.transport;
        if t.particles < 2 || t.targets < t.particles {
            return Err(config_err("transport needs at least 2 particles and as many targets"));
        }
        if t.steps == 0 {
            return Err(config_err("transport.steps must be at least 1"));
        }
        if !(t.eta >= 0.0 && t.sigma > 0.0 && t.separation.is_finite()) {
            return Err(config_err("transport eta must be nonnegative and sigma positive"));
        }
        Ok(())
    }

    /// The fully resolved document, defaults included.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }
}

/// SHA-256 of the resolved training config.
pub fn train_config_hash(cfg: &TrainConfig) -> Result<[u8; 32]> {
    let text = toml::to_string(cfg).map_err(config_err)?;
    Ok(Sha256::digest(text.as_bytes()).into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_and_seed() {
        let sets = vec![
            "train.epochs=3".to_string(),
            "drift.temperatures=[0.1, 0.2]".to_string(),
            "transport.eta = 0".to_string(),
            "output=runs/a".to_string(),
        ];
        let cfg = ExperimentConfig::load(None, &sets, Some(9)).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.drift.temperatures, vec![0.1, 0.2]);
        assert_eq!(cfg.transport.eta, 0.0);
        assert_eq!(cfg.output, PathBuf::from("runs/a"));
        assert_eq!((cfg.train.seed, cfg.transport.seed), (9, 9));
    }

    #[test]
    fn rejects_unknown_keys_and_missing_files() {
        let bad = ExperimentConfig::load(None, &["train.nope=1".to_string()], None);
        assert!(matches!(bad, Err(DriftError::Config(_))));
        assert!(ExperimentConfig::load(None, &["noequals".to_string()], None).is_err());
        assert!(ExperimentConfig::load(None, &["train.batch_size=1".to_string()], None).is_err());
        let missing = ExperimentConfig::load(Some(Path::new("/nonexistent/x.toml")), &[], None);
        assert!(missing.unwrap_err().is_usage());
    }

    #[test]
    fn file_then_override() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[train]\nepochs = 7\nbatch_size = 2\n").unwrap();
        let cfg = ExperimentConfig::load(Some(&p), &["train.epochs=1".into()], None).unwrap();
        assert_eq!((cfg.train.epochs, cfg.train.batch_size), (1, 2));
    }

    #[test]
    fn hash_tracks_training_config() {
        let a = TrainConfig::default();
        let b = TrainConfig { epochs: 1, ..a.clone() };
        assert_eq!(train_config_hash(&a).unwrap(), train_config_hash(&a.clone()).unwrap());
        assert_ne!(train_config_hash(&a).unwrap(), train_config_hash(&b).unwrap());
    }
}
