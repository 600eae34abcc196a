//! Run configuration: one JSON document covering every subcommand, with
//! command-line flags applied on top.

use std::fs;
use std::path::Path;

use oxygan::data::{AugmentConfig, SynthConfig};
use oxygan::eval::{EvalConfig, SweepConfig};
use oxygan::objective::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n_cases: usize,
    pub train_ratio: f64,
    pub source: SynthConfig,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            n_cases: 222,
            train_ratio: oxygan::data::manifest::DEFAULT_TRAIN_RATIO,
            source: SynthConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthSection,
    pub augment: AugmentConfig,
    /// Training settings, including the network architecture.
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    /// Reads a config file, reporting the offending field on failure.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io("reading config", path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            CliError::Config {
                path: path.to_path_buf(),
                field,
                message: e.into_inner().to_string(),
            }
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical (compact) JSON encoding, hex encoded.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate()?;
        self.synth.source.validate()?;
        if self.augment.net_size != self.train.network.image_size {
            return Err(CliError::invalid(
                "augment.net_size",
                format!(
                    "{} differs from train.network.image_size {}",
                    self.augment.net_size, self.train.network.image_size
                ),
            ));
        }
        if self.eval.infer_batch == 0 {
            return Err(CliError::invalid("eval.infer_batch", "must be at least 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_hash_is_stable() {
        let cfg = RunConfig::default();
        let back = RunConfig::parse(&cfg.to_json(), Path::new("c.json")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
        let mut other = cfg.clone();
        other.train.seed = 1;
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = RunConfig::parse(
            r#"{"train": {"lambda_l1": 400, "network": {"image_size": 128}}}"#,
            Path::new("c.json"),
        )
        .unwrap();
        assert_eq!(cfg.train.lambda_l1, 400.0);
        assert_eq!(cfg.train.network.image_size, 128);
        assert_eq!(cfg.train.network.base_filters, 64);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn errors_name_the_field() {
        let err = RunConfig::parse(r#"{"train": {"batch_size": "four"}}"#, Path::new("c.json")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("c.json") && msg.contains("train.batch_size"), "{msg}");
        let err = RunConfig::parse(r#"{"train": {"network": {"depth": 3}}}"#, Path::new("c.json")).unwrap_err();
        assert!(err.to_string().contains("train.network"), "{err}");
    }

    #[test]
    fn net_size_must_match_image_size() {
        let mut cfg = RunConfig::default();
        cfg.augment.net_size = 128;
        assert!(cfg.validate().is_err());
        cfg.augment.net_size = cfg.train.network.image_size;
        assert!(cfg.validate().is_ok());
    }
}
