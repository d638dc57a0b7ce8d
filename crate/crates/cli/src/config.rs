use std::path::{Path, PathBuf};

use protodiag::corpus::SynthSpec;
use protodiag::experiments::{ExperimentConfig, FewShotSpec};
use protodiag::nn::ModelConfig;
use protodiag::proto::ProtoConfig;
use protodiag::rl::TrainConfig;
use protodiag::simulator::SimConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything a run reads from its config file. Command-line flags override
/// individual fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub sim: SimConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub proto: ProtoConfig,
    pub fewshot: FewShotSpec,
    pub noise_levels: Vec<f64>,
    pub synth: SynthSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            proto: ProtoConfig::default(),
            fewshot: FewShotSpec::default(),
            noise_levels: vec![0.0, 0.1, 0.2, 0.3],
            synth: SynthSpec::default(),
            corpus: None,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            sim: self.sim.clone(),
            train: self.train.clone(),
            model: self.model.clone(),
            proto: self.proto.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"train": {"gama": 0.5}}"#).unwrap_err();
        assert!(err.to_string().contains("gama"));
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn partial_config_keeps_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"train": {"gamma": 0.5}}"#).unwrap();
        assert_eq!(c.train.gamma, 0.5);
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(c.sim.max_turns, 44);
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
