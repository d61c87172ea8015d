//! Experiment configuration loaded from TOML. Unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{SyntheticSpec, TaskKind};
use crate::metrics::{activitynet_iou_set, thumos_iou_set, thumos_recall_grid};
use crate::model::ModelConfig;
use crate::objectives::{LossConfig, TrainConfig, DEFAULT_TEMPERATURE};

pub const RECOGNITION_GAPS: [usize; 8] = [1, 2, 3, 4, 5, 6, 10, 15];
pub const RETRIEVAL_GAPS: [usize; 3] = [10, 15, 30];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("`{key}`: {constraint}")]
    Invalid { key: String, constraint: String },
}

fn invalid(key: &str, constraint: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.to_string(), constraint: constraint.into() }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: SyntheticSpec,
    /// Frame gaps for sampling; the task's standard set when absent.
    pub gaps: Option<Vec<usize>>,
}

impl DataConfig {
    pub fn gap_set(&self) -> Vec<usize> {
        match &self.gaps {
            Some(g) => g.clone(),
            None => match self.synthetic.task {
                TaskKind::Retrieval => RETRIEVAL_GAPS.to_vec(),
                TaskKind::Localisation => vec![1],
                _ => RECOGNITION_GAPS.to_vec(),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: usize,
    pub temperature: f64,
    pub symmetric_loss: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            weight_decay: t.weight_decay,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            steps: t.steps,
            temperature: DEFAULT_TEMPERATURE,
            symmetric_loss: false,
        }
    }
}

impl TrainSection {
    pub fn optimizer(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            steps: self.steps,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig { temperature: self.temperature, symmetric: self.symmetric_loss }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IouSet {
    /// 0.3 to 0.7 in steps of 0.1.
    Thumos,
    /// 0.5 to 0.95 in steps of 0.05.
    Activitynet,
}

impl IouSet {
    pub fn thresholds(self) -> Vec<f64> {
        match self {
            IouSet::Thumos => thumos_iou_set(),
            IouSet::Activitynet => activitynet_iou_set(),
        }
    }

    /// Soft-NMS overlap threshold used with this benchmark family.
    pub fn soft_nms_threshold(self) -> f64 {
        match self {
            IouSet::Thumos => 0.5,
            IouSet::Activitynet => 0.85,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub top_k: Vec<usize>,
    pub crops: usize,
    pub ways: usize,
    pub shots: usize,
    pub trials: usize,
    /// Sampling rounds of the all-category few-shot protocol.
    pub rounds: usize,
    /// Optimizer steps per few-shot trial.
    pub few_shot_steps: usize,
    pub zero_shot_train_fraction: f64,
    pub localisation_train_fraction: f64,
    pub iou_set: IouSet,
    pub recall_grid: Vec<f64>,
    pub proposal_numbers: Vec<usize>,
    /// Random background proposals added per video by the jittered source.
    pub false_proposals: usize,
    /// Classes turned into detections per proposal.
    pub detections_per_proposal: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            top_k: vec![1, 5],
            crops: 5,
            ways: 5,
            shots: 5,
            trials: 200,
            rounds: 10,
            few_shot_steps: 100,
            zero_shot_train_fraction: 0.5,
            localisation_train_fraction: 0.75,
            iou_set: IouSet::Thumos,
            recall_grid: thumos_recall_grid(),
            proposal_numbers: vec![10, 20, 50],
            false_proposals: 4,
            detections_per_proposal: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainSection,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serialisable")
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config is always serialisable");
        Sha256::digest(&json).into()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.model;
        let need = 2 * m.prompt_k + 3;
        if m.token_budget < need {
            return Err(invalid(
                "model.prompt_k",
                format!("2·{}+3 = {need} exceeds model.token_budget {}", m.prompt_k, m.token_budget),
            ));
        }
        m.validate().map_err(|e| invalid("model", e.to_string()))?;
        self.data.synthetic.validate().map_err(|e| invalid("data.synthetic", e.to_string()))?;
        let gaps = self.data.gap_set();
        if gaps.is_empty() || gaps.contains(&0) {
            return Err(invalid("data.gaps", "must be a non-empty list of positive gaps"));
        }
        if !(self.train.temperature > 0.0) {
            return Err(invalid("train.temperature", "must be positive"));
        }
        self.train.optimizer().validate().map_err(|e| invalid("train", e.to_string()))?;
        let e = &self.eval;
        if e.top_k.is_empty() || e.top_k.contains(&0) {
            return Err(invalid("eval.top_k", "must list positive k values"));
        }
        if e.crops == 0 || e.ways < 2 || e.shots == 0 || e.trials == 0 || e.rounds == 0 {
            return Err(invalid("eval", "crops, shots, trials and rounds must be positive and ways ≥ 2"));
        }
        for (key, f) in [
            ("eval.zero_shot_train_fraction", e.zero_shot_train_fraction),
            ("eval.localisation_train_fraction", e.localisation_train_fraction),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return Err(invalid(key, "must lie strictly between 0 and 1"));
            }
        }
        if e.recall_grid.is_empty() || e.proposal_numbers.is_empty() || e.detections_per_proposal == 0 {
            return Err(invalid("eval", "recall_grid, proposal_numbers and detections_per_proposal must be non-empty"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = ExperimentConfig::from_toml("seed = 3\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.train.temperature, 0.07);
        assert_eq!(c.train.learning_rate, 1e-4);
        assert_eq!(c.model.prompt_k, 16);
        assert_eq!(c.model.token_budget, 77);
        assert_eq!(c.train.batch_size, 64);
        assert_eq!(c.data.gap_set(), RECOGNITION_GAPS.to_vec());
    }

    #[test]
    fn oversized_prompt_rejected_with_key() {
        let err = ExperimentConfig::from_toml("[model]\nprompt_k = 40\n").unwrap_err().to_string();
        assert!(err.contains("model.prompt_k") && err.contains("83"), "{err}");
    }

    #[test]
    fn unknown_key_rejected() {
        let err = ExperimentConfig::from_toml("[train]\ndropout = 0.1\n").unwrap_err().to_string();
        assert!(err.contains("dropout"), "{err}");
        assert!(ExperimentConfig::from_toml("dropout = 0.1\n").is_err());
    }

    #[test]
    fn toml_roundtrip_and_stable_hash() {
        let c = ExperimentConfig::from_toml("seed = 9\n[data.synthetic]\ntask = \"retrieval\"\n").unwrap();
        assert_eq!(c.data.gap_set(), RETRIEVAL_GAPS.to_vec());
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let other = ExperimentConfig { seed: 10, ..c.clone() };
        assert_ne!(other.hash(), c.hash());
    }

    #[test]
    fn bad_temperature_names_key() {
        let err = ExperimentConfig::from_toml("[train]\ntemperature = 0.0\n").unwrap_err().to_string();
        assert!(err.contains("train.temperature"), "{err}");
    }
}
