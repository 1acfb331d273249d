//! Training loops for the proxy task and the two downstream tasks, plus the
//! metrics and strategy-comparison machinery.

mod compare;
mod finetune;
pub mod metrics;
mod pretrain;
mod sgd;

pub use compare::{compare_strategies, ComparisonCell, ComparisonTable, StrategyArmSpec};
pub use finetune::{
    evaluate_cls, evaluate_seg, finetune_cls, finetune_seg, EvalOutcome, FinetuneOutput,
};
pub use metrics::{accuracy, mean_iou, MetricsRecord, MetricsReport};
pub use pretrain::{pretrain, PretrainOutput, ProxyTrainer, StepStats};
pub use sgd::Sgd;

use crate::cubeops::GridSpec;
use crate::error::{Error, Result};
use crate::model::losses::LossWeights;
use crate::model::BackboneConfig;
use crate::scalar::Scalar;
use crate::volumes::{normalize_intensity, DatasetManifest, LabeledVolume};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    FinetuneCls,
    FinetuneSeg,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::FinetuneCls => "finetune_cls",
            Phase::FinetuneSeg => "finetune_seg",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    Scratch,
    Checkpoint(PathBuf),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub grid: GridSpec,
    /// Permutation bank size the proxy head predicts over.
    pub k: usize,
    pub rot_prob: f64,
    pub loss_weights: LossWeights,
    pub backbone: BackboneConfig,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub seed: u64,
    pub init: InitStrategy,
    pub freeze_encoder: bool,
    /// Evaluate every this many optimizer steps; 0 means at each epoch end.
    pub eval_every: usize,
    pub num_classes: usize,
    pub num_seg_classes: usize,
    /// Pins wall-clock fields in reports so repeated runs are byte-identical.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase: Phase::Pretrain,
            grid: GridSpec {
                counts: (2, 2, 2),
                cube_size: (64, 64, 64),
                gap: 10,
                jitter: 0,
            },
            k: 100,
            rot_prob: 0.5,
            loss_weights: LossWeights::default(),
            backbone: BackboneConfig::default(),
            batch_size: 4,
            learning_rate: 1e-3,
            momentum: 0.9,
            epochs: 50,
            seed: 0,
            init: InitStrategy::Scratch,
            freeze_encoder: false,
            eval_every: 0,
            num_classes: 2,
            num_seg_classes: 2,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.backbone.validate()?;
        self.loss_weights.validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(format!(
                "batch_size and epochs must be positive, got {} and {}",
                self.batch_size, self.epochs
            )));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(0.0..=1.0).contains(&self.rot_prob) {
            return Err(Error::Config(format!(
                "rot_prob must be in [0, 1], got {}",
                self.rot_prob
            )));
        }
        match self.phase {
            Phase::Pretrain => {
                if self.k < 2 {
                    return Err(Error::Config(format!("pretraining needs K >= 2, got {}", self.k)));
                }
                if self.grid.m() < 2 {
                    return Err(Error::Config("pretraining needs a grid with M >= 2 cubes".into()));
                }
            }
            Phase::FinetuneCls => {
                if self.num_classes < 2 {
                    return Err(Error::Config(format!(
                        "classification needs num_classes >= 2, got {}",
                        self.num_classes
                    )));
                }
            }
            Phase::FinetuneSeg => {
                if self.num_seg_classes < 2 {
                    return Err(Error::Config(format!(
                        "segmentation needs num_seg_classes >= 2, got {}",
                        self.num_seg_classes
                    )));
                }
            }
        }
        Ok(())
    }

    /// Hash of the resolved configuration. The struct serializes with a fixed
    /// field order, so the hash does not depend on how the user ordered their
    /// config file.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        let mut hex = String::with_capacity(16);
        for b in &digest[..8] {
            hex.push_str(&format!("{b:02x}"));
        }
        hex
    }
}

/// Train/test manifests for one run.
#[derive(Debug, Clone)]
pub struct DataSplits {
    pub train: DatasetManifest,
    pub test: DatasetManifest,
}

/// Loads a whole split into memory with intensities normalized.
pub fn load_split<F: Scalar>(manifest: &DatasetManifest) -> Result<Vec<LabeledVolume<F>>> {
    let mut volumes = manifest.load_all::<F>()?;
    for v in &mut volumes {
        normalize_intensity(&mut v.volume.data);
    }
    Ok(volumes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn validation_catches_bad_fields() {
        let mut cfg = TrainConfig::default();
        cfg.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.momentum = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.k = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.phase = Phase::FinetuneCls;
        cfg.num_classes = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = TrainConfig::default();
        let b = TrainConfig::default();
        assert_eq!(a.config_hash(), b.config_hash());
        let mut c = TrainConfig::default();
        c.learning_rate = 2e-3;
        assert_ne!(a.config_hash(), c.config_hash());
        assert_eq!(a.config_hash().len(), 16);
    }
}
