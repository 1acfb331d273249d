//! Multi-seed strategy comparison: pretrain-then-finetune arms against a
//! from-scratch baseline, with matched downstream budgets so the only thing
//! that differs between arms is the initialization.

use super::finetune::{finetune_cls, finetune_seg};
use super::pretrain::pretrain;
use super::{DataSplits, InitStrategy, Phase, TrainConfig};
use crate::error::{Error, Result};
use crate::model::save_checkpoint;
use crate::permbank::PermutationBank;
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// One comparison arm: an optional pretraining stage feeding a downstream
/// config. Arms without a pretraining stage start the encoder from scratch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategyArmSpec {
    pub name: String,
    pub pretrain: Option<TrainConfig>,
    pub finetune: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonCell {
    pub arm: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub mean: f64,
    /// Sample standard deviation across seeds (zero for a single seed).
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub metric: String,
    pub cells: Vec<ComparisonCell>,
    pub summary: Vec<ArmSummary>,
}

impl ComparisonTable {
    pub fn arm_values(&self, arm: &str) -> Vec<f64> {
        self.cells
            .iter()
            .filter(|c| c.arm == arm)
            .map(|c| c.value)
            .collect()
    }

    pub fn arm_summary(&self, arm: &str) -> Option<&ArmSummary> {
        self.summary.iter().find(|s| s.arm == arm)
    }

    /// Per-run rows followed by mean/std rows per arm.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("arm,seed,metric,value\n");
        for c in &self.cells {
            out.push_str(&format!("{},{},{},{}\n", c.arm, c.seed, c.metric, c.value));
        }
        for s in &self.summary {
            out.push_str(&format!("{},mean,{},{}\n", s.arm, self.metric, s.mean));
            out.push_str(&format!("{},std,{},{}\n", s.arm, self.metric, s.std));
        }
        out
    }
}

/// Serializes a config with seed and init pinned so two configs can be
/// compared on everything else.
fn budget_key(cfg: &TrainConfig, ignore_loss_weights: bool) -> String {
    let mut c = cfg.clone();
    c.seed = 0;
    c.init = InitStrategy::Scratch;
    c.deterministic = false;
    if ignore_loss_weights {
        c.loss_weights = crate::model::losses::LossWeights {
            alpha: 0.0,
            beta: 0.0,
        };
    }
    serde_json::to_string(&c).expect("config serializes")
}

fn validate_arms(arms: &[StrategyArmSpec], seeds: &[u64]) -> Result<Phase> {
    if arms.is_empty() {
        return Err(Error::Config("comparison needs at least one arm".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("comparison needs at least one seed".into()));
    }
    let mut names: Vec<&str> = arms.iter().map(|a| a.name.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    if names.len() != arms.len() {
        return Err(Error::Config("arm names must be unique".into()));
    }
    let phase = arms[0].finetune.phase;
    if phase == Phase::Pretrain {
        return Err(Error::Config(
            "comparison arms finetune on a downstream task; use phase finetune_cls or finetune_seg".into(),
        ));
    }
    let ft_key = budget_key(&arms[0].finetune, false);
    for a in &arms[1..] {
        if budget_key(&a.finetune, false) != ft_key {
            return Err(Error::Config(format!(
                "arm '{}' changes the downstream budget; arms may differ only in pretraining",
                a.name
            )));
        }
    }
    let mut pre_key: Option<String> = None;
    for a in arms {
        if let Some(p) = &a.pretrain {
            if p.phase != Phase::Pretrain {
                return Err(Error::Config(format!(
                    "arm '{}' pretraining config must use the pretrain phase",
                    a.name
                )));
            }
            p.validate()?;
            let key = budget_key(p, true);
            match &pre_key {
                None => pre_key = Some(key),
                Some(k) if *k != key => {
                    return Err(Error::Config(format!(
                        "arm '{}' changes the pretraining budget; pretraining arms may differ only in loss weights",
                        a.name
                    )));
                }
                _ => {}
            }
        }
    }
    Ok(phase)
}

/// Runs every arm with every seed and collects the final test metric.
///
/// Pretraining checkpoints land in `work_dir` and are reused nowhere else;
/// the directory must exist.
pub fn compare_strategies<F: Scalar>(
    arms: &[StrategyArmSpec],
    seeds: &[u64],
    data: &DataSplits,
    bank: Option<&PermutationBank>,
    work_dir: &Path,
) -> Result<ComparisonTable> {
    let phase = validate_arms(arms, seeds)?;
    if arms.iter().any(|a| a.pretrain.is_some()) && bank.is_none() {
        return Err(Error::Config(
            "comparison includes pretraining arms but no permutation bank was given".into(),
        ));
    }
    let metric_name = match phase {
        Phase::FinetuneCls => "cls_acc",
        Phase::FinetuneSeg => "miou",
        Phase::Pretrain => unreachable!(),
    };
    let mut cells = Vec::new();
    for arm in arms {
        for &seed in seeds {
            let mut ft = arm.finetune.clone();
            ft.seed = seed;
            if let Some(pre) = &arm.pretrain {
                let mut pcfg = pre.clone();
                pcfg.seed = seed;
                let out = pretrain::<F>(&pcfg, data, bank.unwrap())?;
                let ckpt = work_dir.join(format!("{}_seed{}.rc01", arm.name, seed));
                save_checkpoint(&ckpt, &out.model.store, &out.meta)?;
                ft.init = InitStrategy::Checkpoint(ckpt);
            }
            let value = match phase {
                Phase::FinetuneCls => {
                    let out = finetune_cls::<F>(&ft, data)?;
                    let last = out.report.last().expect("finetune always records");
                    last.cls_acc.expect("cls run records cls_acc")
                }
                Phase::FinetuneSeg => {
                    let out = finetune_seg::<F>(&ft, data)?;
                    let last = out.report.last().expect("finetune always records");
                    last.miou.expect("seg run records miou")
                }
                Phase::Pretrain => unreachable!(),
            };
            cells.push(ComparisonCell {
                arm: arm.name.clone(),
                seed,
                metric: metric_name.into(),
                value,
            });
        }
    }
    let summary = arms
        .iter()
        .map(|a| {
            let vals: Vec<f64> = cells
                .iter()
                .filter(|c| c.arm == a.name)
                .map(|c| c.value)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let std = if vals.len() < 2 {
                0.0
            } else {
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                    / (vals.len() - 1) as f64;
                var.sqrt()
            };
            ArmSummary {
                arm: a.name.clone(),
                mean,
                std,
            }
        })
        .collect();
    Ok(ComparisonTable {
        metric: metric_name.into(),
        cells,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cls_cfg() -> TrainConfig {
        TrainConfig {
            phase: Phase::FinetuneCls,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn mismatched_downstream_budgets_rejected() {
        let a = StrategyArmSpec {
            name: "scratch".into(),
            pretrain: None,
            finetune: cls_cfg(),
        };
        let mut other = cls_cfg();
        other.learning_rate *= 2.0;
        let b = StrategyArmSpec {
            name: "hot".into(),
            pretrain: None,
            finetune: other,
        };
        let err = validate_arms(&[a, b], &[1]).unwrap_err();
        assert!(err.to_string().contains("downstream budget"), "{err}");
    }

    #[test]
    fn loss_weight_ablations_share_a_budget() {
        let mut pre = TrainConfig::default();
        pre.epochs = 3;
        let mut ordering_only = pre.clone();
        ordering_only.loss_weights.beta = 0.0;
        let arms = vec![
            StrategyArmSpec {
                name: "full".into(),
                pretrain: Some(pre.clone()),
                finetune: cls_cfg(),
            },
            StrategyArmSpec {
                name: "ordering".into(),
                pretrain: Some(ordering_only),
                finetune: cls_cfg(),
            },
            StrategyArmSpec {
                name: "scratch".into(),
                pretrain: None,
                finetune: cls_cfg(),
            },
        ];
        assert_eq!(validate_arms(&arms, &[1, 2]).unwrap(), Phase::FinetuneCls);

        let mut longer = pre;
        longer.epochs = 4;
        let arms2 = vec![
            StrategyArmSpec {
                name: "full".into(),
                pretrain: Some(longer),
                finetune: cls_cfg(),
            },
            arms[1].clone(),
        ];
        let err = validate_arms(&arms2, &[1]).unwrap_err();
        assert!(err.to_string().contains("pretraining budget"), "{err}");
    }

    #[test]
    fn duplicate_names_rejected() {
        let a = StrategyArmSpec {
            name: "x".into(),
            pretrain: None,
            finetune: cls_cfg(),
        };
        assert!(validate_arms(&[a.clone(), a], &[1]).is_err());
    }

    #[test]
    fn csv_layout() {
        let table = ComparisonTable {
            metric: "cls_acc".into(),
            cells: vec![ComparisonCell {
                arm: "scratch".into(),
                seed: 7,
                metric: "cls_acc".into(),
                value: 0.5,
            }],
            summary: vec![ArmSummary {
                arm: "scratch".into(),
                mean: 0.5,
                std: 0.0,
            }],
        };
        let csv = table.to_csv_string();
        assert!(csv.starts_with("arm,seed,metric,value\n"));
        assert!(csv.contains("scratch,7,cls_acc,0.5\n"));
        assert!(csv.contains("scratch,mean,cls_acc,0.5\n"));
        assert!(csv.contains("scratch,std,cls_acc,0\n"));
    }
}
