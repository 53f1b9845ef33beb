//! Run configuration, read from JSON with the field names below.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DataConfig;
use crate::distill::KdConfig;
use crate::error::{PqkError, Result};
use crate::model::{ArchConfig, QuantConfig};
use crate::optim::SgdConfig;
use crate::prune::PruneSchedule;

/// How the two Phase-2 updates of one iteration are ordered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateOrder {
    /// Student update first; the teacher loss is computed from the updated weights.
    #[default]
    Sequential,
    /// Both losses from the same pre-update weights.
    Simultaneous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub optimizer: SgdConfig,
    pub prune: PruneSchedule,
    #[serde(default)]
    pub quant: QuantConfig,
    #[serde(default)]
    pub kd: KdConfig,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    pub arch: ArchConfig,
    #[serde(default)]
    pub update_order: UpdateOrder,
}

fn default_batch_size() -> usize {
    64
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            serde_json::from_str(text).map_err(|e| PqkError::config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PqkError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            PqkError::Config(m) => PqkError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.phase1_epochs == 0 || self.phase2_epochs == 0 {
            return Err(PqkError::config(format!(
                "phase lengths must be >= 1, got {} and {}",
                self.phase1_epochs, self.phase2_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(PqkError::config("batch size must be >= 1"));
        }
        self.optimizer.validate()?;
        self.prune.validate()?;
        self.quant.validate()?;
        self.kd.validate()?;
        self.arch.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = r#"{
        "phase1_epochs": 2,
        "phase2_epochs": 1,
        "optimizer": {"lr": 0.05},
        "prune": {"target_ratio": 0.5, "ramp_epochs": 2},
        "data": {
            "train": {"source": "synthetic", "task": "two-spirals", "n": 64, "seed": 1},
            "dev": {"source": "synthetic", "task": "two-spirals", "n": 32, "seed": 2}
        },
        "arch": {"kind": "mlp", "width": 8, "blocks": 2, "input_shape": [2], "classes": 2}
    }"#;

    #[test]
    fn defaults_fill_in() {
        let c = TrainConfig::from_json(TOY).unwrap();
        assert_eq!(c.batch_size, 64);
        assert_eq!(c.prune.update_period, 32);
        assert_eq!(c.kd.temperature, 2.0);
        assert_eq!((c.kd.alpha, c.kd.beta), (0.5, 0.5));
        assert_eq!(c.quant.step_lr_scale, 1e-4);
        assert_eq!(c.optimizer.momentum, 0.9);
        assert_eq!(c.optimizer.weight_decay, 1e-5);
        assert_eq!(c.update_order, UpdateOrder::Sequential);
    }

    #[test]
    fn roundtrip_through_json() {
        let c = TrainConfig::from_json(TOY).unwrap();
        assert_eq!(TrainConfig::from_json(&c.to_json_pretty()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_configs() {
        let unknown = TOY.replacen("\"phase1_epochs\"", "\"colour\": 1, \"phase1_epochs\"", 1);
        assert!(matches!(TrainConfig::from_json(&unknown), Err(PqkError::Config(_))));
        let zero = TOY.replace("\"phase2_epochs\": 1", "\"phase2_epochs\": 0");
        assert!(matches!(TrainConfig::from_json(&zero), Err(PqkError::Config(_))));
        let lr = TOY.replace("\"lr\": 0.05", "\"lr\": -1");
        assert!(matches!(TrainConfig::from_json(&lr), Err(PqkError::Config(_))));
        assert!(matches!(TrainConfig::from_json("{"), Err(PqkError::Config(_))));
    }
}
