//! Run configuration: JSON files plus command-line overrides.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blocks::{NetworkConfig, Placement};
use crate::error::{Error, Result};
use crate::synthdata::SynthConfig;

/// Which motion modules a run enables on top of the temporal-interaction
/// baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "+CME")]
    Cme,
    #[serde(rename = "+SME")]
    Sme,
    #[serde(rename = "+CME&SME")]
    CmeSme,
    /// Keep the placements given in the network config.
    #[serde(rename = "custom")]
    Custom,
}

impl Variant {
    pub const ABLATION: [Variant; 4] = [Variant::Baseline, Variant::Cme, Variant::Sme, Variant::CmeSme];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Cme => "+CME",
            Variant::Sme => "+SME",
            Variant::CmeSme => "+CME&SME",
            Variant::Custom => "custom",
        }
    }

    /// The network config with this variant's module placement.
    pub fn apply(self, cfg: &NetworkConfig) -> NetworkConfig {
        let (cme, sme) = match self {
            Variant::Baseline => (Placement::None, Placement::None),
            Variant::Cme => (Placement::All, Placement::None),
            Variant::Sme => (Placement::None, Placement::First),
            Variant::CmeSme => (Placement::All, Placement::First),
            Variant::Custom => return cfg.clone(),
        };
        NetworkConfig {
            cme,
            sme,
            tim: true,
            ..cfg.clone()
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s.chars().filter(|c| !c.is_whitespace()).collect::<String>().to_lowercase();
        Ok(match norm.as_str() {
            "baseline" | "tim" => Variant::Baseline,
            "+cme" | "cme" => Variant::Cme,
            "+sme" | "sme" => Variant::Sme,
            "+cme&sme" | "cme&sme" | "cme+sme" | "+cme+sme" | "full" => Variant::CmeSme,
            "custom" => Variant::Custom,
            _ => {
                return Err(Error::Config(format!(
                    "unknown variant {s:?}; expected baseline, +CME, +SME, +CME&SME or custom"
                )))
            }
        })
    }
}

/// How batch norm behaves while training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BnSchedule {
    /// Batch statistics for every training step.
    #[default]
    Batch,
    /// Batch statistics until the given epoch, running statistics after.
    FreezeAfter(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Epochs at which the learning rate is multiplied by `lr_decay`. When
    /// absent, 60%, 80% and 90% of `epochs`.
    pub milestones: Option<Vec<usize>>,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub variant: Variant,
    pub bn: BnSchedule,
    /// Clips averaged per validation video.
    pub eval_clips: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 0.01,
            milestones: None,
            lr_decay: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 16,
            seed: 0,
            variant: Variant::CmeSme,
            bn: BnSchedule::Batch,
            eval_clips: 1,
        }
    }
}

impl TrainConfig {
    pub fn milestones(&self) -> Vec<usize> {
        match &self.milestones {
            Some(m) => m.clone(),
            None => {
                let mut m: Vec<usize> = [0.6, 0.8, 0.9]
                    .iter()
                    .map(|f| (f * self.epochs as f64).round() as usize)
                    .filter(|&e| e > 0 && e < self.epochs)
                    .collect();
                m.dedup();
                m
            }
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones().iter().filter(|&&m| epoch >= m).count();
        self.lr * self.lr_decay.powi(passed as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} is invalid", self.lr)));
        }
        if let Some(m) = &self.milestones {
            if m.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config(format!("milestones {m:?} are not strictly increasing")));
            }
        }
        if self.batch_size == 0 || self.eval_clips == 0 {
            return Err(Error::Config("batch size and eval clips must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        Ok(())
    }
}

/// Everything one training run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub network: NetworkConfig,
    pub data: SynthConfig,
}

impl RunConfig {
    /// Parses a JSON config. Errors carry the line and column of the problem.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            Error::Config(format!("config line {}, column {}: {e}", e.line(), e.column()))
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Network config with the variant's placements applied.
    pub fn network_config(&self) -> NetworkConfig {
        self.train.variant.apply(&self.network)
    }

    /// Keeps frame count and class count consistent between data and model.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.network_config().validate()?;
        self.data.validate()?;
        if self.network.classes != self.data.classes {
            return Err(Error::Config(format!(
                "network has {} classes but the data has {}",
                self.network.classes, self.data.classes
            )));
        }
        if self.network.in_channels != 1 {
            return Err(Error::Config("synthetic clips are single-channel".into()));
        }
        Ok(())
    }

    pub fn set_frames(&mut self, t: usize) {
        self.network.frames = t;
        self.data.frames = t;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_milestones_scale_the_schedule() {
        let mut c = TrainConfig {
            epochs: 50,
            ..TrainConfig::default()
        };
        assert_eq!(c.milestones(), vec![30, 40, 45]);
        assert!((c.lr_at(29) - 0.01).abs() < 1e-15);
        assert!((c.lr_at(30) - 0.001).abs() < 1e-15);
        assert!((c.lr_at(45) - 0.00001).abs() < 1e-17);
        c.epochs = 10;
        assert_eq!(c.milestones(), vec![6, 8, 9]);
    }

    #[test]
    fn variants_round_trip_through_text() {
        for v in Variant::ABLATION {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            let j = serde_json::to_string(&v).unwrap();
            assert_eq!(serde_json::from_str::<Variant>(&j).unwrap(), v);
        }
        assert!("+XYZ".parse::<Variant>().is_err());
    }

    #[test]
    fn malformed_json_reports_a_position() {
        let e = RunConfig::from_json("{\n  \"train\": {\"epochs\": 3,,}\n}").unwrap_err();
        let m = e.to_string();
        assert!(m.contains("line 2"), "{m}");
    }
}
