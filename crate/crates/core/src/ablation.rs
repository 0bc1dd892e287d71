//! Sweeps over the four ablation axes: adapter rank, text adapter depth,
//! prompt downsample rate and the dense prompt.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::lora::TextLoraDepth;
use crate::metrics::{ablation_table, EvalReport};
use crate::train::{train_on, Dataset, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Rank,
    TextDepth,
    Downsample,
    Dense,
}

pub const AXIS_NAMES: [&str; 4] = ["rank", "text_depth", "downsample", "dense"];

impl AblationAxis {
    pub const ALL: [AblationAxis; 4] = [
        AblationAxis::Rank,
        AblationAxis::TextDepth,
        AblationAxis::Downsample,
        AblationAxis::Dense,
    ];

    /// Row-group id in the ablation table.
    pub fn id(self) -> usize {
        match self {
            AblationAxis::Rank => 1,
            AblationAxis::TextDepth => 2,
            AblationAxis::Downsample => 3,
            AblationAxis::Dense => 4,
        }
    }

    pub fn name(self) -> &'static str {
        AXIS_NAMES[self.id() - 1]
    }

    pub fn labels(self) -> Vec<&'static str> {
        match self {
            AblationAxis::Rank => vec!["8", "16", "32"],
            AblationAxis::TextDepth => vec!["zero", "half", "full"],
            AblationAxis::Downsample => vec!["2", "4", "8"],
            AblationAxis::Dense => vec!["w/o", "w/"],
        }
    }

    /// `base` with this axis set to `label`.
    pub fn apply(self, base: &TrainConfig, label: &str) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        let bad = || Error::config(format!("{label:?} is not a setting of axis {}", self.name()));
        match self {
            AblationAxis::Rank => cfg.policy.rank = label.parse().map_err(|_| bad())?,
            AblationAxis::TextDepth => cfg.policy.text_lora_depth = label.parse::<TextLoraDepth>()?,
            AblationAxis::Downsample => cfg.model.downsample = label.parse().map_err(|_| bad())?,
            AblationAxis::Dense => {
                cfg.model.dense_prompt = match label {
                    "w/o" => false,
                    "w/" => true,
                    _ => return Err(bad()),
                }
            }
        }
        Ok(cfg)
    }

    /// Every setting of the axis, validated before anything trains.
    pub fn configs(self, base: &TrainConfig) -> Result<Vec<(String, TrainConfig)>> {
        self.labels()
            .into_iter()
            .map(|label| {
                let cfg = self.apply(base, label)?;
                validate_for_ablation(&cfg)?;
                Ok((label.to_string(), cfg))
            })
            .collect()
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationAxis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown ablation axis {s:?}; valid axes: {}, all",
                    AXIS_NAMES.join(", ")
                ))
            })
    }
}

/// Rejects settings outside the swept ranges, then checks the model builds
/// (adapter rank below every adapted width).
pub fn validate_for_ablation(cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if ![2, 4, 8].contains(&cfg.model.downsample) {
        return Err(Error::config(format!(
            "ablation downsample must be 2, 4 or 8, got {}",
            cfg.model.downsample
        )));
    }
    let min_width = cfg.model.d1.min(cfg.model.d2);
    if cfg.policy.rank >= min_width {
        return Err(Error::config(format!(
            "lora rank {} must be below the encoder width {min_width}",
            cfg.policy.rank
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct AxisResult {
    pub axis: AblationAxis,
    pub rows: Vec<(String, EvalReport)>,
}

impl AxisResult {
    pub fn table(&self) -> String {
        ablation_table(self.axis.id(), &self.rows)
    }
}

/// Trains and evaluates each setting of `axis` in order.
pub fn run_axis(base: &TrainConfig, axis: AblationAxis, data: &Dataset, out_dir: &Path) -> Result<AxisResult> {
    let configs = axis.configs(base)?;
    let mut rows = Vec::with_capacity(configs.len());
    for (label, cfg) in configs {
        let dir = out_dir.join(format!("{}_{}", axis.name(), label.replace('/', "")));
        log::info!("ablation {axis}={label}");
        let outcome = train_on(&cfg, data, &dir, false)?;
        rows.push((label, outcome.final_report));
    }
    Ok(AxisResult { axis, rows })
}

pub fn run_ablation(
    base: &TrainConfig,
    axes: &[AblationAxis],
    data: &Dataset,
    out_dir: &Path,
) -> Result<Vec<AxisResult>> {
    // validate every axis up front so a bad setting fails before any training
    for &axis in axes {
        axis.configs(base)?;
    }
    axes.iter().map(|&a| run_axis(base, a, data, out_dir)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_parsing_lists_valid_names() {
        assert_eq!("text_depth".parse::<AblationAxis>().unwrap(), AblationAxis::TextDepth);
        let err = "width".parse::<AblationAxis>().unwrap_err().to_string();
        for name in AXIS_NAMES {
            assert!(err.contains(name), "{err}");
        }
    }

    #[test]
    fn settings_change_one_field() {
        let base = TrainConfig::default();
        let c = AblationAxis::Dense.apply(&base, "w/o").unwrap();
        assert!(!c.model.dense_prompt);
        assert_eq!(c.policy, base.policy);
        let c = AblationAxis::Rank.apply(&base, "32").unwrap();
        assert_eq!(c.policy.rank, 32);
        assert!(AblationAxis::Rank.apply(&base, "w/").is_err());
    }

    #[test]
    fn default_base_is_the_best_row_configuration() {
        let base = TrainConfig::default();
        assert_eq!(base.policy.rank, 16);
        assert_eq!(base.policy.text_lora_depth, TextLoraDepth::Full);
        assert_eq!(base.model.downsample, 4);
        assert!(base.model.dense_prompt);
        for axis in AblationAxis::ALL {
            assert_eq!(axis.configs(&base).unwrap().len(), axis.labels().len());
        }
    }

    #[test]
    fn out_of_range_downsample_rejected() {
        let mut base = TrainConfig::default();
        base.model.downsample = 16;
        assert!(AblationAxis::Rank.configs(&base).is_err());
    }
}
