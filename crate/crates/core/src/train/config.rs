//! Experiment configuration, read from TOML:
//!
//! ```toml
//! [experiment]
//! scenario = "4p4"          # task class counts
//! strategy = "latent_distill"
//! freeze = "stage3"         # boundary frozen by latent strategies from task 1
//! seed = 0                  # model init, batch order, buffer sampling
//! output = "runs/ld"        # optional artifact directory
//!
//! [data]
//! images = 1000
//! classes = 8
//! seed = 0
//! eval_images = 300
//!
//! [train]                   # every field optional
//! lr = 0.003
//! weight_decay = 0.05
//! warmup_steps = 50
//! epochs = 30
//! t_max = 30
//! batch_size = 16
//!
//! [strategy]
//! alpha = 1.0
//! buffer_capacity = 50
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::Hyperparams;
use crate::data::ScenarioSpec;
use crate::detector::{Boundary, DetectorSpec};
use crate::error::{Error, Result};
use crate::strategy::{StrategyConfig, StrategyKind, DEFAULT_ALPHA, DEFAULT_BUFFER_CAPACITY};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub scenario: ScenarioSpec,
    pub strategy: StrategyKind,
    #[serde(default = "default_freeze")]
    pub freeze: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

fn default_freeze() -> String {
    "stage3".into()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub images: usize,
    pub classes: usize,
    pub seed: u64,
    pub eval_images: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { images: 1000, classes: 8, seed: 0, eval_images: 300 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategySection {
    pub alpha: f64,
    pub buffer_capacity: usize,
}

impl Default for StrategySection {
    fn default() -> Self {
        StrategySection { alpha: DEFAULT_ALPHA, buffer_capacity: DEFAULT_BUFFER_CAPACITY }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub train: Hyperparams,
    #[serde(default)]
    pub strategy: StrategySection,
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of the first `key = ...` assignment, or 0 when absent.
fn line_of_key(text: &str, key: &str) -> usize {
    text.lines()
        .position(|l| l.trim_start().strip_prefix(key).is_some_and(|r| r.trim_start().starts_with('=')))
        .map_or(0, |i| i + 1)
}

impl ExperimentConfig {
    pub fn new(scenario: &str, strategy: StrategyKind) -> Result<Self> {
        Ok(ExperimentConfig {
            experiment: ExperimentSection {
                scenario: scenario.parse()?,
                strategy,
                freeze: default_freeze(),
                seed: 0,
                output: None,
            },
            data: DataSection::default(),
            train: Hyperparams::default(),
            strategy: StrategySection::default(),
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config {
            line: e.span().map_or(0, |s| line_of_offset(text, s.start)),
            message: e.message().to_string(),
        })?;
        cfg.validate().map_err(|e| match e {
            Error::Config { message, .. } => {
                let key = message.split('\'').nth(1).unwrap_or_default().to_string();
                Error::Config { line: line_of_key(text, &key), message }
            }
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Semantic checks. Errors name the offending key in quotes so that
    /// [`parse`](Self::parse) can attach its line.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Error::Config { line: 0, message: format!("'{key}': {msg}") };
        let d = &self.data;
        if d.classes == 0 || d.classes > crate::data::Shape::ALL.len() {
            return Err(bad("classes", format!("must be in 1..={}, got {}", crate::data::Shape::ALL.len(), d.classes)));
        }
        if self.experiment.scenario.total_classes() > d.classes {
            return Err(bad(
                "scenario",
                format!("needs {} classes but data has {}", self.experiment.scenario.total_classes(), d.classes),
            ));
        }
        if d.images == 0 {
            return Err(bad("images", "must be at least 1".into()));
        }
        if d.eval_images == 0 {
            return Err(bad("eval_images", "must be at least 1".into()));
        }
        self.freeze_boundary().map_err(|e| bad("freeze", e.to_string()))?;
        self.train.validate().map_err(|e| bad("train", e.to_string()))?;
        if !(self.strategy.alpha.is_finite() && self.strategy.alpha >= 0.0) {
            return Err(bad("alpha", format!("must be finite and non-negative, got {}", self.strategy.alpha)));
        }
        if self.strategy.buffer_capacity == 0 {
            return Err(bad("buffer_capacity", "must be at least 1".into()));
        }
        Ok(())
    }

    /// Detector at task 0: head sized for the first task's classes.
    pub fn detector_spec(&self) -> DetectorSpec {
        DetectorSpec::toy(self.experiment.scenario.counts[0])
    }

    pub fn freeze_boundary(&self) -> Result<Boundary> {
        self.detector_spec().boundary(&self.experiment.freeze)
    }

    pub fn strategy_config(&self) -> Result<StrategyConfig> {
        Ok(StrategyConfig {
            kind: self.experiment.strategy,
            alpha: self.strategy.alpha,
            buffer_capacity: self.strategy.buffer_capacity,
            freeze: self.freeze_boundary()?,
        })
    }
}
