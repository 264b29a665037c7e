//! Flat TOML experiment configuration.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use lysep::solver::{SolverConfig, StepRule};
use lysep::{manufactured_problem, GradientConvention, LrSchedule};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Environment variable that replaces `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "LYSEP_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelChoice {
    Pinn,
    Lysep,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Model {
    Pinn,
    Lysep,
}

impl Model {
    pub fn as_str(self) -> &'static str {
        match self {
            Model::Pinn => "pinn",
            Model::Lysep => "lysep",
        }
    }

    pub fn parse(s: &str) -> Option<Model> {
        match s {
            "pinn" => Some(Model::Pinn),
            "lysep" => Some(Model::Lysep),
            _ => None,
        }
    }
}

impl ModelChoice {
    pub fn models(self) -> Vec<Model> {
        match self {
            ModelChoice::Pinn => vec![Model::Pinn],
            ModelChoice::Lysep => vec![Model::Lysep],
            ModelChoice::Both => vec![Model::Pinn, Model::Lysep],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConventionChoice {
    #[default]
    Full,
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepRuleChoice {
    #[default]
    Backtracking,
    Fixed,
}

fn default_ridge_floor() -> f64 {
    SolverConfig::default().ridge_floor
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: String,
    pub model: ModelChoice,
    pub width: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub iters: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub seeds: Vec<u64>,
    pub log_every: usize,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub gradient_convention: ConventionChoice,
    #[serde(default)]
    pub step_rule: StepRuleChoice,
    /// PINN baseline step; defaults to `lr`.
    #[serde(default)]
    pub pinn_lr: Option<f64>,
    #[serde(default)]
    pub pinn_lr_decay: Option<f64>,
    #[serde(default = "default_ridge_floor")]
    pub ridge_floor: f64,
    /// Concurrent runs; defaults to the number of available cores.
    #[serde(default)]
    pub workers: Option<usize>,
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        Ok(cfg)
    }

    /// Reads, applies the output-directory override and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg = Self::from_toml(&text)?;
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            if !dir.is_empty() {
                cfg.output_dir = PathBuf::from(dir);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        manufactured_problem(&self.problem)?;
        if self.width == 0 {
            return Err(invalid("width must be at least 1"));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(invalid("n_train and n_test must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds must not be empty"));
        }
        let unique: HashSet<_> = self.seeds.iter().collect();
        if unique.len() != self.seeds.len() {
            return Err(invalid("seeds must be distinct"));
        }
        if self.workers == Some(0) {
            return Err(invalid("workers must be at least 1"));
        }
        self.solver_config().validate()?;
        let pinn = self.pinn_schedule();
        if !(pinn.lr0 > 0.0 && pinn.lr0.is_finite()) {
            return Err(invalid(format!("pinn_lr must be positive, got {}", pinn.lr0)));
        }
        if !(pinn.decay > 0.0 && pinn.decay <= 1.0) {
            return Err(invalid(format!("pinn_lr_decay must lie in (0, 1], got {}", pinn.decay)));
        }
        Ok(())
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            iters: self.iters,
            lr: self.lr,
            lr_decay: self.lr_decay,
            ridge_floor: self.ridge_floor,
            log_every: self.log_every,
            convention: match self.gradient_convention {
                ConventionChoice::Full => GradientConvention::Full,
                ConventionChoice::Frozen => GradientConvention::Frozen,
            },
            step_rule: match self.step_rule {
                StepRuleChoice::Backtracking => StepRule::Backtracking,
                StepRuleChoice::Fixed => StepRule::Fixed,
            },
        }
    }

    pub fn pinn_schedule(&self) -> LrSchedule {
        LrSchedule {
            lr0: self.pinn_lr.unwrap_or(self.lr),
            decay: self.pinn_lr_decay.unwrap_or(self.lr_decay),
        }
    }
}
