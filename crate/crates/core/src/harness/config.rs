//! Run configuration: a TOML file with one section per pipeline stage.
//! Unknown keys are rejected everywhere so that typos fail loudly.

use crate::corruption::CorruptionSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::ConfidenceParams;
use crate::objectives::{ConsistencyHparams, SigmaSpec};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Pipeline stage selected on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Pretrain,
    Finetune,
    Probe,
    Certify,
    Report,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Mode::Pretrain => "pretrain",
            Mode::Finetune => "finetune",
            Mode::Probe => "probe",
            Mode::Certify => "certify",
            Mode::Report => "report",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    #[serde(default)]
    pub train: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adamw,
}

fn default_kind() -> OptimizerKind {
    OptimizerKind::Adamw
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.95
}
fn default_weight_decay() -> f64 {
    0.05
}
fn default_layerwise_decay() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_kind")]
    pub kind: OptimizerKind,
    pub base_lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub warmup_epochs: usize,
    /// Layer-wise learning-rate decay factor; 1 disables the decay.
    #[serde(default = "default_layerwise_decay")]
    pub layerwise_decay: f64,
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0) {
            return Err(Error::config("base_lr must be nonnegative"));
        }
        if !(0.0 < self.beta1 && self.beta1 < 1.0 && 0.0 < self.beta2 && self.beta2 < 1.0) {
            return Err(Error::config("betas must lie in (0,1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.layerwise_decay > 0.0 && self.layerwise_decay <= 1.0) {
            return Err(Error::config("layerwise_decay must lie in (0,1]"));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::config("warmup_epochs exceeds epochs"));
        }
        Ok(())
    }
}

fn default_m() -> usize {
    2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectiveConfig {
    /// Cross-entropy on a single noisy copy per step.
    Rs { sigma: SigmaSpec },
    /// Three-term consistency-regularization objective.
    Consistency {
        lambda: f64,
        mu: f64,
        #[serde(default = "default_m")]
        m: usize,
        sigma: SigmaSpec,
    },
}

impl ObjectiveConfig {
    /// Both objectives share one implementation: plain robust training is
    /// the consistency objective with lambda = mu = 0 and m = 1.
    pub fn hparams(&self) -> ConsistencyHparams {
        match *self {
            ObjectiveConfig::Rs { sigma } => ConsistencyHparams {
                lambda: 0.0,
                mu: 0.0,
                m: 1,
                sigma,
            },
            ObjectiveConfig::Consistency { lambda, mu, m, sigma } => {
                ConsistencyHparams { lambda, mu, m, sigma }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hparams().validate().map_err(|e| Error::config(e.to_string()))
    }
}

fn default_n() -> u64 {
    10_000
}
fn default_n0() -> u64 {
    100
}
fn default_alpha() -> f64 {
    0.001
}
fn default_batch() -> usize {
    64
}
fn default_stride() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifyConfig {
    pub sigma: f64,
    #[serde(default = "default_n")]
    pub n: u64,
    #[serde(default = "default_n0")]
    pub n0: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    /// Keep every stride-th example of the evaluation set.
    #[serde(default = "default_stride")]
    pub stride: usize,
    /// Cap on the number of selected examples.
    #[serde(default)]
    pub max_examples: Option<usize>,
    /// Worker threads for per-example parallel certification.
    #[serde(default)]
    pub workers: Option<usize>,
}

impl CertifyConfig {
    pub fn confidence(&self) -> ConfidenceParams {
        ConfidenceParams { alpha: self.alpha, n0: self.n0, n: self.n }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::config("certify.sigma must be > 0"));
        }
        if self.stride == 0 {
            return Err(Error::config("certify.stride must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::config("certify.batch must be positive"));
        }
        self.confidence().validate().map_err(|e| Error::config(e.to_string()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportInput {
    pub sigma: f64,
    pub tsv: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    pub radii: Vec<f64>,
    pub inputs: Vec<ReportInput>,
    #[serde(default)]
    pub csv_out: Option<PathBuf>,
}

impl ReportConfig {
    pub fn validate(&self) -> Result<()> {
        if self.radii.is_empty() {
            return Err(Error::config("report.radii must be nonempty"));
        }
        if self.inputs.is_empty() {
            return Err(Error::config("report.inputs must be nonempty"));
        }
        Ok(())
    }
}

/// Complete run description; the CLI overrides `seed`, `init_from`, and
/// `out_dir`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Checkpoint to initialize from (pre-training: continued
    /// pre-training; fine-tuning/probing: the pre-trained encoder;
    /// certification: the model under test).
    #[serde(default)]
    pub init_from: Option<PathBuf>,
    /// Allow fine-tuning without a pre-trained checkpoint.
    #[serde(default)]
    pub from_scratch: bool,
    /// When pre-training with init_from, continue from the checkpoint's
    /// epoch and optimizer state instead of starting a fresh schedule.
    #[serde(default)]
    pub resume: bool,
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataPaths,
    #[serde(default)]
    pub corruption: Option<CorruptionSpec>,
    #[serde(default)]
    pub objective: Option<ObjectiveConfig>,
    #[serde(default)]
    pub optimizer: Option<OptimizerConfig>,
    #[serde(default)]
    pub certify: Option<CertifyConfig>,
    #[serde(default)]
    pub report: Option<ReportConfig>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        cfg.model.validate().map_err(|e| Error::config(e.to_string()))?;
        Ok(cfg)
    }

    fn require<'a, T>(&'a self, field: Option<&'a T>, name: &str, mode: Mode) -> Result<&'a T> {
        field.ok_or_else(|| Error::config(format!("mode {mode} requires the [{name}] section")))
    }

    /// Check that every section the mode needs is present and valid.
    pub fn validate_for(&self, mode: Mode) -> Result<()> {
        match mode {
            Mode::Pretrain => {
                let corr = self.require(self.corruption.as_ref(), "corruption", mode)?;
                corr.validate().map_err(|e| Error::config(e.to_string()))?;
                if corr.patch_size != self.model.patch_size {
                    return Err(Error::config(format!(
                        "corruption.patch_size {} differs from model.patch_size {}",
                        corr.patch_size, self.model.patch_size
                    )));
                }
                self.require(self.optimizer.as_ref(), "optimizer", mode)?.validate()?;
                self.require(self.data.train.as_ref(), "data.train", mode)?;
            }
            Mode::Finetune | Mode::Probe => {
                self.require(self.objective.as_ref(), "objective", mode)?.validate()?;
                self.require(self.optimizer.as_ref(), "optimizer", mode)?.validate()?;
                self.require(self.data.train.as_ref(), "data.train", mode)?;
                if mode == Mode::Probe && self.init_from.is_none() {
                    return Err(Error::config("probe mode requires init_from"));
                }
                if mode == Mode::Finetune && self.init_from.is_none() && !self.from_scratch {
                    return Err(Error::config(
                        "finetune requires init_from (or from_scratch = true)",
                    ));
                }
            }
            Mode::Certify => {
                self.require(self.certify.as_ref(), "certify", mode)?.validate()?;
                self.require(self.data.test.as_ref(), "data.test", mode)?;
                if self.init_from.is_none() {
                    return Err(Error::config("certify mode requires init_from"));
                }
            }
            Mode::Report => {
                self.require(self.report.as_ref(), "report", mode)?.validate()?;
            }
        }
        Ok(())
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }
}
