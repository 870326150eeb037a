//! Experiment configuration: a TOML document with `data`, `model`,
//! `losses`, `schedules` and `run` sections. Every field has a default, so
//! an empty document is a complete desk-scale experiment.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SynthSpec;
use crate::discrepancy::{KernelFamily, DEFAULT_BANDWIDTHS};
use crate::distill::DistillationConfig;
use crate::error::{Error, Result};
use crate::models::TeacherConfig;

/// Training pipelines. Declaration order is the report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Joint teacher adaptation and progressive distillation.
    Kavi,
    /// Teacher adaptation, then distillation from the frozen teacher.
    SdaThenKd,
    /// Distillation on the source domain, then student adaptation.
    KdThenSda,
    /// Student adapted directly, no teacher.
    SdaOnly,
    /// Joint pipeline with a marginal squared-kernel discrepancy.
    MmsdBaseline,
    /// Joint pipeline with a class-weighted plain-kernel discrepancy.
    LmmdBaseline,
    /// Joint pipeline with hard labels.
    NoLabelSmoothing,
    /// Joint pipeline without any adaptation term.
    SourceOnly,
}

impl AblationMode {
    pub const ALL: [AblationMode; 8] = [
        AblationMode::Kavi,
        AblationMode::SdaThenKd,
        AblationMode::KdThenSda,
        AblationMode::SdaOnly,
        AblationMode::MmsdBaseline,
        AblationMode::LmmdBaseline,
        AblationMode::NoLabelSmoothing,
        AblationMode::SourceOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Kavi => "kavi",
            AblationMode::SdaThenKd => "sda_then_kd",
            AblationMode::KdThenSda => "kd_then_sda",
            AblationMode::SdaOnly => "sda_only",
            AblationMode::MmsdBaseline => "mmsd_baseline",
            AblationMode::LmmdBaseline => "lmmd_baseline",
            AblationMode::NoLabelSmoothing => "no_label_smoothing",
            AblationMode::SourceOnly => "source_only",
        }
    }

    /// Whether the pipeline trains a teacher.
    pub fn has_teacher(self) -> bool {
        self != AblationMode::SdaOnly
    }
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AblationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: SynthSpec,
    pub target: SynthSpec,
    pub split: [f64; 3],
    pub split_seed: u64,
    /// Directory with a manifest; when set, data is loaded instead of
    /// synthesized.
    pub archive: Option<PathBuf>,
    pub archive_overlap: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: SynthSpec::default(),
            target: SynthSpec::default_target(),
            split: [0.70, 0.15, 0.15],
            split_seed: 0,
            archive: None,
            archive_overlap: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub teacher: TeacherConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Label smoothing coefficient.
    pub epsilon: f64,
    pub bandwidths: Vec<f64>,
    pub tau: f64,
    pub lambda_cls: f64,
    pub kd_tau_squared: bool,
    pub kd_kl_reverse: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        let d = DistillationConfig::default();
        Self {
            epsilon: 0.1,
            bandwidths: DEFAULT_BANDWIDTHS.to_vec(),
            tau: d.tau,
            lambda_cls: d.lambda_cls,
            kd_tau_squared: d.kd_tau_squared,
            kd_kl_reverse: d.kd_kl_reverse,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub alpha1: f64,
    pub alpha2: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { alpha1: 0.1, alpha2: 0.9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: AblationMode,
    pub epochs: usize,
    /// Epochs of the first phase in two-phase modes; the second phase gets
    /// the rest of `epochs`. Defaults to half.
    pub phase_epochs: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub optimizer: String,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: AblationMode::Kavi,
            epochs: 40,
            phase_epochs: None,
            batch_size: 128,
            learning_rate: 0.001,
            momentum: 0.0,
            optimizer: "sgd".into(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub losses: LossConfig,
    pub schedules: ScheduleConfig,
    pub run: RunConfig,
}

impl ExperimentConfig {
    /// Parses a TOML document; missing fields take their defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The fully materialized document.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Full-size runs: 400 epochs and 1000 samples per class.
    pub fn paper_scale(mut self) -> Self {
        self.run.epochs = 400;
        self.data.source.samples_per_class = 1000;
        self.data.target.samples_per_class = 1000;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.run;
        if r.epochs == 0 || r.batch_size < 2 {
            return Err(Error::Config("epochs must be ≥ 1 and batch_size ≥ 2".into()));
        }
        if let Some(p) = r.phase_epochs {
            if p == 0 || p >= r.epochs {
                return Err(Error::Config(format!("phase_epochs {p} must lie in [1, epochs)")));
            }
        }
        if !(r.learning_rate > 0.0) || !(0.0..1.0).contains(&r.momentum) {
            return Err(Error::Config("learning_rate must be positive and momentum in [0, 1)".into()));
        }
        if r.optimizer != "sgd" {
            return Err(Error::Config(format!("unsupported optimizer {:?}", r.optimizer)));
        }
        if !(0.0..1.0).contains(&self.losses.epsilon) {
            return Err(Error::Config("epsilon must lie in [0, 1)".into()));
        }
        self.kernel_family()?;
        self.distillation().validate()?;
        let s = &self.data.split;
        if s.iter().any(|v| *v < 0.0) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("split ratios must be nonnegative and sum to 1".into()));
        }
        if self.data.archive.is_none() {
            self.data.source.validate()?;
            self.data.target.validate()?;
        }
        Ok(())
    }

    pub fn kernel_family(&self) -> Result<KernelFamily> {
        KernelFamily::uniform(&self.losses.bandwidths).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn distillation(&self) -> DistillationConfig {
        DistillationConfig {
            tau: self.losses.tau,
            lambda_cls: self.losses.lambda_cls,
            alpha1: self.schedules.alpha1,
            alpha2: self.schedules.alpha2,
            kd_tau_squared: self.losses.kd_tau_squared,
            kd_kl_reverse: self.losses.kd_kl_reverse,
        }
    }

    /// Label smoothing actually applied, after the mode's overrides.
    pub fn effective_epsilon(&self) -> f64 {
        match self.run.mode {
            AblationMode::NoLabelSmoothing | AblationMode::MmsdBaseline | AblationMode::LmmdBaseline => 0.0,
            _ => self.losses.epsilon,
        }
    }

    /// Epoch counts of the two phases in two-phase modes.
    pub fn phase_split(&self) -> (usize, usize) {
        let first = self.run.phase_epochs.unwrap_or((self.run.epochs / 2).max(1));
        (first, self.run.epochs.saturating_sub(first).max(1))
    }

    /// Hex SHA-256 of the resolved configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
