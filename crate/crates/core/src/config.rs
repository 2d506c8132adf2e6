//! Experiment configuration: one TOML file whose keys mirror
//! [`ExperimentConfig`], with command-line overrides applied on top.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbones::ArchSpec;
use crate::data::DatasetSpec;
use crate::error::{Result, UniKdError};
use crate::kd_losses::LossWeights;

/// Which losses a run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// `ce + α·KL(feature Gaussians) + β·KL(logits)`.
    Unikd,
    /// `ce + β·KL(logits)`.
    KdOnly,
    /// `ce + α·feature MSE`.
    MseOnly,
    /// `ce + α·feature MSE + β·KL(logits)`.
    HybridKdMse,
    /// `ce` alone; distillation terms are still reported when a teacher is loaded.
    CeOnly,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Unikd, Mode::KdOnly, Mode::MseOnly, Mode::HybridKdMse, Mode::CeOnly];

    pub fn needs_teacher(self) -> bool {
        self != Mode::CeOnly
    }

    pub fn uses_feature_mse(self) -> bool {
        matches!(self, Mode::MseOnly | Mode::HybridKdMse)
    }

    /// The weights actually applied, with terms outside the mode zeroed.
    pub fn effective_weights(self, w: LossWeights) -> LossWeights {
        match self {
            Mode::Unikd | Mode::HybridKdMse => w,
            Mode::KdOnly => LossWeights { alpha: 0.0, beta: w.beta },
            Mode::MseOnly => LossWeights { alpha: w.alpha, beta: 0.0 },
            Mode::CeOnly => LossWeights { alpha: 0.0, beta: 0.0 },
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Unikd => "unikd",
            Mode::KdOnly => "kd_only",
            Mode::MseOnly => "mse_only",
            Mode::HybridKdMse => "hybrid_kd_mse",
            Mode::CeOnly => "ce_only",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = UniKdError;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| UniKdError::Config(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerFamily {
    SgdMomentum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub architecture: String,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentConfig {
    pub architecture: String,
}

/// SGD with momentum; the learning rate drops ×0.1 at 50% and 75% of the
/// epochs. No τ² factor is applied to the KD gradient, so raising τ shrinks
/// the logits-KD step size roughly as 1/τ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_family")]
    pub family: OptimizerFamily,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            family: default_family(),
            lr: default_lr(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
        }
    }
}

fn default_family() -> OptimizerFamily {
    OptimizerFamily::SgdMomentum
}
fn default_lr() -> f64 {
    0.05
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    5e-4
}
fn default_weight() -> f64 {
    0.1
}
fn default_tau() -> f64 {
    4.0
}
fn default_batch_size() -> usize {
    64
}
fn default_device() -> String {
    "cpu".to_string()
}
fn default_mode() -> Mode {
    Mode::Unikd
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    #[serde(default = "default_weight")]
    pub alpha: f64,
    #[serde(default = "default_weight")]
    pub beta: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Only `cpu` is supported.
    #[serde(default = "default_device")]
    pub device: String,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default)]
    pub detach_teacher_distribution: bool,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub tau: Option<f64>,
    pub out_dir: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub epochs: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| UniKdError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UniKdError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| UniKdError::Config(e.to_string()))
    }

    /// `--dataset` points at a CIFAR binary training file; the validation
    /// file is looked up next to it as `test.bin`.
    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.mode {
            self.mode = v;
        }
        if let Some(v) = o.alpha {
            self.alpha = v;
        }
        if let Some(v) = o.beta {
            self.beta = v;
        }
        if let Some(v) = o.tau {
            self.tau = v;
        }
        if let Some(v) = &o.out_dir {
            self.out_dir = Some(v.clone());
        }
        if let Some(v) = o.epochs {
            self.epochs = v;
        }
        if let Some(p) = &o.dataset {
            self.dataset.kind = crate::data::DatasetKind::CifarBinary;
            self.dataset.train_path = Some(p.clone());
            if self.dataset.val_path.is_none() {
                self.dataset.val_path = Some(p.with_file_name("test.bin"));
            }
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(UniKdError::Config(m));
        if LossWeights::new(self.alpha, self.beta).is_err() {
            return bad(format!("alpha and beta must be finite and >= 0 (got {}, {})", self.alpha, self.beta));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return bad(format!("optimizer.lr must be positive, got {}", self.optimizer.lr));
        }
        if !(0.0..1.0).contains(&self.optimizer.momentum) || !(self.optimizer.weight_decay >= 0.0) {
            return bad("optimizer.momentum must be in [0, 1) and weight_decay >= 0".into());
        }
        if self.device != "cpu" {
            return bad(format!("device `{}` is not supported (only cpu)", self.device));
        }
        self.dataset.validate()?;
        self.student_arch()?;
        self.teacher_arch()?;
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { alpha: self.alpha, beta: self.beta }
    }

    pub fn student_arch(&self) -> Result<ArchSpec> {
        ArchSpec::parse(&self.student.architecture, self.dataset.class_count, self.dataset.input_size)
            .map_err(as_config)
    }

    pub fn teacher_arch(&self) -> Result<ArchSpec> {
        ArchSpec::parse(&self.teacher.architecture, self.dataset.class_count, self.dataset.input_size)
            .map_err(as_config)
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        let text = self.to_toml_string().unwrap_or_default();
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs").join(self.mode.as_str()))
    }
}

fn as_config(e: UniKdError) -> UniKdError {
    match e {
        UniKdError::Contract(m) => UniKdError::Config(m),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
epochs = 2

[dataset]
kind = "synthetic"
class_count = 4
input_size = 8
train_size = 40
val_size = 8
seed = 1

[teacher]
architecture = "toy_resnet_w8"

[student]
architecture = "toy_resnet_w4"
"#;

    #[test]
    fn defaults_fill_in() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.tau, 4.0);
        assert_eq!((cfg.alpha, cfg.beta), (0.1, 0.1));
        assert_eq!(cfg.optimizer.lr, 0.05);
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.mode, Mode::Unikd);
        assert!(!cfg.detach_teacher_distribution);
    }

    #[test]
    fn overrides_win() {
        let mut cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        cfg.apply(&Overrides { seed: Some(9), mode: Some(Mode::CeOnly), tau: Some(2.0), ..Default::default() })
            .unwrap();
        assert_eq!((cfg.seed, cfg.mode, cfg.tau), (9, Mode::CeOnly, 2.0));
        assert!(cfg.apply(&Overrides { alpha: Some(-1.0), ..Default::default() }).is_err());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(ExperimentConfig::from_toml_str(&format!("bogus = 1\n{MINIMAL}")).is_err());
        assert!(ExperimentConfig::from_toml_str(&MINIMAL.replace("epochs = 2", "epochs = 0")).is_err());
        assert!(ExperimentConfig::from_toml_str(&format!("tau = 0.0\n{MINIMAL}")).is_err());
        assert!(ExperimentConfig::from_toml_str(&format!("mode = \"dkd\"\n{MINIMAL}")).is_err());
    }

    #[test]
    fn toml_roundtrip_and_hash() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.hash(), again.hash());
    }

    #[test]
    fn mode_weights() {
        let w = LossWeights { alpha: 0.3, beta: 0.7 };
        assert_eq!(Mode::CeOnly.effective_weights(w), LossWeights { alpha: 0.0, beta: 0.0 });
        assert_eq!(Mode::KdOnly.effective_weights(w).alpha, 0.0);
        assert_eq!(Mode::Unikd.effective_weights(w), w);
        assert_eq!("hybrid_kd_mse".parse::<Mode>().unwrap(), Mode::HybridKdMse);
    }
}
