use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codebook::CodebookInit;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::networks::{StudentConfig, TeacherConfig, DOWNSCALE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
    Distill,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Distill => "distill",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantizer {
    Gumbel,
    /// Nearest-code selection during training (collapse ablation).
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodebookConfig {
    pub size: usize,
    pub init: CodebookInit,
    pub quantizer: Quantizer,
    pub tau_start: f64,
    pub tau_end: f64,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self {
            size: 256,
            init: CodebookInit::Uniform,
            quantizer: Quantizer::Gumbel,
            tau_start: 2.0,
            tau_end: 0.5,
        }
    }
}

impl CodebookConfig {
    /// Linear anneal from `tau_start` at the first epoch to `tau_end` at the last.
    pub fn temperature(&self, epoch: usize, epochs: usize) -> f64 {
        if epochs <= 1 {
            return self.tau_start;
        }
        let t = (epoch.min(epochs - 1)) as f64 / (epochs - 1) as f64;
        self.tau_start + (self.tau_end - self.tau_start) * t
    }
}

/// Which student batches carry the feature distillation term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillOn {
    Both,
    Labeled,
    Unlabeled,
}

impl DistillOn {
    pub fn labeled(self) -> bool {
        matches!(self, DistillOn::Both | DistillOn::Labeled)
    }

    pub fn unlabeled(self) -> bool {
        matches!(self, DistillOn::Both | DistillOn::Unlabeled)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub patch_size: usize,
    pub batch_size: usize,
    pub lr_decay: f64,
    /// Intensity percentile images are clipped at before normalization.
    pub clip_percentile: f64,
    pub infer_overlap: usize,
    pub pseudo_threshold: f64,
    pub distill_on: DistillOn,
    pub pretrain: StageConfig,
    pub finetune: StageConfig,
    pub distill: StageConfig,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub codebook: CodebookConfig,
    #[serde(default)]
    pub teacher: TeacherConfig,
    #[serde(default)]
    pub student: StudentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Settings sized for a laptop CPU and 32³ phantoms.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            manifest: None,
            output_dir: None,
            patch_size: 32,
            batch_size: 2,
            lr_decay: 0.97,
            clip_percentile: 95.0,
            infer_overlap: 8,
            pseudo_threshold: 0.5,
            distill_on: DistillOn::Both,
            pretrain: StageConfig {
                epochs: 20,
                learning_rate: 1e-3,
            },
            finetune: StageConfig {
                epochs: 30,
                learning_rate: 1e-2,
            },
            distill: StageConfig {
                epochs: 50,
                learning_rate: 1e-2,
            },
            weights: LossWeights::default(),
            codebook: CodebookConfig::default(),
            teacher: TeacherConfig::default(),
            student: StudentConfig::default(),
        }
    }

    /// Full-length schedule on 64³ patches.
    pub fn full() -> Self {
        Self {
            patch_size: 64,
            infer_overlap: 16,
            pretrain: StageConfig {
                epochs: 80,
                learning_rate: 1e-3,
            },
            finetune: StageConfig {
                epochs: 30,
                learning_rate: 1e-5,
            },
            distill: StageConfig {
                epochs: 300,
                learning_rate: 1e-2,
            },
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected desk or full)"
            ))),
        }
    }

    pub fn stage(&self, s: Stage) -> StageConfig {
        match s {
            Stage::Pretrain => self.pretrain,
            Stage::Finetune => self.finetune,
            Stage::Distill => self.distill,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.patch_size % DOWNSCALE != 0 {
            return bad(format!(
                "patch_size {} must be a positive multiple of {DOWNSCALE}",
                self.patch_size
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay {} outside (0, 1]", self.lr_decay));
        }
        if !(self.clip_percentile > 0.0 && self.clip_percentile <= 100.0) {
            return bad(format!(
                "clip_percentile {} outside (0, 100]",
                self.clip_percentile
            ));
        }
        if self.infer_overlap >= self.patch_size {
            return bad(format!(
                "infer_overlap {} must be below patch_size",
                self.infer_overlap
            ));
        }
        if !(self.pseudo_threshold > 0.0 && self.pseudo_threshold < 1.0) {
            return bad(format!(
                "pseudo_threshold {} outside (0, 1)",
                self.pseudo_threshold
            ));
        }
        for s in [Stage::Pretrain, Stage::Finetune, Stage::Distill] {
            let lr = self.stage(s).learning_rate;
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{} learning_rate {lr} must be positive", s.name()));
            }
        }
        let c = &self.codebook;
        if c.size < 2 {
            return bad(format!("codebook size {} must be at least 2", c.size));
        }
        if !(c.tau_start > 0.0 && c.tau_end > 0.0) {
            return bad("Gumbel temperatures must be positive".into());
        }
        self.weights.validate()
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip() {
        for cfg in [RunConfig::desk(), RunConfig::full()] {
            let back = RunConfig::parse(&cfg.to_toml()).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.hash(), cfg.hash());
        }
        let p = RunConfig::full();
        assert_eq!(
            (p.pretrain.epochs, p.finetune.epochs, p.distill.epochs),
            (80, 30, 300)
        );
        assert_eq!(
            (
                p.pretrain.learning_rate,
                p.finetune.learning_rate,
                p.distill.learning_rate
            ),
            (1e-3, 1e-5, 1e-2)
        );
        assert_eq!((p.batch_size, p.patch_size), (2, 64));
        assert_eq!(RunConfig::desk().patch_size, 32);
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = RunConfig::desk();
        c.patch_size = 24;
        assert!(c.validate().is_err());
        let text = RunConfig::desk()
            .to_toml()
            .replace("batch_size = 2", "batch_size = 0");
        assert!(RunConfig::parse(&text).is_err());
        assert!(RunConfig::parse("seed = 1\nbogus = 2").is_err());
    }

    #[test]
    fn temperature_anneals_linearly() {
        let c = CodebookConfig::default();
        assert_eq!(c.temperature(0, 20), 2.0);
        assert_eq!(c.temperature(19, 20), 0.5);
        assert!((c.temperature(10, 21) - 1.25).abs() < 1e-12);
    }
}
