use std::path::{Path, PathBuf};

use clap::Args;
use vpbsd_core::pipeline::{RunConfig, Stage};
use vpbsd_core::{Error, Result};

use crate::OUTPUT_ROOT_ENV;

/// Run-config flags shared by the training commands. Flags override the
/// config file, which overrides the preset.
#[derive(Args)]
pub struct ConfigArgs {
    /// Run config file (TOML).
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in settings: desk or full.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output directory [default: $VPBSD_OUTPUT_ROOT/<command>].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Epochs of this stage.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Learning rate of this stage.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Replace outputs left by an earlier run.
    #[arg(long)]
    pub force: bool,
}

pub fn snapshot_name(stage: Stage) -> String {
    format!("{}.config.toml", stage.name())
}

/// Config snapshot written next to a checkpoint of `stage`, if present.
pub fn snapshot_beside(checkpoint: &Path, stage: Stage) -> Option<PathBuf> {
    let p = checkpoint
        .parent()
        .unwrap_or(Path::new("."))
        .join(snapshot_name(stage));
    p.is_file().then_some(p)
}

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

impl ConfigArgs {
    /// Resolved config for `stage` and the output directory. `inherited` is
    /// the snapshot of the run that produced the input checkpoint; it is
    /// the base when neither a config file nor a preset is given.
    pub fn resolve(
        &self,
        stage: Stage,
        inherited: Option<PathBuf>,
        edit: impl FnOnce(&mut RunConfig),
    ) -> Result<(RunConfig, PathBuf)> {
        let mut cfg = match (&self.config, &self.preset, inherited) {
            (Some(p), _, _) => RunConfig::load(p)?,
            (None, Some(name), _) => RunConfig::preset(name)?,
            (None, None, Some(p)) => RunConfig::load(p)?,
            (None, None, None) => RunConfig::desk(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = &self.manifest {
            cfg.manifest = Some(m.clone());
        }
        if let Some(p) = self.patch_size {
            cfg.patch_size = p;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        let sc = match stage {
            Stage::Pretrain => &mut cfg.pretrain,
            Stage::Finetune => &mut cfg.finetune,
            Stage::Distill => &mut cfg.distill,
        };
        if let Some(e) = self.epochs {
            sc.epochs = e;
        }
        if let Some(lr) = self.lr {
            sc.learning_rate = lr;
        }
        edit(&mut cfg);
        let out = self
            .out
            .clone()
            .or_else(|| cfg.output_dir.clone())
            .unwrap_or_else(|| output_root().join(stage.name()));
        // Outputs must not depend on where they are written.
        cfg.output_dir = None;
        cfg.validate()?;
        if cfg.manifest.is_none() {
            return Err(Error::Config(
                "no dataset manifest; pass --manifest or set it in the config".into(),
            ));
        }
        Ok((cfg, out))
    }
}
