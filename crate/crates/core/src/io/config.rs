//! TOML run configuration shared by the CLI subcommands.
//!
//! ```toml
//! manifest = "train.jsonl"
//! scale = "tiny"
//! frames = 992
//! alpha = 0.75
//! epochs = 80
//! warmup_epochs = 40
//! batch_size = 8
//! lr = 1e-3
//! weight_decay = 0.05
//! seed = 0
//! checkpoint_dir = "runs/tiny"
//!
//! [finetune]
//! num_classes = 50
//! task = "multiclass"
//! ```
//!
//! Relative paths resolve against the config file's directory.
//! `MASKSPEC_SEED` overrides `seed`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finetune::FinetuneConfig;
use crate::frontend::{ChannelMode, FrontendConfig};
use crate::model::{ModelConfig, Scale};
use crate::pretrain::{AdamWConfig, PretrainConfig, ScheduleConfig};
use crate::scalar::DType;

pub const SEED_ENV: &str = "MASKSPEC_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub scale: Scale,
    pub patch: usize,
    /// Spectrogram frames per clip; clip length follows from the hop.
    pub frames: usize,
    /// Overrides the preset's encoder depth.
    pub encoder_depth: Option<usize>,
    /// Overrides the standard decoder depth.
    pub decoder_depth: Option<usize>,
    pub alpha: f64,
    pub epochs: usize,
    pub warmup_epochs: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub checkpoint_dir: PathBuf,
    /// Epoch interval for periodic checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub dtype: DType,
    pub channel: ChannelMode,
    pub finetune: FinetuneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let fe = FrontendConfig::default();
        Self {
            manifest: PathBuf::from("manifest.jsonl"),
            scale: Scale::Tiny,
            patch: 16,
            frames: fe.output_frames(),
            encoder_depth: None,
            decoder_depth: None,
            alpha: 0.75,
            epochs: 80,
            warmup_epochs: 40.0,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.05,
            seed: 0,
            checkpoint_dir: PathBuf::from("checkpoints"),
            checkpoint_every: 0,
            dtype: DType::Float32,
            channel: ChannelMode::Mean,
            finetune: FinetuneConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads the file, resolves relative paths and applies `MASKSPEC_SEED`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let mut cfg = Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.manifest, &mut cfg.checkpoint_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let cfg: Self = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.pretrain().validate().map_err(|e| e.to_string())?;
        cfg.finetune.validate()?;
        Ok(cfg)
    }

    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn frontend(&self) -> FrontendConfig {
        FrontendConfig::with_output_frames(self.frames)
    }

    pub fn model(&self) -> ModelConfig {
        let mut m = ModelConfig::pretrain(self.scale, self.patch);
        if let Some(d) = self.encoder_depth {
            m.encoder.depth = d;
        }
        if let (Some(d), Some(dec)) = (self.decoder_depth, m.decoder.as_mut()) {
            dec.depth = d;
        }
        m
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            mask_ratio: self.alpha,
            batch_size: self.batch_size,
            schedule: ScheduleConfig {
                warmup_epochs: self.warmup_epochs,
                total_epochs: self.epochs as f64,
                peak_lr: self.lr,
                floor_lr: 0.0,
            },
            optimizer: AdamWConfig { weight_decay: self.weight_decay, ..AdamWConfig::default() },
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_example() {
        let cfg = RunConfig::parse(
            "manifest = \"m.jsonl\"\nscale = \"small\"\nframes = 64\nalpha = 0.5\nepochs = 4\nwarmup_epochs = 1\nseed = 3\n[finetune]\nnum_classes = 5\n",
        )
        .unwrap();
        assert_eq!(cfg.scale, Scale::Small);
        assert_eq!(cfg.frontend().output_frames(), 64);
        assert_eq!(cfg.pretrain().mask_ratio, 0.5);
        assert_eq!(cfg.finetune.num_classes, 5);
        assert_eq!(cfg.model().encoder.emb, 384);
    }

    #[test]
    fn defaults_are_canonical() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.frames, 992);
        assert_eq!(cfg.pretrain(), PretrainConfig { seed: 0, ..PretrainConfig::default() });
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(RunConfig::parse("bogus = 1\n").is_err());
        assert!(RunConfig::parse("epochs = 4\nwarmup_epochs = 4\n").is_err());
    }

    #[test]
    fn seed_override() {
        let mut cfg = RunConfig::default();
        cfg.apply_seed_override(Some("17")).unwrap();
        assert_eq!(cfg.seed, 17);
        cfg.apply_seed_override(None).unwrap();
        assert_eq!(cfg.seed, 17);
        assert!(cfg.apply_seed_override(Some("x")).is_err());
    }
}
