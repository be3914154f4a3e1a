use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Encoder presets. All three use 12 blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Tiny,
    Small,
    Base,
}

impl Scale {
    pub fn encoder(self, patch_dim: usize) -> EncoderConfig {
        let (heads, emb, ffn) = match self {
            Scale::Tiny => (3, 192, 768),
            Scale::Small => (6, 384, 1536),
            Scale::Base => (12, 768, 3072),
        };
        EncoderConfig { depth: 12, heads, emb, ffn, patch_dim }
    }
}

impl FromStr for Scale {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "tiny" => Ok(Scale::Tiny),
            "small" => Ok(Scale::Small),
            "base" => Ok(Scale::Base),
            other => Err(format!("unknown scale {other:?} (tiny | small | base)")),
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Tiny => "tiny",
            Scale::Small => "small",
            Scale::Base => "base",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub emb: usize,
    pub ffn: usize,
    pub patch_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub emb: usize,
    pub ffn: usize,
    pub out_dim: usize,
}

impl DecoderConfig {
    /// 8 blocks, 16 heads, width 512, FFN 2048; shared by every encoder scale.
    pub fn standard(out_dim: usize) -> Self {
        Self { depth: 8, heads: 16, emb: 512, ffn: 2048, out_dim }
    }
}

/// Full model description. `decoder` is present for pretraining, `num_classes`
/// for finetuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch: usize,
    pub encoder: EncoderConfig,
    pub decoder: Option<DecoderConfig>,
    pub num_classes: Option<usize>,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_ln_eps() -> f64 {
    1e-6
}

fn default_init_std() -> f64 {
    0.02
}

impl ModelConfig {
    /// Encoder preset plus the standard decoder, for pretraining.
    pub fn pretrain(scale: Scale, patch: usize) -> Self {
        Self {
            patch,
            encoder: scale.encoder(patch * patch),
            decoder: Some(DecoderConfig::standard(patch * patch)),
            num_classes: None,
            ln_eps: default_ln_eps(),
            init_std: default_init_std(),
        }
    }

    /// Encoder preset plus a linear head, for finetuning.
    pub fn classifier(scale: Scale, patch: usize, num_classes: usize) -> Self {
        Self { decoder: None, num_classes: Some(num_classes), ..Self::pretrain(scale, patch) }
    }

    /// Same encoder, decoder dropped, head attached.
    pub fn to_classifier(&self, num_classes: usize) -> Self {
        Self { decoder: None, num_classes: Some(num_classes), ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), String> {
        let e = &self.encoder;
        if e.patch_dim != self.patch * self.patch {
            return Err(format!("encoder patch_dim {} != patch² {}", e.patch_dim, self.patch * self.patch));
        }
        let check = |what: &str, heads: usize, emb: usize, depth: usize, ffn: usize| {
            if heads == 0 || emb == 0 || emb % heads != 0 {
                return Err(format!("{what}: emb {emb} not divisible by heads {heads}"));
            }
            if emb % 2 != 0 {
                return Err(format!("{what}: emb {emb} must be even for sinusoidal positions"));
            }
            if depth == 0 || ffn == 0 {
                return Err(format!("{what}: depth and ffn must be positive"));
            }
            Ok(())
        };
        check("encoder", e.heads, e.emb, e.depth, e.ffn)?;
        if let Some(d) = &self.decoder {
            check("decoder", d.heads, d.emb, d.depth, d.ffn)?;
            if d.out_dim != e.patch_dim {
                return Err(format!("decoder out_dim {} != patch_dim {}", d.out_dim, e.patch_dim));
            }
        }
        if self.num_classes == Some(0) {
            return Err("num_classes must be positive".into());
        }
        Ok(())
    }
}

fn block_params(emb: usize, ffn: usize) -> usize {
    let attn = 4 * (emb * emb + emb);
    let mlp = emb * ffn + ffn + ffn * emb + emb;
    let norms = 4 * emb;
    attn + mlp + norms
}

/// Closed-form count of scalar learnables. The head is included when
/// `num_classes` is set; the decoder side only when `with_decoder`.
pub fn param_count(cfg: &ModelConfig, with_decoder: bool) -> usize {
    let e = &cfg.encoder;
    let mut total = e.patch_dim * e.emb + e.emb + e.depth * block_params(e.emb, e.ffn) + 2 * e.emb;
    if let Some(c) = cfg.num_classes {
        total += e.emb * c + c;
    }
    if with_decoder {
        if let Some(d) = &cfg.decoder {
            total += e.emb * d.emb + d.emb; // encoder → decoder projection
            total += d.emb; // mask token
            total += d.depth * block_params(d.emb, d.ffn) + 2 * d.emb;
            total += d.emb * d.out_dim + d.out_dim;
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_reported_sizes() {
        let within = |got: usize, want: f64| ((got as f64 - want) / want).abs() <= 0.05;
        let tiny = param_count(&ModelConfig::pretrain(Scale::Tiny, 16), false);
        let small = param_count(&ModelConfig::pretrain(Scale::Small, 16), false);
        let base = param_count(&ModelConfig::pretrain(Scale::Base, 16), false);
        assert!(within(tiny, 5.6e6), "{tiny}");
        assert!(within(small, 22e6), "{small}");
        assert!(within(base, 86e6), "{base}");
    }

    #[test]
    fn base_with_narrow_ffn_undershoots() {
        let mut cfg = ModelConfig::pretrain(Scale::Base, 16);
        cfg.encoder.ffn = 2048;
        let n = param_count(&cfg, false) as f64;
        assert!(n < 0.95 * 86e6, "{n}");
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::pretrain(Scale::Tiny, 16).validate().is_ok());
        let mut bad = ModelConfig::pretrain(Scale::Tiny, 16);
        bad.encoder.heads = 5;
        assert!(bad.validate().is_err());
        assert_eq!("Small".parse::<Scale>().unwrap(), Scale::Small);
        assert!("huge".parse::<Scale>().is_err());
    }
}
