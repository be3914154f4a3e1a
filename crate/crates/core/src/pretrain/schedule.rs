use serde::{Deserialize, Serialize};

/// Linear warmup to `peak_lr`, then half-cosine down to `floor_lr`.
/// Positions are measured in (fractional) epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub warmup_epochs: f64,
    pub total_epochs: f64,
    pub peak_lr: f64,
    #[serde(default)]
    pub floor_lr: f64,
}

impl ScheduleConfig {
    /// 40 warmup epochs out of 80, peak 1e-3.
    pub fn pretrain() -> Self {
        Self { warmup_epochs: 40.0, total_epochs: 80.0, peak_lr: 1e-3, floor_lr: 0.0 }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs < self.total_epochs) {
            return Err(format!("warmup {} must be in [0, total {})", self.warmup_epochs, self.total_epochs));
        }
        Ok(())
    }
}

pub fn lr_at(epoch: f64, cfg: &ScheduleConfig) -> f64 {
    if epoch < cfg.warmup_epochs {
        return cfg.peak_lr * epoch / cfg.warmup_epochs;
    }
    let span = cfg.total_epochs - cfg.warmup_epochs;
    let progress = ((epoch - cfg.warmup_epochs) / span).clamp(0.0, 1.0);
    cfg.floor_lr + (cfg.peak_lr - cfg.floor_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_points() {
        let cfg = ScheduleConfig::pretrain();
        assert_eq!(lr_at(0.0, &cfg), 0.0);
        assert_eq!(lr_at(40.0, &cfg), 0.001);
        assert!((lr_at(60.0, &cfg) - 0.0005).abs() < 1e-15);
        assert!(lr_at(80.0, &cfg).abs() < 1e-18);
        assert!((lr_at(20.0, &cfg) - 0.0005).abs() < 1e-18);
    }

    #[test]
    fn continuous_at_warmup_boundary() {
        let cfg = ScheduleConfig::pretrain();
        let below = lr_at(40.0 - 1e-12, &cfg);
        assert!((lr_at(40.0, &cfg) - below).abs() < 1e-12);
    }

    #[test]
    fn validation() {
        assert!(ScheduleConfig { warmup_epochs: 5.0, total_epochs: 5.0, peak_lr: 1.0, floor_lr: 0.0 }.validate().is_err());
        assert!(ScheduleConfig::pretrain().validate().is_ok());
    }
}
