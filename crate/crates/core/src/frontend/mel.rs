use super::FrontendConfig;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters, `n_mels × (n_fft/2 + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank<T> {
    pub weights: Tensor<T>,
    /// Peak frequency of each filter in Hz.
    pub centers_hz: Vec<f64>,
    pub f_min: f64,
    pub f_max: f64,
}

impl<T: Scalar> MelFilterbank<T> {
    pub fn build(cfg: &FrontendConfig) -> Self {
        let bins = cfg.n_bins();
        let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
        let points: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bin_hz = |k: usize| k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;
        let mut w = Vec::with_capacity(cfg.n_mels * bins);
        for m in 0..cfg.n_mels {
            let (left, center, right) = (points[m], points[m + 1], points[m + 2]);
            for k in 0..bins {
                let f = bin_hz(k);
                let up = (f - left) / (center - left);
                let down = (right - f) / (right - center);
                w.push(T::lit(up.min(down).max(0.0)));
            }
        }
        Self {
            weights: Tensor::new([cfg.n_mels, bins], w).expect("filterbank dims"),
            centers_hz: points[1..=cfg.n_mels].to_vec(),
            f_min: cfg.f_min,
            f_max: cfg.f_max,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_filterbank() {
        let cfg = FrontendConfig::default();
        let fb = MelFilterbank::<f64>::build(&cfg);
        assert_eq!(fb.weights.shape(), &[128, 513]);
        assert!(fb.weights.data().iter().all(|&w| w >= 0.0));
        for m in 0..128 {
            assert!(fb.weights.row(m).iter().any(|&w| w > 0.0), "filter {m} is empty");
        }
        // Oracle: evenly spaced points on 2595·log10(1 + f/700), mapped back to Hz.
        let top = 2595.0 * (1.0 + 16_000.0 / 700.0f64).log10();
        for (m, &c) in fb.centers_hz.iter().enumerate() {
            let mel = top * (m + 1) as f64 / 129.0;
            let want = 700.0 * (10f64.powf(mel / 2595.0) - 1.0);
            assert!((c - want).abs() < 1e-9);
        }
        assert!(fb.centers_hz.windows(2).all(|w| w[1] > w[0]));
        // Each filter's largest weight sits at the bin nearest its center.
        let peaks: Vec<usize> = (0..128)
            .map(|m| {
                let r = fb.weights.row(m);
                (0..513).max_by(|&a, &b| r[a].partial_cmp(&r[b]).unwrap()).unwrap()
            })
            .collect();
        assert!(peaks.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn mel_roundtrip() {
        for hz in [0.0, 440.0, 1000.0, 16_000.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
    }
}
