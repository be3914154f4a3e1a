use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::FrontendConfig;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Periodic Hamming window, `0.54 − 0.46·cos(2πn/N)`.
pub fn hamming_window<T: Scalar>(n: usize) -> Vec<T> {
    (0..n)
        .map(|i| T::lit(0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
        .collect()
}

fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    let mut j = i;
    // single reflection is enough while the pad is shorter than the signal
    if j < 0 {
        j = -j;
    }
    if j >= n {
        j = 2 * (n - 1) - j;
    }
    j.clamp(0, n - 1) as usize
}

/// Power spectrogram `stft_frames × (n_fft/2 + 1)` of a standardised clip.
pub fn stft_power<T: Scalar>(samples: &[T], cfg: &FrontendConfig) -> Tensor<T> {
    stft_power_with(samples, &hamming_window(cfg.n_fft), cfg)
}

pub(crate) fn stft_power_with<T: Scalar>(samples: &[T], window: &[T], cfg: &FrontendConfig) -> Tensor<T> {
    let n_fft = cfg.n_fft;
    let bins = cfg.n_bins();
    let frames = samples.len() / cfg.hop;
    let pad = (n_fft / 2) as isize;
    let fft = FftPlanner::<T>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(T::zero(), T::zero()); n_fft];
    let mut scratch = vec![Complex::new(T::zero(), T::zero()); fft.get_inplace_scratch_len()];
    let mut out = Vec::with_capacity(frames * bins);
    for t in 0..frames {
        let start = (t * cfg.hop) as isize - pad;
        for (n, slot) in buf.iter_mut().enumerate() {
            let x = samples[reflect(start + n as isize, samples.len())];
            *slot = Complex::new(x * window[n], T::zero());
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        out.extend(buf[..bins].iter().map(|c| c.norm_sqr()));
    }
    Tensor::new([frames, bins], out).expect("stft dims")
}
