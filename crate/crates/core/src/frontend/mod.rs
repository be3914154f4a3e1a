//! Waveform to log-mel spectrogram.
//!
//! Clips are standardised to 32 kHz mono of a fixed length, framed with a
//! periodic Hamming window (reflect padding of half a window on both sides,
//! one frame per hop), projected through an HTK mel filterbank and
//! log-compressed. The last `trim_frames` frames are dropped so the canonical
//! 10 s clip yields a 992×128 matrix.

mod dump;
mod mel;
mod resample;
mod stft;
mod wav;

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use dump::{read_spectrogram_bin, write_pgm, write_spectrogram_bin, write_spectrogram_csv};
pub use mel::{hz_to_mel, mel_to_hz, MelFilterbank};
pub use resample::resample;
pub use stft::{hamming_window, stft_power};
pub use wav::{read_wav, write_wav};

#[derive(Debug, thiserror::Error)]
pub enum FrontendError {
    #[error("audio clip has no samples")]
    EmptyAudio,
    #[error("unsupported channel count {0} (expected 1 or 2)")]
    UnsupportedChannels(usize),
    #[error("invalid sample rate {0}")]
    InvalidSampleRate(u32),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("wav {path}: {source}")]
    Wav { path: String, source: hound::Error },
    #[error("io {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed spectrogram file: {0}")]
    Format(String),
}

/// Signal-processing constants. `Default` is the canonical 10 s / 992×128 setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub clip_samples: usize,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub trim_frames: usize,
    pub log_eps: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate: 32_000,
            clip_samples: 320_000,
            n_fft: 1024,
            hop: 320,
            n_mels: 128,
            f_min: 0.0,
            f_max: 16_000.0,
            trim_frames: 8,
            log_eps: 1e-5,
        }
    }
}

impl FrontendConfig {
    /// Short clips for desk-scale experiments: `frames` spectrogram frames
    /// after trimming, same DSP constants otherwise.
    pub fn with_output_frames(frames: usize) -> Self {
        let base = Self::default();
        Self { clip_samples: (frames + base.trim_frames) * base.hop, ..base }
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// STFT frames kept from a standardised clip.
    pub fn stft_frames(&self) -> usize {
        self.clip_samples / self.hop
    }

    /// Frames left in the spectrogram after trimming.
    pub fn output_frames(&self) -> usize {
        self.stft_frames().saturating_sub(self.trim_frames)
    }
}

/// How a stereo clip becomes mono.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelMode {
    Left,
    Right,
    #[default]
    Mean,
}

/// Channel-major audio.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveformClip<T> {
    pub channels: Vec<Vec<T>>,
    pub sample_rate: u32,
}

impl<T: Scalar> WaveformClip<T> {
    pub fn mono(samples: Vec<T>, sample_rate: u32) -> Self {
        Self { channels: vec![samples], sample_rate }
    }

    pub fn stereo(left: Vec<T>, right: Vec<T>, sample_rate: u32) -> Self {
        Self { channels: vec![left, right], sample_rate }
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Mono samples; panics on multi-channel clips.
    pub fn samples(&self) -> &[T] {
        assert_eq!(self.channels.len(), 1, "samples() on a multi-channel clip");
        &self.channels[0]
    }
}

/// Mixes down, resamples and pads/truncates to `cfg.clip_samples` at `cfg.sample_rate`.
pub fn standardize<T: Scalar>(
    clip: &WaveformClip<T>,
    mode: ChannelMode,
    cfg: &FrontendConfig,
) -> Result<WaveformClip<T>, FrontendError> {
    if clip.sample_rate == 0 {
        return Err(FrontendError::InvalidSampleRate(clip.sample_rate));
    }
    if clip.is_empty() {
        return Err(FrontendError::EmptyAudio);
    }
    let mono = match clip.channels.as_slice() {
        [only] => only.clone(),
        [left, right] => match mode {
            ChannelMode::Left => left.clone(),
            ChannelMode::Right => right.clone(),
            ChannelMode::Mean => left.iter().zip(right).map(|(&l, &r)| (l + r) * T::lit(0.5)).collect(),
        },
        other => return Err(FrontendError::UnsupportedChannels(other.len())),
    };
    let mut samples = if clip.sample_rate == cfg.sample_rate {
        mono
    } else {
        resample(&mono, clip.sample_rate, cfg.sample_rate)
    };
    samples.resize(cfg.clip_samples, T::zero());
    Ok(WaveformClip::mono(samples, cfg.sample_rate))
}

/// Log-mel energies, `frames × mel bins`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram<T> {
    pub values: Tensor<T>,
}

impl<T: Scalar> Spectrogram<T> {
    pub fn new(values: Tensor<T>) -> Result<Self, FrontendError> {
        if values.shape().len() != 2 {
            return Err(FrontendError::Shape(format!("spectrogram must be 2-D, got {:?}", values.shape())));
        }
        Ok(Self { values })
    }

    pub fn n_frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_mels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn at(&self, frame: usize, mel: usize) -> T {
        self.values.data()[frame * self.n_mels() + mel]
    }
}

/// `log(power · fbᵀ + eps)` with the trailing `trim_frames` frames removed.
pub fn logmel<T: Scalar>(
    power: &Tensor<T>,
    fb: &MelFilterbank<T>,
    cfg: &FrontendConfig,
) -> Result<Spectrogram<T>, FrontendError> {
    let bins = fb.weights.cols();
    if power.shape().len() != 2 || power.cols() != bins {
        return Err(FrontendError::Shape(format!(
            "power {:?} vs filterbank {:?}",
            power.shape(),
            fb.weights.shape()
        )));
    }
    let keep = power.rows().checked_sub(cfg.trim_frames).filter(|&k| k > 0).ok_or_else(|| {
        FrontendError::Shape(format!("{} frames cannot lose {} trailing frames", power.rows(), cfg.trim_frames))
    })?;
    let n_mels = fb.weights.rows();
    let eps = T::lit(cfg.log_eps);
    let w = fb.weights.data();
    let mut out = Vec::with_capacity(keep * n_mels);
    for t in 0..keep {
        let frame = power.row(t);
        for m in 0..n_mels {
            let filt = &w[m * bins..(m + 1) * bins];
            let e: T = filt.iter().zip(frame).map(|(&a, &b)| a * b).sum();
            out.push((e + eps).ln());
        }
    }
    Spectrogram::new(Tensor::new([keep, n_mels], out).map_err(|e| FrontendError::Shape(e.to_string()))?)
}

/// Standardise → STFT power → log-mel, with the filterbank and window built once.
#[derive(Debug, Clone)]
pub struct Frontend<T> {
    pub config: FrontendConfig,
    pub filterbank: MelFilterbank<T>,
    window: Vec<T>,
}

impl<T: Scalar> Frontend<T> {
    pub fn new(config: FrontendConfig) -> Self {
        let filterbank = MelFilterbank::build(&config);
        let window = hamming_window(config.n_fft);
        Self { config, filterbank, window }
    }

    pub fn spectrogram(&self, clip: &WaveformClip<T>, mode: ChannelMode) -> Result<Spectrogram<T>, FrontendError> {
        let std = standardize(clip, mode, &self.config)?;
        self.spectrogram_of_standardized(std.samples())
    }

    /// For samples already at the target rate and length.
    pub fn spectrogram_of_standardized(&self, samples: &[T]) -> Result<Spectrogram<T>, FrontendError> {
        if samples.len() != self.config.clip_samples {
            return Err(FrontendError::Shape(format!(
                "expected {} standardised samples, got {}",
                self.config.clip_samples,
                samples.len()
            )));
        }
        let power = stft::stft_power_with(samples, &self.window, &self.config);
        logmel(&power, &self.filterbank, &self.config)
    }
}
