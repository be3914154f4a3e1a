use std::path::Path;

use hound::{SampleFormat, WavSpec};

use super::{FrontendError, WaveformClip};
use crate::scalar::Scalar;

/// Reads 16-bit PCM or 32-bit float WAV into `[-1, 1]` samples.
pub fn read_wav<T: Scalar>(path: &Path) -> Result<WaveformClip<T>, FrontendError> {
    let wrap = |source| FrontendError::Wav { path: path.display().to_string(), source };
    let mut reader = hound::WavReader::open(path).map_err(wrap)?;
    let spec = reader.spec();
    let nch = spec.channels as usize;
    if nch == 0 || nch > 2 {
        return Err(FrontendError::UnsupportedChannels(nch));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(wrap)?,
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()
            .map_err(wrap)?,
        _ => return Err(wrap(hound::Error::Unsupported)),
    };
    let mut channels = vec![Vec::with_capacity(interleaved.len() / nch); nch];
    for (i, v) in interleaved.into_iter().enumerate() {
        channels[i % nch].push(T::lit(v));
    }
    Ok(WaveformClip { channels, sample_rate: spec.sample_rate })
}

/// Writes 32-bit float WAV.
pub fn write_wav<T: Scalar>(path: &Path, clip: &WaveformClip<T>) -> Result<(), FrontendError> {
    let wrap = |source| FrontendError::Wav { path: path.display().to_string(), source };
    let spec = WavSpec {
        channels: clip.num_channels() as u16,
        sample_rate: clip.sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for i in 0..clip.len() {
        for ch in &clip.channels {
            w.write_sample(ch[i].as_f64() as f32).map_err(wrap)?;
        }
    }
    w.finalize().map_err(wrap)
}
