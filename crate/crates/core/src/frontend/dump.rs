//! Spectrogram files.
//!
//! Binary layout: `u32` little-endian header length, a JSON header
//! `{"shape":[frames,mels],"dtype":"float32"}`, then row-major little-endian
//! float32 values.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FrontendError, Spectrogram};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
struct Header {
    shape: Vec<usize>,
    dtype: DType,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FrontendError + '_ {
    move |source| FrontendError::Io { path: path.display().to_string(), source }
}

pub fn write_spectrogram_bin<T: Scalar>(path: &Path, spec: &Spectrogram<T>) -> Result<(), FrontendError> {
    let header = serde_json::to_vec(&Header { shape: spec.values.shape().to_vec(), dtype: DType::Float32 })
        .expect("header serialises");
    let mut buf = Vec::with_capacity(4 + header.len() + spec.values.len() * 4);
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    for &v in spec.values.data() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(io_err(path))
}

pub fn read_spectrogram_bin<T: Scalar>(path: &Path) -> Result<Spectrogram<T>, FrontendError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let bad = |m: &str| FrontendError::Format(format!("{}: {m}", path.display()));
    if bytes.len() < 4 {
        return Err(bad("truncated header"));
    }
    let hlen = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    let header: Header =
        serde_json::from_slice(bytes.get(4..4 + hlen).ok_or_else(|| bad("truncated header"))?).map_err(|e| bad(&e.to_string()))?;
    if header.dtype != DType::Float32 || header.shape.len() != 2 {
        return Err(bad("expected 2-D float32"));
    }
    let payload = &bytes[4 + hlen..];
    let n: usize = header.shape.iter().product();
    if payload.len() != n * 4 {
        return Err(bad("payload length"));
    }
    let data = payload.chunks(4).map(|c| T::lit(f32::read_le(c) as f64)).collect();
    Spectrogram::new(Tensor::new(header.shape, data).map_err(|e| bad(&e.to_string()))?)
}

/// One line per frame, mel bins as columns.
pub fn write_spectrogram_csv<T: Scalar>(path: &Path, spec: &Spectrogram<T>) -> Result<(), FrontendError> {
    let mut out = String::with_capacity(spec.values.len() * 10);
    for t in 0..spec.n_frames() {
        let row: Vec<String> = spec.values.row(t).iter().map(|v| format!("{v}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

/// 8-bit greyscale PGM: time left to right, low frequencies at the bottom,
/// min–max scaled over `[lo, hi]`.
pub fn write_pgm<T: Scalar>(path: &Path, spec: &Spectrogram<T>, lo: T, hi: T) -> Result<(), FrontendError> {
    let (w, h) = (spec.n_frames(), spec.n_mels());
    let range = (hi - lo).max(T::epsilon());
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    for m in (0..h).rev() {
        for t in 0..w {
            let v = ((spec.at(t, m) - lo) / range).max(T::zero()).min(T::one());
            buf.push((v.as_f64() * 255.0).round() as u8);
        }
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))
}
