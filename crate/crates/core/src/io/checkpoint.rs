//! Checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MSKS" | u32 version | u32 meta_len | meta JSON
//! u32 tensor_count
//! per tensor: u32 name_len | name | u8 dtype tag | u32 rank | u64 dims… | payload
//! u32 CRC32 of every preceding byte
//! ```
//!
//! Optimizer moments are stored as tensors named `optim.m.<param>` and
//! `optim.v.<param>`; the step counter lives in the metadata.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::frontend::FrontendConfig;
use crate::model::{Model, ModelConfig};
use crate::pretrain::OptimizerState;
use crate::scalar::{DType, Scalar};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"MSKS";
pub const VERSION: u32 = 1;

const MOMENT1: &str = "optim.m.";
const MOMENT2: &str = "optim.v.";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("shape mismatch for tensor {name}: checkpoint {found:?}, model {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
}

impl CheckpointError {
    /// Stable numeric code per failure kind.
    pub fn code(&self) -> u8 {
        match self {
            CheckpointError::Io { .. } => 1,
            CheckpointError::BadMagic => 2,
            CheckpointError::UnsupportedVersion(_) => 3,
            CheckpointError::Truncated => 4,
            CheckpointError::CrcMismatch { .. } => 5,
            CheckpointError::Malformed(_) => 6,
            CheckpointError::ShapeMismatch { .. } => 7,
            CheckpointError::MissingTensor(_) => 8,
        }
    }
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub frontend: FrontendConfig,
    pub epoch: usize,
    pub seed: u64,
    pub loss: Option<f64>,
    pub optimizer_step: Option<u64>,
}

/// Decoded checkpoint: metadata and tensors in file order.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub dtype: DType,
    pub tensors: Vec<(String, Tensor<T>)>,
}

/// What `load_params` did with each parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// Optional parameters absent from the file, left at their initial values.
    pub kept_init: Vec<String>,
    /// File tensors with no matching parameter.
    pub ignored: Vec<String>,
}

fn push_tensor<T: Scalar>(buf: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(T::DTYPE.tag());
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(buf);
    }
}

pub fn encode_checkpoint<T: Scalar>(
    meta: &CheckpointMeta,
    params: &ParamStore<T>,
    optimizer: Option<&OptimizerState<T>>,
) -> Vec<u8> {
    let meta_json = serde_json::to_vec(meta).expect("metadata serialises");
    let mut buf = Vec::with_capacity(16 + meta_json.len() + params.num_scalars() * std::mem::size_of::<T>());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta_json);
    let count = params.len() * if optimizer.is_some() { 3 } else { 1 };
    buf.extend_from_slice(&(count as u32).to_le_bytes());
    for (_, p) in params.iter() {
        push_tensor(&mut buf, &p.name, &p.value);
    }
    if let Some(state) = optimizer {
        for ((_, p), (m, v)) in params.iter().zip(state.m.iter().zip(&state.v)) {
            push_tensor(&mut buf, &format!("{MOMENT1}{}", p.name), m);
            push_tensor(&mut buf, &format!("{MOMENT2}{}", p.name), v);
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    meta: &CheckpointMeta,
    params: &ParamStore<T>,
    optimizer: Option<&OptimizerState<T>>,
) -> Result<()> {
    let bytes = encode_checkpoint(meta, params, optimizer);
    let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(&bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    fs::rename(&tmp, path).map_err(io)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_values<T: Scalar>(payload: &[u8], dtype: DType) -> Vec<T> {
    match dtype {
        DType::Float32 => payload.chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
        DType::Float64 => payload.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
    }
}

/// Validates magic, version and checksum, then decodes every tensor,
/// converting to `T` when the stored dtype differs.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated);
    }
    if &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 8 {
        return Err(CheckpointError::Truncated);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    if bytes.len() < 12 {
        return Err(CheckpointError::Truncated);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::CrcMismatch { stored, computed });
    }

    let mut r = Reader { bytes: body, pos: 8 };
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(meta_len)?).map_err(|e| CheckpointError::Malformed(format!("metadata: {e}")))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    let mut dtype = T::DTYPE;
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not utf-8".into()))?
            .to_string();
        let tag = r.take(1)?[0];
        dtype = DType::from_tag(tag).ok_or_else(|| CheckpointError::Malformed(format!("dtype tag {tag} for {name}")))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes_len = numel
            .and_then(|n| n.checked_mul(dtype.size()))
            .ok_or_else(|| CheckpointError::Malformed(format!("shape {shape:?} for {name}")))?;
        let data = read_values(r.take(bytes_len)?, dtype);
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
        tensors.push((name, t));
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(Checkpoint { meta, dtype, tensors })
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    decode_checkpoint(&bytes)
}

/// Decoder, mask-token and head parameters may be absent from a checkpoint.
pub fn is_optional_param(name: &str) -> bool {
    name.starts_with("decoder.") || name == "head" || name.starts_with("head.")
}

impl<T: Scalar> Checkpoint<T> {
    fn lookup(&self) -> BTreeMap<&str, &Tensor<T>> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect()
    }

    pub fn param_tensors(&self) -> impl Iterator<Item = &(String, Tensor<T>)> {
        self.tensors.iter().filter(|(n, _)| !n.starts_with("optim."))
    }

    /// Scalar count over non-optimizer tensors.
    pub fn num_param_scalars(&self) -> usize {
        self.param_tensors().map(|(_, t)| t.len()).sum()
    }

    /// Copies matching tensors into `params` in store order. Required
    /// parameters must be present; the first shape disagreement is an error.
    pub fn load_params(&self, params: &mut ParamStore<T>) -> Result<LoadReport> {
        let map = self.lookup();
        let mut report = LoadReport::default();
        let ids: Vec<_> = params.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            match map.get(name.as_str()) {
                Some(t) => {
                    let expected = params.get(id).value.shape().to_vec();
                    if t.shape() != expected.as_slice() {
                        return Err(CheckpointError::ShapeMismatch { name, expected, found: t.shape().to_vec() });
                    }
                    params.get_mut(id).value = (*t).clone();
                    report.loaded.push(name);
                }
                None if is_optional_param(&name) => report.kept_init.push(name),
                None => return Err(CheckpointError::MissingTensor(name)),
            }
        }
        report.ignored = self
            .param_tensors()
            .filter(|(n, _)| params.id(n).is_none())
            .map(|(n, _)| n.clone())
            .collect();
        Ok(report)
    }

    /// Moments for every parameter of `params`, if the file carries them.
    pub fn optimizer_state(&self, params: &ParamStore<T>) -> Result<Option<OptimizerState<T>>> {
        let Some(step) = self.meta.optimizer_step else { return Ok(None) };
        let map = self.lookup();
        let mut state = OptimizerState::new(params);
        state.step = step;
        for (i, (_, p)) in params.iter().enumerate() {
            for (prefix, slot) in [(MOMENT1, &mut state.m[i]), (MOMENT2, &mut state.v[i])] {
                let name = format!("{prefix}{}", p.name);
                let t = map.get(name.as_str()).ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
                if t.shape() != p.value.shape() {
                    return Err(CheckpointError::ShapeMismatch {
                        name,
                        expected: p.value.shape().to_vec(),
                        found: t.shape().to_vec(),
                    });
                }
                *slot = (*t).clone();
            }
        }
        Ok(Some(state))
    }

    /// Builds the stored model exactly.
    pub fn to_model(&self) -> Result<Model<T>> {
        self.to_model_with(self.meta.model.clone())
    }

    /// Builds a model from `config` and loads this checkpoint into it under the
    /// subset rule; parameters not in the file keep their seeded init.
    pub fn to_model_with(&self, config: ModelConfig) -> Result<Model<T>> {
        let mut model =
            Model::new(config, self.meta.seed).map_err(|e| CheckpointError::Malformed(format!("model config: {e}")))?;
        self.load_params(&mut model.params)?;
        Ok(model)
    }
}
