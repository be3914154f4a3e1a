//! Patch grids and random masking.
//!
//! A spectrogram of `frames × mels` is viewed as a `mels × frames` image and
//! cut into non-overlapping `p × p` tiles. Tiles are enumerated
//! frequency-major: tile `r·cols + c` covers mel bins `[r·p, (r+1)·p)` and
//! frames `[c·p, (c+1)·p)`. Inside a tile, pixel `(i, j)` (mel offset `i`,
//! frame offset `j`) is stored at `i·p + j`. Trailing frames or mel bins that
//! do not fill a whole tile are dropped.

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::frontend::Spectrogram;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MIN_MASK_RATIO: f64 = 0.05;
pub const MAX_MASK_RATIO: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PatchError {
    #[error("patch size {p} invalid for a {frames}x{mels} spectrogram")]
    InvalidPatchSize { p: usize, frames: usize, mels: usize },
    #[error("mask ratio {0} outside [0.05, 0.95]")]
    RatioOutOfRange(f64),
    #[error("cannot mask an empty patch set")]
    NoPatches,
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
}

/// `n = rows · cols` flattened tiles, one per row of `patches`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid<T> {
    pub patches: Tensor<T>,
    /// Tiles along the mel axis.
    pub rows: usize,
    /// Tiles along the time axis.
    pub cols: usize,
    pub p: usize,
}

impl<T: Scalar> PatchGrid<T> {
    pub fn n(&self) -> usize {
        self.rows * self.cols
    }

    /// Length of a flattened patch (`p·p` for grids built by [`patchify`]).
    pub fn patch_dim(&self) -> usize {
        self.patches.cols()
    }
}

pub fn grid_dims(frames: usize, mels: usize, p: usize) -> Result<(usize, usize), PatchError> {
    if p == 0 || p > frames || p > mels {
        return Err(PatchError::InvalidPatchSize { p, frames, mels });
    }
    Ok((mels / p, frames / p))
}

pub fn patchify<T: Scalar>(spec: &Spectrogram<T>, p: usize) -> Result<PatchGrid<T>, PatchError> {
    let (frames, mels) = (spec.n_frames(), spec.n_mels());
    let (rows, cols) = grid_dims(frames, mels, p)?;
    let mut data = Vec::with_capacity(rows * cols * p * p);
    for r in 0..rows {
        for c in 0..cols {
            for i in 0..p {
                for j in 0..p {
                    data.push(spec.at(c * p + j, r * p + i));
                }
            }
        }
    }
    let patches = Tensor::new([rows * cols, p * p], data).expect("grid dims");
    Ok(PatchGrid { patches, rows, cols, p })
}

/// Inverse of [`patchify`]; yields a `(cols·p) × (rows·p)` spectrogram.
pub fn unpatchify<T: Scalar>(grid: &PatchGrid<T>) -> Spectrogram<T> {
    let (frames, mels, p) = (grid.cols * grid.p, grid.rows * grid.p, grid.p);
    let mut data = vec![T::zero(); frames * mels];
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let tile = grid.patches.row(r * grid.cols + c);
            for i in 0..p {
                for j in 0..p {
                    data[(c * p + j) * mels + r * p + i] = tile[i * p + j];
                }
            }
        }
    }
    Spectrogram::new(Tensor::new([frames, mels], data).expect("grid dims")).expect("2-D")
}

/// `⌊n·α⌋`, with a guard against products that land a rounding error below an integer.
pub fn num_masked(n: usize, alpha: f64) -> usize {
    (n as f64 * alpha + 1e-9).floor() as usize
}

/// Sorted masked and survivor indices over `0..n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MaskPlanRecord", into = "MaskPlanRecord")]
pub struct MaskPlan {
    pub n: usize,
    pub alpha: f64,
    pub masked_idx: Vec<usize>,
    pub survivor_idx: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct MaskPlanRecord {
    n: usize,
    alpha: f64,
    masked_idx: Vec<usize>,
}

impl From<MaskPlan> for MaskPlanRecord {
    fn from(p: MaskPlan) -> Self {
        Self { n: p.n, alpha: p.alpha, masked_idx: p.masked_idx }
    }
}

impl TryFrom<MaskPlanRecord> for MaskPlan {
    type Error = PatchError;

    fn try_from(r: MaskPlanRecord) -> Result<Self, PatchError> {
        MaskPlan::from_masked(r.n, r.alpha, r.masked_idx)
    }
}

fn check_ratio(alpha: f64) -> Result<(), PatchError> {
    if !(MIN_MASK_RATIO..=MAX_MASK_RATIO).contains(&alpha) {
        return Err(PatchError::RatioOutOfRange(alpha));
    }
    Ok(())
}

impl MaskPlan {
    /// Builds a plan from explicit masked indices, validating the partition.
    pub fn from_masked(n: usize, alpha: f64, mut masked_idx: Vec<usize>) -> Result<Self, PatchError> {
        check_ratio(alpha)?;
        masked_idx.sort_unstable();
        masked_idx.dedup();
        if masked_idx.last().is_some_and(|&m| m >= n) {
            return Err(PatchError::SizeMismatch(format!("masked index out of range for n={n}")));
        }
        let mut is_masked = vec![false; n];
        masked_idx.iter().for_each(|&i| is_masked[i] = true);
        let survivor_idx = (0..n).filter(|&i| !is_masked[i]).collect();
        Ok(Self { n, alpha, masked_idx, survivor_idx })
    }

    pub fn num_masked(&self) -> usize {
        self.masked_idx.len()
    }

    pub fn num_survivors(&self) -> usize {
        self.survivor_idx.len()
    }

    /// For each position: `Some(k)` if it is the `k`-th survivor, `None` if masked.
    pub fn fill_source(&self) -> Vec<Option<usize>> {
        let mut src = vec![None; self.n];
        for (k, &i) in self.survivor_idx.iter().enumerate() {
            src[i] = Some(k);
        }
        src
    }
}

/// Draws `⌊n·α⌋` distinct indices uniformly (partial Fisher–Yates), sorted.
pub fn random_mask<R: Rng + ?Sized>(n: usize, alpha: f64, rng: &mut R) -> Result<MaskPlan, PatchError> {
    check_ratio(alpha)?;
    if n == 0 {
        return Err(PatchError::NoPatches);
    }
    let count = num_masked(n, alpha);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(count);
    MaskPlan::from_masked(n, alpha, idx)
}

pub fn random_mask_seeded(n: usize, alpha: f64, seed: u64) -> Result<MaskPlan, PatchError> {
    random_mask(n, alpha, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn gather<T: Scalar>(grid: &PatchGrid<T>, plan: &MaskPlan, idx: &[usize]) -> Result<Tensor<T>, PatchError> {
    if plan.n != grid.n() {
        return Err(PatchError::SizeMismatch(format!("plan n={} vs grid n={}", plan.n, grid.n())));
    }
    let d = grid.patch_dim();
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(grid.patches.row(i));
    }
    if idx.is_empty() {
        return Err(PatchError::SizeMismatch("empty selection".into()));
    }
    Ok(Tensor::new([idx.len(), d], data).expect("selection dims"))
}

/// Survivor patches `Ē`, ordered by `survivor_idx`.
pub fn gather_survivors<T: Scalar>(grid: &PatchGrid<T>, plan: &MaskPlan) -> Result<Tensor<T>, PatchError> {
    gather(grid, plan, &plan.survivor_idx)
}

/// Masked patches `Ê`, ordered by `masked_idx`.
pub fn gather_masked<T: Scalar>(grid: &PatchGrid<T>, plan: &MaskPlan) -> Result<Tensor<T>, PatchError> {
    gather(grid, plan, &plan.masked_idx)
}

/// Full `n × D` sequence: survivor rows from `encoded`, `token` at masked positions.
pub fn scatter_with_mask_token<T: Scalar>(
    encoded: &Tensor<T>,
    plan: &MaskPlan,
    token: &[T],
) -> Result<Tensor<T>, PatchError> {
    if encoded.rows() != plan.num_survivors() || encoded.cols() != token.len() {
        return Err(PatchError::SizeMismatch(format!(
            "encoded {:?} vs {} survivors and token dim {}",
            encoded.shape(),
            plan.num_survivors(),
            token.len()
        )));
    }
    let mut data = Vec::with_capacity(plan.n * token.len());
    for src in plan.fill_source() {
        match src {
            Some(k) => data.extend_from_slice(encoded.row(k)),
            None => data.extend_from_slice(token),
        }
    }
    Ok(Tensor::new([plan.n, token.len()], data).expect("plan dims"))
}
