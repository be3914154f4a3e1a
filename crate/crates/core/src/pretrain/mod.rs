//! Masked-reconstruction pretraining: loss, lr schedule, AdamW, the epoch
//! loop and the mask-ratio sweep.

mod loss;
mod optim;
mod schedule;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loss::{mse_masked_loss, MaskedLoss};
pub use optim::{adamw_step, AdamW, AdamWConfig, OptimizerState};
pub use schedule::{lr_at, ScheduleConfig};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::frontend::Spectrogram;
use crate::patch::{patchify, random_mask, unpatchify, MaskPlan, PatchGrid};
use crate::scalar::Scalar;
use crate::tensor::{Graph, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub mask_ratio: f64,
    pub batch_size: usize,
    pub schedule: ScheduleConfig,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.75,
            batch_size: 8,
            schedule: ScheduleConfig::pretrain(),
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.schedule.validate().map_err(Error::Config)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    /// Per-element mean over masked patches of the batch.
    pub loss: f64,
    /// Summed squared error over masked patches of the batch.
    pub loss_sum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    /// Clip-weighted mean of step losses.
    pub mean_loss: f64,
    /// Summed squared error over every masked patch seen in the epoch.
    pub sum_loss: f64,
    pub steps: Vec<StepRecord>,
}

/// Model, optimizer and RNG streams for a pretraining run.
pub struct Pretrainer<T: Scalar> {
    pub model: Model<T>,
    pub optimizer: AdamW<T>,
    pub config: PretrainConfig,
    pub epoch: usize,
    mask_rng: ChaCha8Rng,
    order_rng: ChaCha8Rng,
}

impl<T: Scalar> Pretrainer<T> {
    pub fn new(model: Model<T>, config: PretrainConfig) -> Result<Self> {
        config.validate()?;
        if model.config.decoder.is_none() {
            return Err(Error::Config("pretraining needs a decoder".into()));
        }
        let optimizer = AdamW::new(config.optimizer.clone(), &model.params);
        Ok(Self {
            mask_rng: ChaCha8Rng::seed_from_u64(config.seed),
            order_rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0bde),
            model,
            optimizer,
            config,
            epoch: 0,
        })
    }

    /// Draws one mask per clip, then forward, backward and an optimizer step.
    pub fn train_step(&mut self, batch: &[PatchGrid<T>], lr: f64) -> Result<StepRecord> {
        let plans = batch
            .iter()
            .map(|g| random_mask(g.n(), self.config.mask_ratio, &mut self.mask_rng))
            .collect::<std::result::Result<Vec<MaskPlan>, _>>()?;
        self.step_with_plans(batch, &plans, lr)
    }

    pub fn step_with_plans(&mut self, batch: &[PatchGrid<T>], plans: &[MaskPlan], lr: f64) -> Result<StepRecord> {
        let step = self.optimizer.state.step + 1;
        let nonfinite = |e: TensorError, epoch| match e {
            TensorError::NonFinite { .. } => Error::NonFiniteLoss { epoch, step: step as usize },
            other => Error::Tensor(other),
        };
        let g = Graph::new();
        let fwd = self.model.pretrain_forward(&g, batch, plans).map_err(|e| nonfinite(e, self.epoch))?;
        let loss = g.value(fwd.loss).item().as_f64();
        let count = g.value(fwd.recon).len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: self.epoch, step: step as usize });
        }
        let grads = g.backward(fwd.loss).map_err(|e| nonfinite(e, self.epoch))?;
        grads.accumulate_into(&mut self.model.params);
        self.optimizer.step(&mut self.model.params, lr)?;
        Ok(StepRecord { epoch: self.epoch, step, lr, loss, loss_sum: loss * count })
    }

    /// One shuffled pass over `data`; lr follows the schedule at fractional epochs.
    pub fn pretrain_epoch(&mut self, data: &[PatchGrid<T>]) -> Result<EpochReport> {
        self.run_epoch(data, usize::MAX)
    }

    fn run_epoch(&mut self, data: &[PatchGrid<T>], max_steps: usize) -> Result<EpochReport> {
        if data.is_empty() {
            return Err(Error::Input("empty pretraining set".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.order_rng);
        let bs = self.config.batch_size;
        let steps_per_epoch = data.len().div_ceil(bs);
        let mut steps = Vec::with_capacity(steps_per_epoch);
        let (mut weighted, mut seen, mut sum_loss) = (0.0, 0usize, 0.0);
        for (b, chunk) in order.chunks(bs).enumerate().take(max_steps) {
            let batch: Vec<PatchGrid<T>> = chunk.iter().map(|&i| data[i].clone()).collect();
            let pos = self.epoch as f64 + b as f64 / steps_per_epoch as f64;
            let lr = lr_at(pos, &self.config.schedule);
            let rec = self.train_step(&batch, lr)?;
            log::debug!("epoch {} step {} lr {:.3e} loss {:.6}", rec.epoch, rec.step, lr, rec.loss);
            weighted += rec.loss * batch.len() as f64;
            seen += batch.len();
            sum_loss += rec.loss_sum;
            steps.push(rec);
        }
        let report = EpochReport { epoch: self.epoch, mean_loss: weighted / seen as f64, sum_loss, steps };
        self.epoch += 1;
        Ok(report)
    }

    /// Runs whole epochs until `steps` optimizer steps have been taken.
    pub fn run_steps(&mut self, data: &[PatchGrid<T>], steps: usize) -> Result<Vec<StepRecord>> {
        let mut out = Vec::with_capacity(steps);
        while out.len() < steps {
            let report = self.run_epoch(data, steps - out.len())?;
            out.extend(report.steps);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub mask_ratio: f64,
    pub num_masked: usize,
    pub num_survivors: usize,
    pub first_loss: f64,
    pub final_loss: f64,
}

/// Short pretraining runs from the same initial model, data and seed, one per ratio.
pub fn mask_ratio_sweep<T: Scalar>(
    init: &Model<T>,
    data: &[PatchGrid<T>],
    ratios: &[f64],
    config: &PretrainConfig,
    steps: usize,
) -> Result<Vec<SweepRow>> {
    let n = data.first().ok_or_else(|| Error::Input("empty sweep set".into()))?.n();
    let mut rows = Vec::with_capacity(ratios.len());
    for &alpha in ratios {
        let cfg = PretrainConfig { mask_ratio: alpha, ..config.clone() };
        let mut trainer = Pretrainer::new(init.clone(), cfg)?;
        let records = trainer.run_steps(data, steps)?;
        let num_masked = crate::patch::num_masked(n, alpha);
        rows.push(SweepRow {
            mask_ratio: alpha,
            num_masked,
            num_survivors: n - num_masked,
            first_loss: records.first().map_or(f64::NAN, |r| r.loss),
            final_loss: records.last().map_or(f64::NAN, |r| r.loss),
        });
        log::info!("mask ratio {alpha}: final loss {:.6}", rows.last().unwrap().final_loss);
    }
    Ok(rows)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut out = String::from("mask_ratio,num_masked,num_survivors,first_loss,final_loss\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.mask_ratio, r.num_masked, r.num_survivors, r.first_loss, r.final_loss
        ));
    }
    let mut f = std::fs::File::create(path).map_err(Error::io(path))?;
    f.write_all(out.as_bytes()).map_err(Error::io(path))
}

/// Original, masked-input and reconstructed views of one spectrogram.
#[derive(Debug, Clone)]
pub struct Reconstruction<T> {
    pub original: Spectrogram<T>,
    /// Masked patches replaced by the original's minimum value.
    pub masked: Spectrogram<T>,
    /// Survivor patches from the original, masked patches from the decoder.
    pub reconstructed: Spectrogram<T>,
    pub loss: f64,
}

pub fn reconstruct<T: Scalar>(model: &Model<T>, spec: &Spectrogram<T>, plan: &MaskPlan) -> Result<Reconstruction<T>> {
    let grid = patchify(spec, model.config.patch)?;
    let g = Graph::new();
    let fwd = model.pretrain_forward(&g, std::slice::from_ref(&grid), std::slice::from_ref(plan))?;
    let recon_all = g.value(fwd.recon_all);
    let floor = spec.values.data().iter().copied().fold(T::infinity(), T::min);
    let d = grid.patch_dim();
    let mut masked = grid.clone();
    let mut pasted = grid.clone();
    {
        let m = masked.patches.data_mut();
        for &i in &plan.masked_idx {
            m[i * d..(i + 1) * d].iter_mut().for_each(|v| *v = floor);
        }
    }
    {
        let r = pasted.patches.data_mut();
        for &i in &plan.masked_idx {
            r[i * d..(i + 1) * d].copy_from_slice(recon_all.row(i));
        }
    }
    Ok(Reconstruction {
        original: spec.clone(),
        masked: unpatchify(&masked),
        reconstructed: unpatchify(&pasted),
        loss: g.value(fwd.loss).item().as_f64(),
    })
}
