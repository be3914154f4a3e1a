//! Supervised finetuning of the encoder with a linear head: augmentations,
//! layer-wise lr decay, evaluation and channel ensembling.

mod augment;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

pub use augment::{mixup, time_roll};

use crate::error::{Error, Result};
use crate::frontend::{standardize, ChannelMode, Frontend, WaveformClip};
use crate::metrics::{self, argmax, MapReport};
use crate::model::Model;
use crate::patch::{patchify, PatchGrid};
use crate::pretrain::{lr_at, AdamW, AdamWConfig, ScheduleConfig};
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamStore, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskType {
    /// Sigmoid per class with binary cross-entropy.
    Multilabel,
    /// Softmax with cross-entropy; exactly one label per clip.
    #[default]
    Multiclass,
}

/// Where mixup is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixupMode {
    None,
    Waveform,
    Spectrogram,
    /// Waveform on even steps, spectrogram on odd steps.
    #[default]
    Alternate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub num_classes: usize,
    pub task: TaskType,
    pub epochs: usize,
    pub warmup_epochs: f64,
    pub layer_decay: f64,
    pub mixup_alpha: f64,
    pub mixup: MixupMode,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub time_roll: bool,
    /// Evaluate every this many epochs; 0 evaluates only at the end.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            num_classes: 2,
            task: TaskType::Multiclass,
            epochs: 100,
            warmup_epochs: 5.0,
            layer_decay: 0.75,
            mixup_alpha: 0.3,
            mixup: MixupMode::Alternate,
            lr: 1e-4,
            weight_decay: 0.05,
            batch_size: 8,
            time_roll: true,
            eval_every: 0,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
            return Err(format!("layer_decay {} outside (0, 1]", self.layer_decay));
        }
        if !(self.mixup_alpha >= 0.0) {
            return Err(format!("mixup_alpha {} is negative", self.mixup_alpha));
        }
        if self.num_classes == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err("num_classes, batch_size and epochs must be positive".into());
        }
        self.schedule().validate()
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            warmup_epochs: self.warmup_epochs.min(self.epochs as f64 - 1.0).max(0.0),
            total_epochs: self.epochs as f64,
            peak_lr: self.lr,
            floor_lr: 0.0,
        }
    }
}

/// `base_lr · decay^(num_layers − layer_index)`.
pub fn layerwise_lr(base_lr: f64, decay: f64, layer_index: usize, num_layers: usize) -> f64 {
    base_lr * decay.powi((num_layers - layer_index.min(num_layers)) as i32)
}

/// Patch embedding is layer 0, encoder block `i` is `i + 1`, the final norm
/// and head are `depth + 1`.
pub fn layer_index(name: &str, depth: usize) -> usize {
    if name.starts_with("encoder.patch_embed") {
        return 0;
    }
    if let Some(rest) = name.strip_prefix("encoder.blocks.") {
        if let Some(i) = rest.split('.').next().and_then(|s| s.parse::<usize>().ok()) {
            return i + 1;
        }
    }
    depth + 1
}

/// Per-parameter lr multipliers in store order.
pub fn layer_scales<T: Scalar>(params: &ParamStore<T>, depth: usize, decay: f64) -> Vec<f64> {
    params.iter().map(|(_, p)| layerwise_lr(1.0, decay, layer_index(&p.name, depth), depth + 1)).collect()
}

/// Fails if any decoder parameter is bound in `g`.
pub fn audit_graph<T: Scalar>(g: &Graph<T>, params: &ParamStore<T>) -> Result<()> {
    for id in g.bound_params() {
        let name = &params.get(id).name;
        if name.starts_with("decoder.") {
            return Err(Error::Input(format!("decoder parameter {name} reached the finetune graph")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledClip<T> {
    pub clip: WaveformClip<T>,
    pub labels: Vec<usize>,
}

fn target_row<T: Scalar>(labels: &[usize], classes: usize, task: TaskType) -> Result<Vec<T>> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Input(format!("label {bad} >= num_classes {classes}")));
    }
    if task == TaskType::Multiclass && labels.len() != 1 {
        return Err(Error::Input(format!("multiclass clip needs one label, got {labels:?}")));
    }
    let mut row = vec![T::zero(); classes];
    for &l in labels {
        row[l] = T::one();
    }
    Ok(row)
}

fn grid_of<T: Scalar>(frontend: &Frontend<T>, samples: &[T], p: usize) -> Result<PatchGrid<T>> {
    Ok(patchify(&frontend.spectrogram_of_standardized(samples)?, p)?)
}

fn logits_rows<T: Scalar>(g: &Graph<T>, v: Var) -> Vec<Vec<f64>> {
    let t = g.value(v);
    (0..t.rows()).map(|i| t.row(i).iter().map(|x| x.as_f64()).collect()).collect()
}

/// Logits for a set of grids, `batch` clips at a time.
pub fn predict<T: Scalar>(model: &Model<T>, grids: &[PatchGrid<T>], batch: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(grids.len());
    for chunk in grids.chunks(batch.max(1)) {
        let g = Graph::new();
        let logits = model.classify(&g, chunk)?;
        out.extend(logits_rows(&g, logits));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub num_clips: usize,
    pub accuracy: Option<f64>,
    pub map: Option<f64>,
    pub per_class_ap: Vec<Option<f64>>,
    /// `confusion[label][pred]`, multiclass only.
    pub confusion: Option<Vec<Vec<usize>>>,
}

impl EvalReport {
    pub fn from_logits(logits: &[Vec<f64>], labels: &[Vec<usize>], classes: usize, task: TaskType) -> Result<Self> {
        if logits.len() != labels.len() || logits.is_empty() {
            return Err(Error::Input(format!("{} logit rows for {} clips", logits.len(), labels.len())));
        }
        let hot: Vec<Vec<bool>> = labels.iter().map(|ls| (0..classes).map(|c| ls.contains(&c)).collect()).collect();
        let (map, per_class_ap) = match metrics::mean_ap(logits, &hot) {
            Ok(MapReport { per_class, map }) => (Some(map), per_class),
            Err(metrics::MetricsError::NoValidClass) => (None, vec![None; classes]),
            Err(e) => return Err(Error::Input(e.to_string())),
        };
        let (accuracy, confusion) = match task {
            TaskType::Multiclass => {
                let preds: Vec<usize> = logits.iter().map(|r| argmax(r)).collect();
                let truth: Vec<usize> = labels.iter().map(|l| l[0]).collect();
                let acc = metrics::accuracy(&preds, &truth).map_err(|e| Error::Input(e.to_string()))?;
                (Some(acc), Some(metrics::confusion(&preds, &truth, classes)))
            }
            TaskType::Multilabel => (None, None),
        };
        Ok(Self { num_clips: logits.len(), accuracy, map, per_class_ap, confusion })
    }

    /// Per-class AP as `class,ap` lines, empty for skipped classes.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,ap\n");
        for (c, ap) in self.per_class_ap.iter().enumerate() {
            out.push_str(&format!("{c},{}\n", ap.map(|v| v.to_string()).unwrap_or_default()));
        }
        out
    }
}

/// Precomputed grids for evaluation under one channel view.
pub fn prepare_grids<T: Scalar>(
    frontend: &Frontend<T>,
    clips: &[LabeledClip<T>],
    mode: ChannelMode,
    p: usize,
) -> Result<Vec<PatchGrid<T>>> {
    clips.iter().map(|c| Ok(patchify(&frontend.spectrogram(&c.clip, mode)?, p)?)).collect()
}

pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    grids: &[PatchGrid<T>],
    labels: &[Vec<usize>],
    cfg: &FinetuneConfig,
) -> Result<EvalReport> {
    let logits = predict(model, grids, cfg.batch_size)?;
    EvalReport::from_logits(&logits, labels, cfg.num_classes, cfg.task)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub eval: Option<EvalReport>,
}

pub struct FinetuneOutcome<T> {
    pub model: Model<T>,
    pub history: Vec<FinetuneEpoch>,
    pub report: EvalReport,
}

/// Full-model finetuning of a classifier (encoder plus head, no decoder).
pub fn finetune_run<T: Scalar>(
    mut model: Model<T>,
    frontend: &Frontend<T>,
    train: &[LabeledClip<T>],
    eval: &[LabeledClip<T>],
    cfg: &FinetuneConfig,
    channel: ChannelMode,
) -> Result<FinetuneOutcome<T>> {
    cfg.validate().map_err(Error::Config)?;
    if model.config.num_classes != Some(cfg.num_classes) {
        return Err(Error::Input(format!(
            "model head has {:?} classes, config {}",
            model.config.num_classes, cfg.num_classes
        )));
    }
    if train.is_empty() || eval.is_empty() {
        return Err(Error::Input("finetuning needs train and eval clips".into()));
    }
    let p = model.config.patch;
    let depth = model.config.encoder.depth;
    let targets: Vec<Vec<T>> =
        train.iter().map(|c| target_row(&c.labels, cfg.num_classes, cfg.task)).collect::<Result<_>>()?;
    for c in eval {
        target_row::<T>(&c.labels, cfg.num_classes, cfg.task)?;
    }
    let waves: Vec<Vec<T>> = train
        .iter()
        .map(|c| Ok(standardize(&c.clip, channel, &frontend.config)?.channels.remove(0)))
        .collect::<Result<_>>()?;
    let eval_grids = prepare_grids(frontend, eval, channel, p)?;
    let eval_labels: Vec<Vec<usize>> = eval.iter().map(|c| c.labels.clone()).collect();

    let mut opt = AdamW::new(AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() }, &model.params);
    opt.set_lr_scale(layer_scales(&model.params, depth, cfg.layer_decay))?;
    let schedule = cfg.schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let beta = (cfg.mixup_alpha > 0.0).then(|| Beta::new(cfg.mixup_alpha, cfg.mixup_alpha).expect("positive alpha"));
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_acc, mut seen) = (0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut xs: Vec<Vec<T>> = chunk.iter().map(|&i| waves[i].clone()).collect();
            let mut ys: Vec<Vec<T>> = chunk.iter().map(|&i| targets[i].clone()).collect();
            if cfg.time_roll {
                for x in &mut xs {
                    let shift = rng.random_range(0..x.len()) as isize;
                    *x = time_roll(x, shift);
                }
            }
            let stage = match (cfg.mixup, &beta) {
                (MixupMode::None, _) | (_, None) => None,
                (MixupMode::Waveform, _) => Some(true),
                (MixupMode::Spectrogram, _) => Some(false),
                (MixupMode::Alternate, _) => Some(step % 2 == 0),
            };
            let mix_plan = stage.map(|on_wave| {
                let lambda = beta.as_ref().expect("beta present").sample(&mut rng);
                let mut partner: Vec<usize> = (0..chunk.len()).collect();
                partner.shuffle(&mut rng);
                (on_wave, lambda, partner)
            });
            if let Some((on_wave, lambda, partner)) = &mix_plan {
                ys = (0..ys.len()).map(|i| augment::mix(&ys[i], &ys[partner[i]], *lambda)).collect();
                if *on_wave {
                    xs = (0..xs.len()).map(|i| augment::mix(&xs[i], &xs[partner[i]], *lambda)).collect();
                }
            }
            let mut grids: Vec<PatchGrid<T>> = xs.iter().map(|x| grid_of(frontend, x, p)).collect::<Result<_>>()?;
            if let Some((false, lambda, partner)) = &mix_plan {
                let mixed: Vec<Tensor<T>> = (0..grids.len())
                    .map(|i| {
                        let d = augment::mix(grids[i].patches.data(), grids[partner[i]].patches.data(), *lambda);
                        Tensor::new(grids[i].patches.shape(), d)
                    })
                    .collect::<std::result::Result<_, _>>()?;
                for (g, m) in grids.iter_mut().zip(mixed) {
                    g.patches = m;
                }
            }

            let y = Tensor::new([ys.len(), cfg.num_classes], ys.concat())?;
            let g = Graph::new();
            let logits = model.classify(&g, &grids)?;
            let loss = match cfg.task {
                TaskType::Multiclass => g.softmax_cross_entropy(logits, &y)?,
                TaskType::Multilabel => g.bce_with_logits(logits, &y)?,
            };
            audit_graph(&g, &model.params)?;
            let value = g.value(loss).item().as_f64();
            let grads = g.backward(loss).map_err(|e| match e {
                TensorError::NonFinite { .. } => Error::NonFiniteLoss { epoch, step },
                other => other.into(),
            })?;
            grads.accumulate_into(&mut model.params);
            let lr = lr_at(epoch as f64 + b as f64 / steps_per_epoch as f64, &schedule);
            opt.step(&mut model.params, lr)?;
            loss_acc += value * chunk.len() as f64;
            seen += chunk.len();
            step += 1;
        }
        let loss = loss_acc / seen as f64;
        let eval_now = cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0;
        let report = if eval_now { Some(evaluate(&model, &eval_grids, &eval_labels, cfg)?) } else { None };
        log::info!(
            "finetune epoch {epoch} loss {loss:.5}{}",
            report.as_ref().and_then(|r| r.accuracy).map(|a| format!(" acc {a:.3}")).unwrap_or_default()
        );
        history.push(FinetuneEpoch { epoch, loss, eval: report });
    }
    let report = evaluate(&model, &eval_grids, &eval_labels, cfg)?;
    Ok(FinetuneOutcome { model, history, report })
}

/// Element-wise mean of several logit rows.
pub fn ensemble_logits(views: &[Vec<f64>]) -> Vec<f64> {
    let k = views.len() as f64;
    let width = views.first().map_or(0, Vec::len);
    (0..width).map(|c| views.iter().map(|v| v[c]).sum::<f64>() / k).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleReport {
    pub logits: Vec<Vec<f64>>,
    pub report: EvalReport,
}

/// Averages logits of the left, right and mean-channel views per clip.
/// Mono clips contribute their single view.
pub fn channel_ensemble_eval<T: Scalar>(
    model: &Model<T>,
    frontend: &Frontend<T>,
    clips: &[LabeledClip<T>],
    cfg: &FinetuneConfig,
) -> Result<EnsembleReport> {
    let p = model.config.patch;
    let mut logits = Vec::with_capacity(clips.len());
    for c in clips {
        let modes: &[ChannelMode] = if c.clip.num_channels() == 2 {
            &[ChannelMode::Left, ChannelMode::Right, ChannelMode::Mean]
        } else {
            log::warn!("mono clip: channel ensemble falls back to a single view");
            &[ChannelMode::Mean]
        };
        let grids = modes
            .iter()
            .map(|&m| Ok(patchify(&frontend.spectrogram(&c.clip, m)?, p)?))
            .collect::<Result<Vec<_>>>()?;
        logits.push(ensemble_logits(&predict(model, &grids, modes.len())?));
    }
    let labels: Vec<Vec<usize>> = clips.iter().map(|c| c.labels.clone()).collect();
    let report = EvalReport::from_logits(&logits, &labels, cfg.num_classes, cfg.task)?;
    Ok(EnsembleReport { logits, report })
}
