//! Command-line entry points.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};
use crate::finetune::{
    channel_ensemble_eval, evaluate, finetune_run, prepare_grids, EvalReport, FinetuneConfig, LabeledClip, TaskType,
};
use crate::frontend::{read_wav, write_pgm, write_spectrogram_csv, ChannelMode, Frontend, FrontendConfig, Spectrogram};
use crate::io::{read_checkpoint, save_checkpoint, CheckpointError, CheckpointMeta, DatasetManifest, RunConfig, Split};
use crate::metrics::kfold_runner;
use crate::model::{param_count, Model};
use crate::patch::{patchify, random_mask_seeded, PatchGrid};
use crate::pretrain::{mask_ratio_sweep, reconstruct, write_sweep_csv, Pretrainer};
use crate::scalar::{DType, Scalar};

#[derive(Parser, Debug)]
#[command(name = "maskspec", version, about = "Masked spectrogram pretraining and finetuning")]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Masked-reconstruction pretraining from a config file.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Finetune a pretrained encoder with a classification head.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Start from a random encoder instead of a checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        random_init: bool,
        /// Cross-validate over the manifest's `fold` column with this many folds.
        #[arg(long)]
        kfold: Option<u32>,
    },
    /// Evaluate a finetuned checkpoint on a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "multiclass")]
        task: String,
        /// Average logits over left, right and mean channel views.
        #[arg(long)]
        ensemble: bool,
        /// Report path; `.json` plus a sibling `.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Short pretraining runs over a grid of mask ratios.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated ratios.
        #[arg(long, value_delimiter = ',', default_values_t = default_ratios())]
        ratios: Vec<f64>,
        /// Optimizer steps per ratio.
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write original, masked and reconstructed spectrograms as CSV and PGM.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0.75)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print a checkpoint's tensors and metadata.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn default_ratios() -> Vec<f64> {
    (0..10).map(|i| (5 + 10 * i) as f64 / 100.0).collect()
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code: 0 on success, 2 for usage errors and missing inputs,
/// 1 otherwise.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    let missing = |s: &std::io::Error| s.kind() == std::io::ErrorKind::NotFound;
    match e {
        Error::Io { source, .. } if missing(source) => 2,
        Error::Checkpoint(CheckpointError::Io { source, .. }) if missing(source) => 2,
        Error::Config(_) => 2,
        _ => 1,
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Pretrain { config } => {
            let cfg = RunConfig::load(&config)?;
            match cfg.dtype {
                DType::Float32 => pretrain_cmd::<f32>(&cfg),
                DType::Float64 => pretrain_cmd::<f64>(&cfg),
            }
        }
        Command::Finetune { config, checkpoint, random_init, kfold } => {
            let cfg = RunConfig::load(&config)?;
            if checkpoint.is_none() && !random_init {
                return Err(Error::Config("finetune needs --checkpoint or --random-init".into()));
            }
            match cfg.dtype {
                DType::Float32 => finetune_cmd::<f32>(&cfg, checkpoint.as_deref(), kfold),
                DType::Float64 => finetune_cmd::<f64>(&cfg, checkpoint.as_deref(), kfold),
            }
        }
        Command::Eval { checkpoint, manifest, task, ensemble, out } => {
            let task = match task.as_str() {
                "multiclass" => TaskType::Multiclass,
                "multilabel" => TaskType::Multilabel,
                other => return Err(Error::Config(format!("unknown task {other:?} (multiclass | multilabel)"))),
            };
            eval_cmd(&checkpoint, &manifest, task, ensemble, out.as_deref())
        }
        Command::Sweep { config, ratios, steps, out } => {
            let cfg = RunConfig::load(&config)?;
            match cfg.dtype {
                DType::Float32 => sweep_cmd::<f32>(&cfg, &ratios, steps, &out),
                DType::Float64 => sweep_cmd::<f64>(&cfg, &ratios, steps, &out),
            }
        }
        Command::Reconstruct { checkpoint, wav, out_dir, alpha, seed } => {
            reconstruct_cmd(&checkpoint, &wav, &out_dir, alpha, seed)
        }
        Command::Inspect { checkpoint } => {
            print!("{}", inspect(&checkpoint)?);
            Ok(())
        }
    }
}

fn load_clips<T: Scalar>(entries: &[&crate::io::ManifestEntry]) -> Result<Vec<LabeledClip<T>>> {
    entries
        .iter()
        .map(|e| Ok(LabeledClip { clip: read_wav(&e.path)?, labels: e.labels.clone() }))
        .collect()
}

fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    if !path.exists() {
        return Err(Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "manifest not found"),
        });
    }
    DatasetManifest::load(path)
}

fn pretrain_grids<T: Scalar>(cfg: &RunConfig, frontend: &Frontend<T>) -> Result<Vec<PatchGrid<T>>> {
    let manifest = load_manifest(&cfg.manifest)?;
    let train = manifest.split(Split::Train);
    let entries = if train.is_empty() { manifest.entries.iter().collect() } else { train };
    if entries.is_empty() {
        return Err(Error::Input(format!("{}: no clips", cfg.manifest.display())));
    }
    let clips = load_clips::<T>(&entries)?;
    clips.iter().map(|c| Ok(patchify(&frontend.spectrogram(&c.clip, cfg.channel)?, cfg.patch)?)).collect()
}

fn meta(cfg: &RunConfig, model: &crate::model::ModelConfig, epoch: usize, loss: Option<f64>, step: Option<u64>) -> CheckpointMeta {
    CheckpointMeta { model: model.clone(), frontend: cfg.frontend(), epoch, seed: cfg.seed, loss, optimizer_step: step }
}

fn pretrain_cmd<T: Scalar>(cfg: &RunConfig) -> Result<()> {
    let frontend = Frontend::<T>::new(cfg.frontend());
    let grids = pretrain_grids(cfg, &frontend)?;
    let model = Model::<T>::new(cfg.model(), cfg.seed)?;
    log::info!("pretraining {} parameters on {} clips", model.num_params(), grids.len());
    let mut trainer = Pretrainer::new(model, cfg.pretrain())?;
    fs::create_dir_all(&cfg.checkpoint_dir).map_err(Error::io(&cfg.checkpoint_dir))?;
    let csv_path = cfg.checkpoint_dir.join("loss.csv");
    let mut csv = String::from("epoch,step,lr,loss,loss_sum\n");
    let mut last = None;
    for epoch in 0..cfg.epochs {
        let report = trainer.pretrain_epoch(&grids)?;
        for s in &report.steps {
            writeln!(csv, "{},{},{},{},{}", s.epoch, s.step, s.lr, s.loss, s.loss_sum).expect("string write");
        }
        fs::write(&csv_path, &csv).map_err(Error::io(&csv_path))?;
        log::info!("epoch {epoch}: mean loss {:.6}", report.mean_loss);
        last = Some(report.mean_loss);
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs {
            let path = cfg.checkpoint_dir.join(format!("epoch_{:04}.msks", epoch + 1));
            let m = meta(cfg, &trainer.model.config, epoch + 1, last, Some(trainer.optimizer.state.step));
            save_checkpoint(&path, &m, &trainer.model.params, Some(&trainer.optimizer.state))?;
        }
    }
    let path = cfg.checkpoint_dir.join("final.msks");
    let m = meta(cfg, &trainer.model.config, cfg.epochs, last, Some(trainer.optimizer.state.step));
    save_checkpoint(&path, &m, &trainer.model.params, Some(&trainer.optimizer.state))?;
    println!("wrote {} and {}", csv_path.display(), path.display());
    Ok(())
}

fn classifier<T: Scalar>(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(Model<T>, FrontendConfig)> {
    let c = cfg.finetune.num_classes;
    match checkpoint {
        Some(path) => {
            let ck = read_checkpoint::<T>(path)?;
            let model = ck.to_model_with(ck.meta.model.to_classifier(c))?;
            Ok((model, ck.meta.frontend.clone()))
        }
        None => Ok((Model::new(cfg.model().to_classifier(c), cfg.seed)?, cfg.frontend())),
    }
}

fn write_report(path: &Path, report: &impl serde::Serialize, csv: Option<String>) -> Result<()> {
    let json = serde_json::to_string_pretty(report).expect("report serialises");
    fs::write(path, json).map_err(Error::io(path))?;
    if let Some(csv) = csv {
        let csv_path = path.with_extension("csv");
        fs::write(&csv_path, csv).map_err(Error::io(&csv_path))?;
    }
    Ok(())
}

fn finetune_cmd<T: Scalar>(cfg: &RunConfig, checkpoint: Option<&Path>, kfold: Option<u32>) -> Result<()> {
    let ft = FinetuneConfig { seed: cfg.seed, ..cfg.finetune.clone() };
    let manifest = load_manifest(&cfg.manifest)?;
    manifest.check_labels(ft.num_classes)?;
    let (init, fe_cfg) = classifier::<T>(cfg, checkpoint)?;
    let frontend = Frontend::<T>::new(fe_cfg);
    fs::create_dir_all(&cfg.checkpoint_dir).map_err(Error::io(&cfg.checkpoint_dir))?;

    if let Some(k) = kfold {
        let clips = load_clips::<T>(&manifest.entries.iter().collect::<Vec<_>>())?;
        let folds: Vec<u32> = manifest
            .entries
            .iter()
            .map(|e| e.fold.ok_or_else(|| Error::Input(format!("{}: no fold", e.path.display()))))
            .collect::<Result<_>>()?;
        let report = kfold_runner::<Error>(&folds, k, |_, train, eval| {
            let pick = |idx: &[usize]| idx.iter().map(|&i| clips[i].clone()).collect::<Vec<_>>();
            let out = finetune_run(init.clone(), &frontend, &pick(train), &pick(eval), &ft, cfg.channel)?;
            Ok(out.report.accuracy.or(out.report.map).unwrap_or(f64::NAN))
        })?;
        let path = cfg.checkpoint_dir.join("kfold_report.json");
        write_report(&path, &report, None)?;
        println!("{k}-fold mean {:.4} ± {:.4}", report.mean, report.std);
        return Ok(());
    }

    let train = load_clips::<T>(&manifest.split(Split::Train))?;
    let eval = load_clips::<T>(&manifest.split(Split::Eval))?;
    let out = finetune_run(init, &frontend, &train, &eval, &ft, cfg.channel)?;
    let m = CheckpointMeta {
        model: out.model.config.clone(),
        frontend: frontend.config.clone(),
        epoch: ft.epochs,
        seed: cfg.seed,
        loss: out.history.last().map(|h| h.loss),
        optimizer_step: None,
    };
    let ck_path = cfg.checkpoint_dir.join("finetuned.msks");
    save_checkpoint(&ck_path, &m, &out.model.params, None)?;
    let report_path = cfg.checkpoint_dir.join("finetune_report.json");
    write_report(&report_path, &out.report, Some(out.report.to_csv()))?;
    print_report(&out.report);
    Ok(())
}

fn print_report(r: &EvalReport) {
    if let Some(a) = r.accuracy {
        println!("accuracy {a:.4}");
    }
    if let Some(m) = r.map {
        println!("mAP {m:.4}");
    }
}

fn eval_cmd(checkpoint: &Path, manifest: &Path, task: TaskType, ensemble: bool, out: Option<&Path>) -> Result<()> {
    let ck = read_checkpoint::<f32>(checkpoint)?;
    let classes = ck.meta.model.num_classes.ok_or_else(|| Error::Input("checkpoint has no classification head".into()))?;
    let model = ck.to_model()?;
    let manifest = load_manifest(manifest)?;
    manifest.check_labels(classes)?;
    let eval = manifest.split(Split::Eval);
    let entries = if eval.is_empty() { manifest.entries.iter().collect() } else { eval };
    let clips = load_clips::<f32>(&entries)?;
    let frontend = Frontend::<f32>::new(ck.meta.frontend.clone());
    let cfg = FinetuneConfig { num_classes: classes, task, ..FinetuneConfig::default() };
    let report = if ensemble {
        channel_ensemble_eval(&model, &frontend, &clips, &cfg)?.report
    } else {
        let grids = prepare_grids(&frontend, &clips, ChannelMode::Mean, model.config.patch)?;
        let labels: Vec<_> = clips.iter().map(|c| c.labels.clone()).collect();
        evaluate(&model, &grids, &labels, &cfg)?
    };
    print_report(&report);
    if let Some(path) = out {
        write_report(path, &report, Some(report.to_csv()))?;
    }
    Ok(())
}

fn sweep_cmd<T: Scalar>(cfg: &RunConfig, ratios: &[f64], steps: usize, out: &Path) -> Result<()> {
    let frontend = Frontend::<T>::new(cfg.frontend());
    let grids = pretrain_grids(cfg, &frontend)?;
    let init = Model::<T>::new(cfg.model(), cfg.seed)?;
    let rows = mask_ratio_sweep(&init, &grids, ratios, &cfg.pretrain(), steps)?;
    write_sweep_csv(out, &rows)?;
    println!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}

fn reconstruct_cmd(checkpoint: &Path, wav: &Path, out_dir: &Path, alpha: f64, seed: u64) -> Result<()> {
    let ck = read_checkpoint::<f32>(checkpoint)?;
    if ck.meta.model.decoder.is_none() {
        return Err(Error::Input("checkpoint has no decoder".into()));
    }
    let model = ck.to_model()?;
    let frontend = Frontend::<f32>::new(ck.meta.frontend.clone());
    let spec = frontend.spectrogram(&read_wav(wav)?, ChannelMode::Mean)?;
    let grid = patchify(&spec, model.config.patch)?;
    let plan = random_mask_seeded(grid.n(), alpha, seed)?;
    let r = reconstruct(&model, &spec, &plan)?;
    fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    let lo = spec.values.data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = spec.values.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let views: [(&str, &Spectrogram<f32>); 3] =
        [("original", &r.original), ("masked", &r.masked), ("reconstructed", &r.reconstructed)];
    for (name, s) in views {
        write_spectrogram_csv(&out_dir.join(format!("{name}.csv")), s)?;
        write_pgm(&out_dir.join(format!("{name}.pgm")), s, lo, hi)?;
    }
    println!(
        "{} frames x {} mels, {} of {} patches masked, masked-patch mse {:.6}",
        spec.n_frames(),
        spec.n_mels(),
        plan.num_masked(),
        plan.n,
        r.loss
    );
    Ok(())
}

/// Summary table for a checkpoint.
pub fn inspect(path: &Path) -> Result<String> {
    let ck = read_checkpoint::<f64>(path)?;
    let mut out = String::new();
    let m = &ck.meta;
    writeln!(out, "checkpoint  {}", path.display()).unwrap();
    writeln!(out, "dtype       {:?}", ck.dtype).unwrap();
    writeln!(out, "epoch       {}", m.epoch).unwrap();
    writeln!(out, "seed        {}", m.seed).unwrap();
    if let Some(l) = m.loss {
        writeln!(out, "loss        {l}").unwrap();
    }
    if let Some(s) = m.optimizer_step {
        writeln!(out, "opt step    {s}").unwrap();
    }
    let e = &m.model.encoder;
    writeln!(out, "encoder     depth {} heads {} emb {} ffn {}", e.depth, e.heads, e.emb, e.ffn).unwrap();
    if let Some(d) = &m.model.decoder {
        writeln!(out, "decoder     depth {} heads {} emb {} ffn {}", d.depth, d.heads, d.emb, d.ffn).unwrap();
    }
    if let Some(c) = m.model.num_classes {
        writeln!(out, "classes     {c}").unwrap();
    }
    writeln!(out).unwrap();
    let width = ck.param_tensors().map(|(n, _)| n.len()).max().unwrap_or(4).max(4);
    writeln!(out, "{:<width$}  {:>14}  {:>10}", "name", "shape", "count").unwrap();
    for (name, t) in ck.param_tensors() {
        writeln!(out, "{name:<width$}  {:>14}  {:>10}", format!("{:?}", t.shape()), t.len()).unwrap();
    }
    let total = ck.num_param_scalars();
    writeln!(out, "\ntotal parameters {total}").unwrap();
    let expected = param_count(&m.model, m.model.decoder.is_some());
    if expected != total {
        writeln!(out, "warning: config implies {expected} parameters").unwrap();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_are_nonzero() {
        assert_ne!(run(["maskspec", "frobnicate"]), 0);
        assert_ne!(run(["maskspec", "pretrain", "--bogus"]), 0);
        assert_ne!(run(["maskspec"]), 0);
    }

    #[test]
    fn missing_config_exits_2() {
        assert_eq!(run(["maskspec", "pretrain", "--config", "/nonexistent/run.toml"]), 2);
    }

    #[test]
    fn default_ratio_grid() {
        let r = default_ratios();
        assert_eq!(r.len(), 10);
        assert_eq!((r[0], r[9]), (0.05, 0.95));
    }
}
