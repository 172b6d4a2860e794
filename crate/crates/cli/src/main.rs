//! `mars` command line: train, evaluate, prune and report on configured
//! experiments.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data/file error,
//! 4 numerical divergence, 1 anything else.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mars_core::checkpoint::Checkpoint;
use mars_core::config::{self, DatasetSpec, ExperimentConfig, LayerSpec};
use mars_core::data::LabeledDataset;
use mars_core::masks::{self, RoundedMasks};
use mars_core::model::TensorizedModel;
use mars_core::prune;
use mars_core::rng::Rng;
use mars_core::trainer::Trainer;
use mars_core::{Error, Result};

const BUNDLED_CONFIGS: &[(&str, &str)] = &[
    ("mnist-2fc-soft", include_str!("../configs/mnist-2fc-soft.cfg")),
    ("mnist-2fc-hard", include_str!("../configs/mnist-2fc-hard.cfg")),
    ("lenet5-tucker", include_str!("../configs/lenet5-tucker.cfg")),
    ("toy-lowrank", include_str!("../configs/toy-lowrank.cfg")),
];

#[derive(Parser)]
#[command(
    name = "mars",
    about = "Tensorized models with automatic decomposition-rank selection",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from an experiment config (bundled name or path).
    Train {
        #[arg(long)]
        config: String,
        /// Override the config's random seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads for the tensor kernels.
        #[arg(long)]
        threads: Option<usize>,
        /// Override the config's output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Suppress per-epoch console output.
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on its dataset's test split (rounded masks).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Override the dataset directory stored in the checkpoint config.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        quiet: bool,
    },
    /// Round the masks, cut the cores, verify, and write the compact model.
    Prune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        quiet: bool,
    },
    /// Compare two checkpoints: parameters, compression, accuracy.
    Report {
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
        /// Evaluate accuracies on this dataset directory.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Measure wall-clock speed-up over a probe batch.
        #[arg(long)]
        timing: bool,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        quiet: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Argument(_) => 2,
        Error::Format { .. } | Error::Io(_) => 3,
        Error::Diverged(_) => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            threads,
            out_dir,
            quiet,
        } => {
            setup_threads(threads)?;
            cmd_train(&config, seed, out_dir, quiet)
        }
        Command::Eval {
            checkpoint,
            data_dir,
            threads,
            quiet,
        } => {
            setup_threads(threads)?;
            cmd_eval(&checkpoint, data_dir.as_deref(), quiet)
        }
        Command::Prune {
            checkpoint,
            out_dir,
            threads,
            quiet,
        } => {
            setup_threads(threads)?;
            cmd_prune(&checkpoint, out_dir, quiet)
        }
        Command::Report {
            before,
            after,
            data_dir,
            timing,
            threads,
            quiet,
        } => {
            setup_threads(threads)?;
            cmd_report(&before, &after, data_dir.as_deref(), timing, quiet)
        }
    }
}

fn setup_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Argument("--threads must be positive".into()));
        }
        mars_core::configure_threads(n)?;
    }
    Ok(())
}

/// A bundled config name or a path to a config file.
fn resolve_config(name_or_path: &str) -> Result<String> {
    if let Some((_, text)) = BUNDLED_CONFIGS.iter().find(|(n, _)| *n == name_or_path) {
        return Ok(text.to_string());
    }
    let path = Path::new(name_or_path);
    if path.exists() {
        return Ok(fs::read_to_string(path)?);
    }
    let names: Vec<&str> = BUNDLED_CONFIGS.iter().map(|(n, _)| *n).collect();
    Err(Error::Config(format!(
        "'{name_or_path}' is neither a file nor a bundled config (bundled: {})",
        names.join(", ")
    )))
}

fn build_model_for(cfg: &ExperimentConfig) -> Result<TensorizedModel> {
    let mut rng = Rng::from_seed(cfg.train.seed);
    config::build_model(&cfg.model, &cfg.train, &mut rng)
}

fn load_checkpoint_model(path: &Path) -> Result<(Checkpoint, ExperimentConfig, TensorizedModel)> {
    let cp = Checkpoint::load(path)?;
    let cfg = config::parse(&cp.config_text)?;
    let mut model = build_model_for(&cfg)?;
    cp.apply_to_model(&mut model)?;
    Ok((cp, cfg, model))
}

fn override_data_dir(cfg: &mut ExperimentConfig, data_dir: Option<&Path>) {
    if let (DatasetSpec::Mnist { dir }, Some(new_dir)) = (&mut cfg.dataset, data_dir) {
        *dir = new_dir.display().to_string();
    }
}

fn cmd_train(
    config_arg: &str,
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
    quiet: bool,
) -> Result<()> {
    let text = resolve_config(config_arg)?;
    let mut cfg = config::parse(&text)?;
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    if let Some(dir) = out_dir {
        cfg.output_dir = dir.display().to_string();
    }
    let config_text = config::serialize(&cfg);

    let (train_data, test_data) = config::load_dataset(&cfg.dataset)?;
    let model = build_model_for(&cfg)?;
    if !quiet {
        println!(
            "model: {} params ({} weights), dense reference {} params, initial compression {:.2}x",
            model.total_param_count(),
            model.weight_count(),
            model.dense_total_count(),
            model.dense_total_count() as f64 / model.total_param_count() as f64
        );
    }

    let out_dir = PathBuf::from(&cfg.output_dir);
    fs::create_dir_all(&out_dir)?;
    let mut metrics = std::io::BufWriter::new(fs::File::create(out_dir.join("metrics.log"))?);

    let mut trainer = Trainer::new(model, cfg.train.clone(), train_data.len())?;
    while trainer.epoch < trainer.cfg.epochs {
        let summary = trainer.run_epoch(&train_data, &mut metrics)?;
        Checkpoint::capture(&trainer, config_text.clone())
            .save(&out_dir.join("model.ckpt"))?;
        if !quiet {
            println!(
                "epoch {:>3}  loss {:>12.4}  train_acc {:.4}  expected_compression {:>8.2}x  tau {:.4}",
                summary.epoch,
                summary.mean_loss,
                summary.train_accuracy,
                summary.expected_compression,
                summary.tau
            );
        }
    }

    let rounded = masks::round_masks(&trainer.model.masks);
    let mask_values: Vec<Vec<f64>> = trainer
        .model
        .masks
        .iter()
        .map(|(id, _)| rounded.values(id))
        .collect();
    let test_acc = trainer.model.accuracy(
        &test_data.inputs,
        &test_data.labels,
        if mask_values.is_empty() {
            None
        } else {
            Some(&mask_values)
        },
        512,
    )?;
    writeln!(metrics, "type=final test_acc={test_acc}")?;
    metrics.flush()?;
    println!("test accuracy (rounded masks) = {test_acc:.4}");
    println!("checkpoint: {}", out_dir.join("model.ckpt").display());
    println!("metrics:    {}", out_dir.join("metrics.log").display());
    Ok(())
}

fn load_eval_split(cfg: &ExperimentConfig) -> Result<LabeledDataset> {
    let (_, test) = config::load_dataset(&cfg.dataset)?;
    Ok(test)
}

fn cmd_eval(checkpoint: &Path, data_dir: Option<&Path>, quiet: bool) -> Result<()> {
    let (_, mut cfg, model) = load_checkpoint_model(checkpoint)?;
    override_data_dir(&mut cfg, data_dir);
    let test = load_eval_split(&cfg)?;
    let rounded = masks::round_masks(&model.masks);
    let mask_values: Vec<Vec<f64>> = model.masks.iter().map(|(id, _)| rounded.values(id)).collect();
    let acc = model.accuracy(
        &test.inputs,
        &test.labels,
        if mask_values.is_empty() {
            None
        } else {
            Some(&mask_values)
        },
        512,
    )?;
    if quiet {
        println!("{acc:.4}");
    } else {
        println!("accuracy = {acc:.4} ({} test samples)", test.len());
    }
    Ok(())
}

/// Rewrite the stored ranks of each decomposed layer to the kept counts, so
/// the pruned checkpoint rebuilds the compact architecture.
fn pruned_config(
    cfg: &ExperimentConfig,
    model: &TensorizedModel,
    rounded: &RoundedMasks,
) -> ExperimentConfig {
    let mut out = cfg.clone();
    for (spec, layer) in out.model.layers.iter_mut().zip(&model.layers) {
        let ids = layer.mask_ids();
        match spec {
            LayerSpec::TTLinear { ranks, .. } => {
                *ranks = ids.iter().map(|&id| rounded.kept_count(id)).collect();
            }
            LayerSpec::LowRank { rank, .. } => {
                *rank = rounded.kept_count(ids[0]);
            }
            LayerSpec::Tucker2Conv { r1, r2, .. } => {
                *r1 = rounded.kept_count(ids[0]);
                *r2 = rounded.kept_count(ids[1]);
            }
            _ => {}
        }
    }
    out
}

fn cmd_prune(checkpoint: &Path, out_dir: Option<PathBuf>, quiet: bool) -> Result<()> {
    let (cp, cfg, model) = load_checkpoint_model(checkpoint)?;
    let out_dir = out_dir.unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    fs::create_dir_all(&out_dir)?;

    let rounded = masks::round_masks(&model.masks);
    let (compact, report) = prune::prune(&model, &rounded)?;

    let compact_cfg = pruned_config(&cfg, &model, &rounded);
    let compact_text = config::serialize(&compact_cfg);
    let compact_cp = Checkpoint {
        config_text: compact_text,
        epoch: cp.epoch,
        global_step: cp.global_step,
        rng: cp.rng.clone(),
        params: compact.param_tensors().into_iter().cloned().collect(),
        masks: compact
            .masks
            .iter()
            .map(|(_, m)| (m.name.clone(), m.logits.clone()))
            .collect(),
        adam_m: compact
            .param_tensors()
            .iter()
            .map(|p| mars_core::DenseTensor::zeros(p.dims()))
            .collect(),
        adam_v: compact
            .param_tensors()
            .iter()
            .map(|p| mars_core::DenseTensor::zeros(p.dims()))
            .collect(),
        adam_t: 0,
    };
    let ckpt_path = out_dir.join("pruned.ckpt");
    compact_cp.save(&ckpt_path)?;

    let rendered = prune::render_report(&report);
    let report_path = out_dir.join("prune_report.txt");
    fs::write(&report_path, &rendered)?;

    if !quiet {
        print!("{rendered}");
    }
    println!(
        "pruned {} -> {} params ({:.2}x -> {:.2}x vs dense); max deviation {:e}",
        report.params_before,
        report.params_after,
        report.model_compression_before,
        report.model_compression_after,
        report.max_deviation
    );
    println!("compact checkpoint: {}", ckpt_path.display());
    println!("report:             {}", report_path.display());
    Ok(())
}

fn cmd_report(
    before: &Path,
    after: &Path,
    data_dir: Option<&Path>,
    timing: bool,
    quiet: bool,
) -> Result<()> {
    let (_, mut cfg_before, model_before) = load_checkpoint_model(before)?;
    let (_, _, model_after) = load_checkpoint_model(after)?;

    let accuracy = |model: &TensorizedModel| -> Result<Option<f64>> {
        let mut cfg = cfg_before.clone();
        override_data_dir(&mut cfg, data_dir);
        match config::load_dataset(&cfg.dataset) {
            Ok((_, test)) => {
                let rounded = masks::round_masks(&model.masks);
                let values: Vec<Vec<f64>> =
                    model.masks.iter().map(|(id, _)| rounded.values(id)).collect();
                Ok(Some(model.accuracy(
                    &test.inputs,
                    &test.labels,
                    if values.is_empty() { None } else { Some(&values) },
                    512,
                )?))
            }
            Err(_) => Ok(None),
        }
    };

    let dense = model_before.dense_total_count();
    let row = |name: &str, model: &TensorizedModel, acc: Option<f64>| {
        let params = model.total_param_count();
        let weights = model.weight_count();
        let acc_text = acc.map_or("n/a".to_string(), |a| format!("{a:.4}"));
        println!(
            "{name:<8} {params:>10} {weights:>10} {:>12.2}x {:>14.2}x {acc_text:>9}",
            dense as f64 / params as f64,
            model_before.dense_weight_count() as f64 / weights as f64,
        );
    };

    if !quiet {
        println!(
            "{:<8} {:>10} {:>10} {:>13} {:>15} {:>9}",
            "model", "params", "weights", "compression", "w-compression", "accuracy"
        );
    }
    let acc_before = accuracy(&model_before)?;
    let acc_after = accuracy(&model_after)?;
    row("before", &model_before, acc_before);
    row("after", &model_after, acc_after);

    if timing {
        let speedup = prune::measure_speedup(&model_before, &model_after)?;
        println!("speedup = {speedup:.2}x (median of 5 probe passes)");
    }
    Ok(())
}
