//! Command-line front end: `train`, `eval`, `viz-masks` and `check`.
//!
//! Every command prints its resolved configuration before doing any work so
//! a log is enough to reproduce the run.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use crate::check::{run_checks, CheckOptions, Level};
use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::data::{read_image, write_labels};
use crate::dca::MaskFn;
use crate::error::{DcaError, Result};
use crate::experiment::{train_and_evaluate, Splits, REPORT_FILE};
use crate::infer::{predict, DEFAULT_SCALES};
use crate::metrics::{ConfusionMatrix, EvalReport};
use crate::network::{Model, IGNORE_INDEX};
use crate::viz::{export_masks, VizOptions};

#[derive(Debug, Parser)]
#[command(name = "dcanet", version, about = "Train, evaluate and inspect dense context-aware segmentation networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and evaluate it on the validation split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the validation split.
    Eval(EvalArgs),
    /// Write the attention masks of every DCA module for one image.
    VizMasks(VizArgs),
    /// Run the built-in verification suite.
    Check(CheckArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON experiment config; defaults are used for anything it omits.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted overrides applied after the config file, e.g. `train.max_iter=50`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Run directory for the resolved config, metric log, checkpoints and report.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Evaluation scales: comma-separated factors, or `ms` for the 7-scale set.
    #[arg(long, value_parser = parse_scales)]
    pub scales: Option<Scales>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    /// Config to evaluate with. Defaults to the one stored in the checkpoint.
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Where to write the report; defaults to the checkpoint's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = parse_scales)]
    pub scales: Option<Scales>,
    /// Also write predicted label maps.
    #[arg(long)]
    pub save_predictions: bool,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    pub checkpoint: PathBuf,
    /// RGB or grayscale PNG.
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Also write every mask channel separately.
    #[arg(long)]
    pub per_channel: bool,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long, default_value = "fast")]
    pub level: Level,
    /// Fault injection: replace the mask sigmoid (`tanh`).
    #[arg(long, hide = true)]
    pub mutate_mask: Option<String>,
}

/// Inference scales parsed from the command line.
#[derive(Clone, Debug, PartialEq)]
pub struct Scales(pub Vec<f64>);

/// `ms` or a comma-separated list of positive factors.
pub fn parse_scales(s: &str) -> std::result::Result<Scales, String> {
    if s == "ms" {
        return Ok(Scales(DEFAULT_SCALES.to_vec()));
    }
    let scales = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("bad scale `{p}`: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if scales.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
        return Err("scales must be positive".into());
    }
    Ok(Scales(scales))
}

/// Runs a parsed command and maps errors to a nonzero exit code.
pub fn run(cli: Cli) -> ExitCode {
    let result = match cli.command {
        Command::Train(a) => train_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::VizMasks(a) => viz_cmd(&a),
        Command::Check(a) => check_cmd(&a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn resolve(args: &ConfigArgs, base: Option<ExperimentConfig>) -> Result<ExperimentConfig> {
    let cfg = match (&args.config, base) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(base)) => base,
        (None, None) => ExperimentConfig::default(),
    };
    cfg.with_overrides(&args.overrides)
}

fn echo(cfg: &ExperimentConfig) {
    println!("resolved config (digest {}):\n{}", cfg.digest(), cfg.to_json());
}

fn train_cmd(a: &TrainArgs) -> Result<bool> {
    let mut cfg = resolve(&a.config, None)?;
    if let Some(seed) = a.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(scales) = &a.scales {
        cfg.eval.scales = scales.0.clone();
    }
    cfg.validate()?;
    echo(&cfg);
    let splits = Splits::from_config(&cfg)?;
    let run = train_and_evaluate(&cfg, &splits, Some(&a.out))?;
    if let (Some(path), Some(d)) = (&run.summary.final_checkpoint, &run.summary.final_digest) {
        println!("checkpoint {} (sha256 {d})", path.display());
    }
    println!(
        "mIoU {:.2}%  pixel acc {:.2}%  ({:.0}s); report in {}",
        100.0 * run.report.mean_iou,
        100.0 * run.report.pixel_acc,
        run.seconds,
        a.out.join(REPORT_FILE).display()
    );
    Ok(true)
}

/// Dotted paths whose values differ between two JSON documents.
pub fn json_diff(a: &Value, b: &Value) -> Vec<String> {
    fn walk(a: &Value, b: &Value, path: &str, out: &mut Vec<String>) {
        match (a, b) {
            (Value::Object(x), Value::Object(y)) => {
                let keys: std::collections::BTreeSet<&String> = x.keys().chain(y.keys()).collect();
                for k in keys {
                    let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                    walk(x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null), &p, out);
                }
            }
            _ if a != b => out.push(format!("{path}: {a} vs {b}")),
            _ => {}
        }
    }
    let mut out = Vec::new();
    walk(a, b, "", &mut out);
    out
}

/// Loads a checkpoint and the config to rebuild it with. A config given on the
/// command line must agree with the stored one on the `model` section.
fn load_model(path: &Path, args: &ConfigArgs) -> Result<(Model, ExperimentConfig)> {
    let ckpt = checkpoint::load(path)?;
    let stored: Option<ExperimentConfig> = serde_json::from_value(ckpt.config.clone()).ok();
    let cfg = resolve(args, stored.clone())?;
    if let Some(stored) = &stored {
        let diff = json_diff(&serde_json::to_value(&stored.model)?, &serde_json::to_value(&cfg.model)?);
        if !diff.is_empty() {
            return Err(DcaError::CheckpointMismatch(format!(
                "model config differs from the one stored in {}:\n  model.{}",
                path.display(),
                diff.join("\n  model.")
            )));
        }
    } else if args.config.is_none() {
        return Err(DcaError::CheckpointMismatch(format!(
            "{} stores no experiment config; pass --config",
            path.display()
        )));
    }
    Ok((Model::from_checkpoint(&cfg.model, &ckpt)?, cfg))
}

fn eval_cmd(a: &EvalArgs) -> Result<bool> {
    let (model, mut cfg) = load_model(&a.checkpoint, &a.config)?;
    if let Some(scales) = &a.scales {
        cfg.eval.scales = scales.0.clone();
    }
    cfg.eval.save_predictions |= a.save_predictions;
    cfg.validate()?;
    echo(&cfg);
    let out = match &a.out {
        Some(dir) => dir.clone(),
        None => a.checkpoint.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf),
    };
    fs::create_dir_all(&out)?;
    let val = cfg.data.val_set()?;
    let preds = predict(&model, &val, &cfg.eval.scales, cfg.eval.batch_size)?;
    let mut cm = ConfusionMatrix::new(cfg.model.num_classes);
    for (p, s) in preds.iter().zip(&val.samples) {
        cm.accumulate(p, &s.labels, IGNORE_INDEX)?;
    }
    let report = EvalReport::from_matrix(&cm, cfg.digest())?;
    fs::write(out.join(REPORT_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
    if cfg.eval.save_predictions {
        let dir = out.join("predictions");
        fs::create_dir_all(&dir)?;
        for (i, (p, s)) in preds.iter().zip(&val.samples).enumerate() {
            write_labels(&dir.join(format!("{i:04}.png")), s.width(), s.height(), p)?;
        }
    }
    println!(
        "mIoU {:.2}%  pixel acc {:.2}%  over {} pixels at scales {:?}; report in {}",
        100.0 * report.mean_iou,
        100.0 * report.pixel_acc,
        report.num_pixels,
        cfg.eval.scales,
        out.join(REPORT_FILE).display()
    );
    Ok(true)
}

fn viz_cmd(a: &VizArgs) -> Result<bool> {
    let (model, cfg) = load_model(&a.checkpoint, &a.config)?;
    echo(&cfg);
    let image = read_image(&a.image)?;
    let out = export_masks(&model, &image, &a.out, &VizOptions { per_channel: a.per_channel })?;
    for p in &out.masks {
        println!("{}", p.display());
    }
    println!("{}", out.prediction.display());
    Ok(true)
}

fn check_cmd(a: &CheckArgs) -> Result<bool> {
    let mask_fn = match a.mutate_mask.as_deref() {
        None | Some("sigmoid") => MaskFn::Sigmoid,
        Some("tanh") => MaskFn::Tanh,
        Some(other) => return Err(crate::error::invalid(format!("unknown mask mutation `{other}`"))),
    };
    let opts = CheckOptions { level: a.level, mask_fn };
    println!("check level {:?}, mask {:?}", opts.level, opts.mask_fn);
    let report = run_checks(&opts);
    println!("{report}");
    Ok(report.passed())
}
