//! Command-line interface: generate, derive, train, eval, verify.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{derive_chips, generate_synthetic, ChipDataset, DeriveConfig, Split, SyntheticConfig};
use crate::error::{Error, Result};
use crate::layers::LayerMode;
use crate::metrics::{AdjustmentReport, ClassPrior, EvalReport, predict_classes};
use crate::models::{load_checkpoint, save_checkpoint, Architecture, ModelConfig, ModelGraph, Stem};
use crate::train::{collect_logits, train, Augmentation, TrainConfig};
use crate::verify::{run_suite, Suite, VerifyOptions};

#[derive(Parser, Debug)]
#[command(name = "cdsnet", about = "Complex-valued co-domain symmetric networks for multispectral chips", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic imbalanced multispectral chip dataset.
    Generate(GenerateArgs),
    /// Derive 32x32 chips from annotated 8-band scenes.
    Derive(DeriveArgs),
    /// Train a model and keep the best-validation checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint, optionally with post-hoc logit adjustment.
    Eval(EvalArgs),
    /// Run the property suites (symmetry laws, gradient checks, formats).
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long = "head-count", default_value_t = 5000)]
    pub head_count: usize,
    #[arg(long, default_value_t = 60.0)]
    pub imbalance: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.10)]
    pub noise: f32,
    #[arg(long = "test-per-class")]
    pub test_per_class: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DeriveArgs {
    /// JSON annotation file; scene paths are resolved relative to it.
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long, default_value_t = 5000)]
    pub cap: usize,
    #[arg(long = "val-fraction", default_value_t = 0.1)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// cds-large | cds-small | baseline:<stem>
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub data: PathBuf,
    /// JSON config file with optional "model" and "train" sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long = "wd")]
    pub weight_decay: Option<f64>,
    #[arg(long = "total-batches")]
    pub total_batches: Option<u64>,
    #[arg(long = "validate-every")]
    pub validate_every: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// none | flips-crops (default: none for cds models, flips-crops for baselines)
    #[arg(long)]
    pub augmentation: Option<String>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "val")]
    pub split: String,
    /// on | off
    #[arg(long = "logit-adjust", default_value = "off")]
    pub logit_adjust: String,
    #[arg(long, default_value_t = 1.0)]
    pub tau: f32,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long, default_value = "all")]
    pub suite: String,
    #[arg(long, default_value_t = 200)]
    pub trials: usize,
    #[arg(long, default_value_t = 0xCD5)]
    pub seed: u64,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Derive(args) => cmd_derive(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Verify(args) => cmd_verify(args),
    }
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let mut cfg = SyntheticConfig::new(args.classes, args.head_count, args.imbalance, args.seed);
    cfg.noise_scale = args.noise;
    if let Some(t) = args.test_per_class {
        cfg.test_per_class = t;
    }
    let ds = generate_synthetic(&cfg)?;
    ds.save(&args.out)?;
    for split in [Split::Train, Split::Val, Split::Test] {
        let counts = ds.manifest.counts(split).unwrap_or(&[]);
        println!("{}: {} chips, per-class {:?}", split.key(), ds.split(split).len(), counts);
    }
    println!("wrote dataset to {}", args.out.display());
    Ok(())
}

fn cmd_derive(args: DeriveArgs) -> Result<()> {
    let cfg = DeriveConfig { class_cap: args.cap, val_fraction: args.val_fraction, seed: args.seed };
    let ds = derive_chips(&args.annotations, &cfg)?;
    ds.save(&args.out)?;
    println!(
        "derived {} train / {} val / {} test chips to {}",
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        args.out.display()
    );
    Ok(())
}

fn parse_model_flag(flag: &str) -> Result<ModelConfig> {
    match flag {
        "cds-large" => Ok(ModelConfig::cds_large()),
        "cds-small" => Ok(ModelConfig::cds_small()),
        other => match other.strip_prefix("baseline:") {
            Some(stem) => Ok(ModelConfig::baseline(stem.parse::<Stem>()?)),
            None => Err(Error::Config(format!(
                "unknown model '{other}' (expected cds-large, cds-small, or baseline:<stem>)"
            ))),
        },
    }
}

/// Flags override config-file values; the file overrides defaults. The
/// default augmentation policy follows the model family unless set
/// explicitly: none for CDS models, flips + padded crops for baselines.
fn resolve_train_setup(args: &TrainArgs) -> Result<(ModelConfig, TrainConfig)> {
    let mut file_model: Option<ModelConfig> = None;
    let mut train_cfg = TrainConfig::default();
    let mut augmentation_set = false;
    if let Some(path) = &args.config {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let value: serde_json::Value = serde_json::from_str(&raw).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        if let Some(m) = value.get("model") {
            file_model = Some(serde_json::from_value(m.clone()).map_err(|e| Error::Config(format!("bad model section: {e}")))?);
        }
        if let Some(t) = value.get("train") {
            augmentation_set = t.get("augmentation").is_some();
            let mut merged = serde_json::to_value(&train_cfg)?;
            if let (Some(obj), Some(patch)) = (merged.as_object_mut(), t.as_object()) {
                for (k, v) in patch {
                    if !obj.contains_key(k) {
                        return Err(Error::Config(format!("unknown train config field '{k}'")));
                    }
                    obj.insert(k.clone(), v.clone());
                }
            }
            train_cfg = serde_json::from_value(merged).map_err(|e| Error::Config(format!("bad train section: {e}")))?;
        }
    }
    let model_cfg = match (&args.model, file_model) {
        (Some(flag), _) => parse_model_flag(flag)?,
        (None, Some(m)) => m,
        (None, None) => return Err(Error::Config("no model given: pass --model or a config file with a model section".into())),
    };
    if let Some(v) = args.batch_size {
        train_cfg.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        train_cfg.learning_rate = v;
    }
    if let Some(v) = args.weight_decay {
        train_cfg.weight_decay = v;
    }
    if let Some(v) = args.total_batches {
        train_cfg.total_batches = v;
    }
    if let Some(v) = args.validate_every {
        train_cfg.validate_every = v;
    }
    if let Some(v) = args.seed {
        train_cfg.seed = v;
    }
    match &args.augmentation {
        Some(s) => {
            train_cfg.augmentation = match s.as_str() {
                "none" => Augmentation::None,
                "flips-crops" => Augmentation::FlipsCrops,
                other => return Err(Error::Config(format!("unknown augmentation '{other}'"))),
            };
        }
        None if !augmentation_set => {
            train_cfg.augmentation = match model_cfg.architecture {
                Architecture::BaselineCnn => Augmentation::FlipsCrops,
                _ => Augmentation::None,
            };
        }
        None => {}
    }
    train_cfg.validate()?;
    Ok((model_cfg, train_cfg))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let (model_cfg, train_cfg) = resolve_train_setup(&args)?;
    let dataset = ChipDataset::load(&args.data)?;
    if dataset.train.is_empty() || dataset.val.is_empty() {
        return Err(Error::Data("training needs non-empty train and val splits".into()));
    }
    std::fs::create_dir_all(&args.out)?;

    let mut model: ModelGraph<f32> = ModelGraph::build(&model_cfg, train_cfg.seed)?;
    let log_path = args.out.join("train_log.jsonl");
    let mut log_file = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    let (mut best, outcome) = train(&mut model, &dataset, &train_cfg, Some(&mut log_file))?;
    log_file.flush()?;

    let ckpt_path = args.out.join("checkpoint.cdsc");
    save_checkpoint(&best, &ckpt_path)?;

    // final (unadjusted) report on the validation split
    let k = best.config.num_classes;
    let (logits, labels) = collect_logits(&mut best, &dataset.val, 64, LayerMode::eval())?;
    let preds = predict_classes(&logits, k, None)?;
    let report = EvalReport::build(&preds, &labels, &dataset.manifest.class_names, AdjustmentReport { enabled: false, tau: 0.0 })?;
    std::fs::write(args.out.join("eval_report.json"), serde_json::to_vec_pretty(&report)?)?;

    println!(
        "trained {} steps; best val i-acc {:.4} at step {}; checkpoint {}",
        train_cfg.total_batches,
        outcome.best_val_i_acc,
        outcome.best_step,
        ckpt_path.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let adjust_on = match args.logit_adjust.as_str() {
        "on" => true,
        "off" => false,
        other => return Err(Error::Config(format!("--logit-adjust takes on|off, got '{other}'"))),
    };
    let split: Split = args.split.parse()?;
    let dataset = ChipDataset::load(&args.data)?;
    let mut model: ModelGraph<f32> = load_checkpoint(&args.checkpoint)?;
    check_channel_compatibility(&model.config, &dataset)?;

    let set = dataset.split(split);
    if set.is_empty() {
        return Err(Error::Data(format!("split '{}' is empty", split.key())));
    }
    let k = model.config.num_classes;
    let (logits, labels) = collect_logits(&mut model, set, 64, LayerMode::eval())?;
    let train_counts = dataset
        .manifest
        .counts(Split::Train)
        .ok_or_else(|| Error::Data("manifest lacks train counts for the prior".into()))?;
    let prior = ClassPrior::from_counts(train_counts)?;
    let preds = if adjust_on {
        predict_classes(&logits, k, Some((&prior, args.tau)))?
    } else {
        predict_classes(&logits, k, None)?
    };
    let report = EvalReport::build(
        &preds,
        &labels,
        &dataset.manifest.class_names,
        AdjustmentReport { enabled: adjust_on, tau: if adjust_on { args.tau } else { 0.0 } },
    )?;
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    let out = args.out.unwrap_or_else(|| PathBuf::from("eval_report.json"));
    std::fs::write(&out, json)?;
    Ok(())
}

fn check_channel_compatibility(config: &ModelConfig, dataset: &ChipDataset) -> Result<()> {
    let bands = 8; // MSC1 geometry is fixed; the container loader enforced it
    let expected = match config.architecture {
        Architecture::CdsLarge | Architecture::CdsSmall => bands - 1,
        Architecture::BaselineCnn => bands,
    };
    let got = config.input_channels;
    if expected != got {
        return Err(Error::Data(format!(
            "channel mismatch: checkpoint expects {} input channels, dataset provides {} ({} bands)",
            got,
            expected,
            bands
        )));
    }
    let _ = dataset;
    Ok(())
}

fn cmd_verify(args: VerifyArgs) -> Result<()> {
    let suite: Suite = args.suite.parse()?;
    let opts = VerifyOptions { trials: args.trials, seed: args.seed, inject_econv_bias: None };
    let reports = run_suite(suite, &opts)?;
    let mut failed = Vec::new();
    for r in &reports {
        println!("{}", r.line());
        if !r.pass {
            failed.push(r.law.clone());
        }
    }
    if failed.is_empty() {
        println!("all {} laws hold", reports.len());
        Ok(())
    } else {
        Err(Error::Verification(format!("violated laws: {}", failed.join(", "))))
    }
}

/// Entry point used by `main`; maps errors to exit codes.
pub fn main_with_exit_code() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_flag_parsing() {
        assert_eq!(parse_model_flag("cds-large").unwrap().architecture, Architecture::CdsLarge);
        assert_eq!(parse_model_flag("baseline:binned-average").unwrap().stem, Stem::BinnedAverage);
        assert!(parse_model_flag("resnet18").is_err());
    }

    #[test]
    fn default_augmentation_follows_model_family() {
        let mk = |model: &str| TrainArgs {
            model: Some(model.into()),
            data: PathBuf::from("x"),
            config: None,
            out: PathBuf::from("y"),
            batch_size: None,
            learning_rate: None,
            weight_decay: None,
            total_batches: None,
            validate_every: None,
            seed: None,
            augmentation: None,
        };
        let (_, cds) = resolve_train_setup(&mk("cds-large")).unwrap();
        assert_eq!(cds.augmentation, Augmentation::None);
        let (_, base) = resolve_train_setup(&mk("baseline:average")).unwrap();
        assert_eq!(base.augmentation, Augmentation::FlipsCrops);
    }

    #[test]
    fn paper_defaults_in_train_config() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.learning_rate, 1e-4);
        assert_eq!(cfg.weight_decay, 1e-2);
        assert_eq!(cfg.total_batches, 15_000);
        assert_eq!(cfg.validate_every, 200);
    }
}
