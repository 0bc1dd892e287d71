//! Command-line entry points: `synth`, `train`, `eval`, `infer`, `ablate`.
//!
//! Validation failures (bad config, missing manifest, unknown axis, empty
//! expression, incompatible checkpoint) exit with status 2; runtime failures
//! exit with 1.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::ablation::{run_ablation, AblationAxis};
use crate::config::{Overrides, RunConfig};
use crate::data::{collate, generate_synthetic, load_manifest, preprocess_dual, Mask, RgbF32, Split, Triplet};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::resize::resize_hwc;
use crate::train::{evaluate, load_split, logits_to_masks, train_loop, Dataset, Trainer};

#[derive(Debug, Parser)]
#[command(name = "refseg", version, about = "Referring segmentation with adapted frozen encoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic shapes dataset.
    Synth(SynthArgs),
    /// Train a model and report validation metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a manifest.
    Eval(EvalArgs),
    /// Segment one image for one expression.
    Infer(InferArgs),
    /// Train and evaluate every setting of an ablation axis.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 128)]
    pub canvas: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        RunConfig::resolve(
            self.config.as_deref(),
            &Overrides {
                manifest: self.manifest.clone(),
                out_dir: self.out.clone(),
                seed: self.seed,
                epochs: self.epochs,
            },
        )
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Continue from the last checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Architecture to load the checkpoint into (defaults to the stored one).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// JSON report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub expression: String,
    /// Output mask PNG.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional PNG of the dense prompt, scaled to the image size.
    #[arg(long)]
    pub heatmap: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// rank, text_depth, downsample, dense or all
    #[arg(long)]
    pub axis: String,
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::ManifestNotFound(_)
        | Error::Manifest { .. }
        | Error::Tokenizer(_)
        | Error::Checkpoint(_)
        | Error::Shape(_)
        | Error::Image { .. }
        | Error::Json(_) => 2,
        _ => 1,
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Infer(a) => cmd_infer(&a),
        Command::Ablate(a) => cmd_ablate(&a),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let m = generate_synthetic(a.n, a.canvas, a.seed, &a.out)?;
    println!(
        "wrote {} samples to {} (train {}, val {}, test {})",
        m.len(),
        a.out.join("manifest.jsonl").display(),
        m.count(Split::Train),
        m.count(Split::Val),
        m.count(Split::Test)
    );
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<EvalReport> {
    let cfg = a.run.resolve()?;
    let manifest = cfg.manifest()?.to_path_buf();
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    write_file(&cfg.out_dir.join("config.json"), &cfg.to_json()?)?;
    let outcome = train_loop(&cfg.train, &manifest, &cfg.out_dir, a.resume)?;
    write_file(&cfg.out_dir.join("val_report.json"), &outcome.final_report.to_json()?)?;
    println!("final validation report ({} steps)", outcome.steps);
    print!("{}", outcome.final_report.table());
    println!("checkpoints: {}", outcome.final_checkpoint.display());
    Ok(outcome.final_report)
}

fn model_override(config: Option<&Path>) -> Result<Option<crate::model::ModelConfig>> {
    config
        .map(|p| RunConfig::load(p).map(|c| c.train.model))
        .transpose()
}

pub fn cmd_eval(a: &EvalArgs) -> Result<EvalReport> {
    let split: Split = a.split.parse()?;
    let model_cfg = model_override(a.config.as_deref())?;
    let trainer = Trainer::from_checkpoint(&a.checkpoint, model_cfg.as_ref())?;
    let manifest = load_manifest(&a.manifest)?;
    let samples = load_split(&manifest, split, &trainer.cfg.model, &trainer.tokenizer)?;
    if samples.is_empty() {
        return Err(Error::config(format!("split {split} of {} is empty", a.manifest.display())));
    }
    let report = evaluate(&trainer.predictor(), &samples, trainer.cfg.batch_size)?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| a.checkpoint.with_extension(format!("{split}.json")));
    write_file(&out, &report.to_json()?)?;
    println!("{split}: {} samples", samples.len());
    print!("{}", report.table());
    Ok(report)
}

pub fn cmd_infer(a: &InferArgs) -> Result<()> {
    let model_cfg = model_override(a.config.as_deref())?;
    let trainer = Trainer::from_checkpoint(&a.checkpoint, model_cfg.as_ref())?;
    let img = image::open(&a.image).map_err(|e| Error::Image {
        path: a.image.clone(),
        reason: e.to_string(),
    })?;
    let image = RgbF32::from_rgb8(&img.to_rgb8());
    let (h, w) = (image.height, image.width);
    let triplet = Triplet::new(image, Mask::zeros(h, w), a.expression.clone(), "infer".into())?;
    let cfg = &trainer.cfg.model;
    let sample = preprocess_dual(&triplet, cfg.image_size_low, cfg.image_size_high, &trainer.tokenizer)?;
    let (input, _) = collate(&[&sample], trainer.store.dtype())?;
    let out = trainer.model.forward(&input, false)?;
    let mask = logits_to_masks(&out.decoded.logits)?.remove(0);
    mask.save_png(&a.out)?;
    if let Some(path) = &a.heatmap {
        let dense = out.prompts.dense.get(0)?;
        let (dh, dw) = dense.dims2()?;
        let values: Vec<f32> = dense.flatten_all()?.to_dtype(candle_core::DType::F32)?.to_vec1()?;
        let lo = values.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let norm: Vec<f32> = values.iter().map(|v| (v - lo) / span).collect();
        let up = resize_hwc(&norm, dh, dw, 1, h, w);
        let gray = image::GrayImage::from_raw(
            w as u32,
            h as u32,
            up.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
        )
        .ok_or_else(|| Error::shape("heatmap buffer"))?;
        gray.save(path).map_err(|e| Error::Image {
            path: path.clone(),
            reason: e.to_string(),
        })?;
    }
    println!("{}: {} foreground pixels", a.out.display(), mask.count());
    Ok(())
}

pub fn parse_axes(s: &str) -> Result<Vec<AblationAxis>> {
    if s == "all" {
        Ok(AblationAxis::ALL.to_vec())
    } else {
        Ok(vec![s.parse()?])
    }
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let axes = parse_axes(&a.axis)?;
    let cfg = a.run.resolve()?;
    // settings are checked before any data is read
    for &axis in &axes {
        axis.configs(&cfg.train)?;
    }
    let manifest = load_manifest(cfg.manifest()?)?;
    let data = Dataset::load(&manifest, &cfg.train.model)?;
    let results = run_ablation(&cfg.train, &axes, &data, &cfg.out_dir)?;
    for r in &results {
        let table = r.table();
        write_file(&cfg.out_dir.join(format!("ablation_{}.txt", r.axis)), &table)?;
        let json: Vec<_> = r.rows.iter().map(|(l, rep)| serde_json::json!({"setting": l, "report": rep})).collect();
        write_file(
            &cfg.out_dir.join(format!("ablation_{}.json", r.axis)),
            &serde_json::to_string_pretty(&json)?,
        )?;
        println!("axis {}", r.axis);
        print!("{table}");
    }
    Ok(())
}
