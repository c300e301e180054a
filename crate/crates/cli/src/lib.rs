//! Command-line front end: synthetic data generation, training, evaluation,
//! model analysis and feature-map dumps.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tecnet::data::pgm::GrayImage;
use tecnet::data::synth::{generate, ShapeFamily, SynthSpec};
use tecnet::data::{load_dir, Sample};
use tecnet::metrics::{evaluate, write_metrics_csv, BinaryMask};
use tecnet::model::analysis::write_report;
use tecnet::model::checkpoint;
use tecnet::model::{TecNet, TecNetConfig};
use tecnet::train::trainer::{logits_to_mask, mean_dice, predict};
use tecnet::train::{train, TrainOptions};
use tecnet::{Ctx, Tape, Tensor};

/// Environment variable that overrides every `--seed` flag.
pub const SEED_ENV: &str = "TECNET_SEED";
pub const LOSS_CSV: &str = "loss.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const SUMMARY_JSON: &str = "summary.json";

#[derive(Debug, Parser)]
#[command(name = "tecnet", version, about = "Hybrid CNN/Transformer segmentation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset of paired PGM images and masks.
    Gen(GenArgs),
    /// Train a network and save a checkpoint.
    Train(TrainArgs),
    /// Predict masks for a dataset and score them.
    Eval(EvalArgs),
    /// Print parameter, MAC and attention-cost tables for a config.
    Analyze(AnalyzeArgs),
    /// Write per-stage channel-mean feature maps as PGM heatmaps.
    DumpFeatures(DumpArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// ellipse or blob-union
    #[arg(long, default_value = "ellipse")]
    pub family: ShapeFamily,
    #[arg(long, default_value_t = 0.6)]
    pub gap: f64,
    #[arg(long, default_value_t = 0.05)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0.2)]
    pub gradient: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON config file, or a preset name (nano, T, B).
    #[arg(long)]
    pub config: String,
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out directory scored after every epoch.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// When given, must match the config the checkpoint was trained with.
    #[arg(long)]
    pub config: Option<String>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// JSON config file, or a preset name (nano, T, B).
    #[arg(long)]
    pub config: String,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Sample index inside the data directory.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `argv` (program name first) and runs the command. Usage errors
/// come back as `clap::Error` inside the `anyhow::Error`.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv)?;
    match cli.command {
        Command::Gen(a) => cmd_gen(a, stdout),
        Command::Train(a) => cmd_train(a, stdout),
        Command::Eval(a) => cmd_eval(a, stdout),
        Command::Analyze(a) => cmd_analyze(a, stdout),
        Command::DumpFeatures(a) => cmd_dump(a, stdout),
    }
}

fn seed_or_env(flag: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .with_context(|| format!("{SEED_ENV}={v:?} is not an unsigned integer")),
        Err(_) => Ok(flag),
    }
}

pub fn resolve_config(arg: &str) -> Result<TecNetConfig> {
    let path = Path::new(arg);
    if !path.exists() {
        if let Some(cfg) = TecNetConfig::preset(arg) {
            return Ok(cfg);
        }
    }
    Ok(TecNetConfig::load(path)?)
}

fn cmd_gen(a: GenArgs, out: &mut dyn Write) -> Result<()> {
    let spec = SynthSpec {
        seed: seed_or_env(a.seed)?,
        count: a.count,
        size: a.size,
        family: a.family,
        gap: a.gap,
        sigma: a.sigma,
        gradient: a.gradient,
    };
    generate(&spec, &a.out)?;
    writeln!(out, "wrote {} samples to {}", spec.count, a.out.display())?;
    Ok(())
}

fn check_sizes(cfg: &TecNetConfig, samples: &[Sample], dir: &Path) -> Result<()> {
    if let Some(s) = samples.iter().find(|s| s.side() != cfg.input_size || s.image.shape()[2] != cfg.input_size) {
        bail!(
            "{}: sample {} is {:?}, config expects {}x{}",
            dir.display(),
            s.index,
            &s.image.shape()[1..],
            cfg.input_size,
            cfg.input_size
        );
    }
    Ok(())
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve_config(&a.config)?;
    let seed = seed_or_env(a.seed)?;
    let train_set = load_dir(&a.data)?;
    check_sizes(&cfg, &train_set, &a.data)?;
    let val_set = match &a.val {
        Some(dir) => {
            let v = load_dir(dir)?;
            check_sizes(&cfg, &v, dir)?;
            v
        }
        None => Vec::new(),
    };
    let mut opts = match a.steps {
        Some(steps) => TrainOptions::for_steps(steps, train_set.len(), a.batch_size, seed),
        None => TrainOptions::new(a.epochs, a.batch_size, seed),
    };
    opts.schedule.initial_lr = a.lr;

    let (net, mut store) = TecNet::build(&cfg, seed)?;
    fs::create_dir_all(&a.out)?;
    let mut log = BufWriter::new(File::create(a.out.join(LOSS_CSV))?);
    let report = train(&net, &mut store, &train_set, &val_set, &opts, Some(&mut log))?;
    log.flush()?;

    let mut metrics = BTreeMap::new();
    metrics.insert("steps".to_string(), report.steps.len() as f64);
    if let Some(last) = report.steps.last() {
        metrics.insert("final_loss".to_string(), last.loss[0]);
    }
    if let Some(d) = report.final_val_dice {
        metrics.insert("val_dice".to_string(), d);
    }
    checkpoint::save(&a.out, &cfg, &store, &metrics)?;
    write!(out, "trained {} steps", report.steps.len())?;
    if let Some(d) = report.final_val_dice {
        write!(out, ", validation DI {d:.4}")?;
    }
    writeln!(out, "; checkpoint in {}", a.out.display())?;
    Ok(())
}

fn mask_image(m: &BinaryMask) -> GrayImage {
    let data = m.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
    GrayImage::new(m.width, m.height, data).expect("mask extents are consistent")
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let expect = a.config.as_deref().map(resolve_config).transpose()?;
    let (net, store, _) = checkpoint::load(&a.checkpoint, expect.as_ref())?;
    let samples = load_dir(&a.data)?;
    check_sizes(&net.cfg, &samples, &a.data)?;
    let pred: Vec<BinaryMask> = predict(&net, &store, &samples, 1.0)?
        .into_iter()
        .map(|(m, _)| m)
        .collect();
    let mask_dir = a.out.join("masks");
    fs::create_dir_all(&mask_dir)?;
    let mut rows = Vec::with_capacity(samples.len());
    for (s, p) in samples.iter().zip(&pred) {
        mask_image(p).save(&mask_dir.join(format!("pred_{:04}.pgm", s.index)))?;
        let gt = BinaryMask::from_tensor(&s.mask, 0.5)?;
        rows.push((format!("{:04}", s.index), evaluate(p, &gt)?));
    }
    let mut csv = BufWriter::new(File::create(a.out.join(METRICS_CSV))?);
    write_metrics_csv(&mut csv, &rows)?;
    csv.flush()?;
    let di = mean_dice(&samples, &pred)?;
    let summary = serde_json::json!({ "samples": samples.len(), "mean_dice": di });
    fs::write(a.out.join(SUMMARY_JSON), format!("{summary:#}\n"))?;
    writeln!(out, "evaluated {} samples, mean DI {di:.4}", samples.len())?;
    Ok(())
}

fn cmd_analyze(a: AnalyzeArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve_config(&a.config)?;
    let (net, _) = TecNet::build(&cfg, 0)?;
    write_report(&mut &mut *out, &net)?;
    Ok(())
}

/// Channel mean of a `[C,H,W]` map, stretched to the full 8-bit range.
fn heatmap(t: &Tensor) -> GrayImage {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut mean = vec![0.0; h * w];
    for ch in t.data().chunks(h * w) {
        mean.iter_mut().zip(ch).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= c as f64);
    let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let data = mean
        .iter()
        .map(|v| ((v - lo) / span * 255.0).round() as u8)
        .collect();
    GrayImage::new(w, h, data).expect("heatmap extents are consistent")
}

fn cmd_dump(a: DumpArgs, out: &mut dyn Write) -> Result<()> {
    let (net, store, _) = checkpoint::load(&a.checkpoint, None)?;
    let samples = load_dir(&a.data)?;
    let sample = samples
        .iter()
        .find(|s| s.index == a.index)
        .with_context(|| format!("no sample {} in {}", a.index, a.data.display()))?;
    check_sizes(&net.cfg, std::slice::from_ref(sample), &a.data)?;
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, &store);
    let o = net.forward(&ctx, ctx.constant(sample.image.clone()))?;
    fs::create_dir_all(&a.out)?;
    let mut written = 0;
    for (branch, maps) in [("cnn", &o.cnn_stages), ("trans", &o.trans_stages)] {
        for (i, v) in maps.iter().enumerate() {
            heatmap(&v.value()).save(&a.out.join(format!("{branch}_stage{i}.pgm")))?;
            written += 1;
        }
    }
    let fused = logits_to_mask(&o.y_tec.value())?;
    mask_image(&fused).save(&a.out.join("prediction.pgm"))?;
    writeln!(out, "wrote {written} feature maps to {}", a.out.display())?;
    Ok(())
}

/// Exit code for an error returned by [`run`]: clap's own code for usage
/// errors, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<clap::Error>() {
        Some(e) => e.exit_code(),
        None => 1,
    }
}

pub fn report_error(err: &anyhow::Error) {
    if let Some(e) = err.downcast_ref::<clap::Error>() {
        let _ = e.print();
        return;
    }
    let _ = writeln!(io::stderr(), "error: {err:#}");
}
