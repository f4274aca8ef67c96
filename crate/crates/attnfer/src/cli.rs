//! The `attnfer` command line.

use std::path::{Path, PathBuf};
use std::time::Instant;

use attnfer_core::augment::AugmentConfig;
use attnfer_core::data::{DatasetSplit, Emotion, LabeledImage, Partition};
use attnfer_core::model::{DeepEmotionModel, ModelConfig};
use attnfer_core::optim::TrainConfig;
use attnfer_core::saliency::{ReferenceMode, SaliencyConfig};
use attnfer_core::traineval::{train, EpochRecord, TrainHooks};
use attnfer_core::verify::{run_all, VerifyOptions};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::artifacts::{
    ensure_dir, load_checkpoint, output_root, render_heatmap, save_checkpoint, write_confusion, write_text,
    HeatmapInfo, Manifest,
};
use crate::dataset::{emotion_in_name, load_dataset, DatasetKind};
use crate::error::{exit, Error, Result};
use crate::formats::read_gray;
use crate::parallel;

#[derive(Debug, Parser)]
#[command(name = "attnfer", version, about = "Attentional CNN for facial expression recognition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoints, run log and confusion matrices.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one partition of a dataset.
    Eval(EvalArgs),
    /// Occlusion saliency maps for one or more images.
    Saliency(SaliencyArgs),
    /// Gradient, oracle and spatial-transformer self-checks.
    Verify(VerifyArgs),
    /// Write the train/val/test assignment of a dataset without training.
    Split(SplitArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Seed for initialisation, splits, shuffling, augmentation and dropout.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Threads for evaluation and saliency sweeps (results do not depend on it).
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Output directory (default: $ATTNFER_OUT, then ./attnfer-out).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long, value_enum)]
    pub dataset: DatasetKind,
    /// Dataset directory, or the CSV file for `fer`.
    #[arg(long)]
    pub root: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Square input size in pixels.
    #[arg(long, default_value_t = 48)]
    pub input_size: usize,
    /// Four comma-separated conv widths.
    #[arg(long, value_delimiter = ',', num_args = 4, default_values_t = [10, 10, 10, 10])]
    pub channels: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub kernel: usize,
    #[arg(long, default_value_t = 50)]
    pub fc_hidden: usize,
    #[arg(long, default_value_t = 0.5)]
    pub dropout: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 500)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.005)]
    pub lr: f64,
    /// Weight of the L2 penalty on the fully-connected weights.
    #[arg(long, default_value_t = 1e-3)]
    pub lambda: f64,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long)]
    pub no_augment: bool,
    /// Print one line per epoch to stderr.
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PartitionArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = PartitionArg::Test)]
    pub partition: PartitionArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReferenceArg {
    /// Compare with the prediction on the unoccluded image.
    Prediction,
    /// Compare with the label (from --label or the file name).
    Label,
}

#[derive(Debug, Args)]
pub struct SaliencyArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Occlusion window side in pixels.
    #[arg(long, default_value_t = 8)]
    pub window: usize,
    #[arg(long, default_value_t = 4)]
    pub stride: usize,
    #[arg(long, value_enum, default_value_t = ReferenceArg::Prediction)]
    pub reference: ReferenceArg,
    /// Ground-truth label for every image (name or index).
    #[arg(long)]
    pub label: Option<String>,
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Random instances per gradient check.
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scale the analytic gradient of the named check (harness self-test).
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 48)]
    pub input_size: usize,
}

impl ModelArgs {
    fn config(&self) -> Result<ModelConfig> {
        let channels: [usize; 4] = self
            .channels
            .clone()
            .try_into()
            .map_err(|_| Error::Usage("--channels needs four values".into()))?;
        let cfg = ModelConfig {
            input_h: self.input_size,
            input_w: self.input_size,
            channels,
            kernel: self.kernel,
            fc_hidden: self.fc_hidden,
            dropout_rate: self.dropout,
            ..ModelConfig::default()
        };
        cfg.geometry()?;
        Ok(cfg)
    }
}

struct ClockHooks {
    start: Instant,
    verbose: bool,
}

impl TrainHooks<f32> for ClockHooks {
    fn now_ms(&mut self) -> Option<u64> {
        Some(self.start.elapsed().as_millis() as u64)
    }

    fn on_epoch(&mut self, r: &EpochRecord, _model: &DeepEmotionModel<f32>) {
        if self.verbose {
            eprintln!(
                "epoch {:>4}  train_loss {:.4}  train_acc {:.4}  val_loss {:.4}  val_acc {:.4}",
                r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc
            );
        }
    }
}

fn describe(split: &DatasetSplit) -> String {
    format!("train={} val={} test={}", split.train.len(), split.val.len(), split.test.len())
}

fn cmd_train(a: &TrainArgs) -> Result<i32> {
    let model_cfg = a.model.config()?;
    let augment = if a.no_augment { AugmentConfig::disabled() } else { AugmentConfig::default() };
    let train_cfg = TrainConfig {
        learning_rate: a.lr,
        lambda: a.lambda,
        batch_size: a.batch_size,
        epochs: a.epochs,
        augment,
        ..TrainConfig::default()
    };
    train_cfg.validate()?;
    let split = load_dataset(a.data.dataset, &a.data.root, a.run.seed, model_cfg.input_h, model_cfg.input_w)?;
    eprintln!("{}", describe(&split));
    let out = output_root(a.run.out.as_deref());
    ensure_dir(&out)?;
    let model = DeepEmotionModel::<f32>::build(model_cfg, a.run.seed)?;
    let mut hooks = ClockHooks { start: Instant::now(), verbose: a.verbose };
    let outcome = train(model, &split, &train_cfg, a.run.seed, &mut hooks)?;

    let mut manifest = Manifest::new("train");
    manifest.note("dataset", format!("{:?}", a.data.dataset).to_lowercase());
    manifest.note("root", a.data.root.display());
    manifest.note("seed", a.run.seed);
    let best = out.join("best.dek");
    let last = out.join("final.dek");
    save_checkpoint(&best, &outcome.best, Some(&train_cfg))?;
    save_checkpoint(&last, &outcome.model, Some(&train_cfg))?;
    let log = out.join("runlog.txt");
    write_text(&log, &outcome.log.to_text(false))?;
    let timing = out.join("timing.txt");
    let timing_text: String = outcome
        .log
        .records
        .iter()
        .map(|r| format!("epoch={} wall_ms={}\n", r.epoch, r.wall_ms.unwrap_or(0)))
        .collect();
    write_text(&timing, &timing_text)?;
    let split_path = out.join("split.txt");
    write_text(&split_path, &split.manifest())?;
    manifest.extend([best, last, log, timing, split_path]);
    for (tag, m) in [("best", &outcome.log.best_test), ("final", &outcome.log.final_test)] {
        if let Some(m) = m {
            manifest.extend(write_confusion(&out, &format!("confusion_{tag}"), &m.confusion)?);
            println!("test accuracy ({tag} model): {:.4}", m.accuracy);
        }
    }
    if let (Some(e), Some(v)) = (outcome.log.best_epoch, outcome.log.best_val_acc) {
        println!("best validation accuracy {v:.4} at epoch {e}");
    }
    let m = manifest.write(&out)?;
    println!("wrote {}", m.display());
    Ok(exit::OK)
}

fn cmd_eval(a: &EvalArgs) -> Result<i32> {
    let model = load_checkpoint(&a.checkpoint)?.model;
    let cfg = *model.config();
    let split = load_dataset(a.data.dataset, &a.data.root, a.run.seed, cfg.input_h, cfg.input_w)?;
    let samples: Vec<LabeledImage> = match a.partition {
        PartitionArg::Train => split.partition(Partition::Train).to_vec(),
        PartitionArg::Val => split.partition(Partition::Val).to_vec(),
        PartitionArg::Test => split.partition(Partition::Test).to_vec(),
        PartitionArg::All => split.train.iter().chain(&split.val).chain(&split.test).cloned().collect(),
    };
    if samples.is_empty() {
        return Err(Error::Core(attnfer_core::Error::Data(format!("the {:?} partition is empty", a.partition))));
    }
    let (acc, cm) = parallel::evaluate(&model, &samples, a.run.threads)?;
    let out = output_root(a.run.out.as_deref());
    ensure_dir(&out)?;
    let mut manifest = Manifest::new("eval");
    manifest.note("checkpoint", a.checkpoint.display());
    manifest.note("partition", format!("{:?}", a.partition).to_lowercase());
    manifest.note("seed", a.run.seed);
    manifest.extend(write_confusion(&out, "confusion", &cm)?);
    manifest.write(&out)?;
    print!("{}", cm.to_table());
    println!("accuracy {acc:.6}");
    Ok(exit::OK)
}

fn image_label(path: &Path, flag: Option<&str>) -> Option<Emotion> {
    match flag {
        Some(l) => Emotion::parse(l),
        None => path.file_name().and_then(|n| n.to_str()).and_then(emotion_in_name),
    }
}

fn cmd_saliency(a: &SaliencyArgs) -> Result<i32> {
    let model = load_checkpoint(&a.checkpoint)?.model;
    let (h, w) = (model.config().input_h, model.config().input_w);
    let reference = match a.reference {
        ReferenceArg::Prediction => ReferenceMode::UnoccludedPrediction,
        ReferenceArg::Label => ReferenceMode::GroundTruthLabel,
    };
    let cfg = SaliencyConfig { window: a.window, stride: a.stride, reference };
    cfg.validate(h, w)?;
    if let Some(l) = &a.label {
        if Emotion::parse(l).is_none() {
            return Err(Error::Usage(format!("unknown label {l:?}")));
        }
    }
    let out = output_root(a.run.out.as_deref());
    ensure_dir(&out)?;
    let mut manifest = Manifest::new("saliency");
    manifest.note("checkpoint", a.checkpoint.display());
    manifest.note("window", a.window);
    manifest.note("stride", a.stride);
    manifest.note("reference_mode", reference.name());
    for path in &a.images {
        let label = image_label(path, a.label.as_deref());
        if reference == ReferenceMode::GroundTruthLabel && label.is_none() {
            return Err(Error::Usage(format!("{}: no label (pass --label)", path.display())));
        }
        let pixels = read_gray(path, h, w)?;
        let source = path.display().to_string();
        let img = LabeledImage::new(pixels, h, w, label.unwrap_or(Emotion::Neutral), source.clone())?;
        let (map, reference_class) = parallel::occlusion_sweep(&model, &img, &cfg, a.run.threads)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let info = HeatmapInfo { source: &source, stride: a.stride, mode: reference, reference_class };
        manifest.extend(render_heatmap(&map, &img, &out, stem, &info)?);
        println!(
            "{source}: reference class {reference_class}, {}/{} windows flip the prediction",
            map.flipped_windows, map.windows
        );
    }
    manifest.write(&out)?;
    Ok(exit::OK)
}

fn cmd_verify(a: &VerifyArgs) -> Result<i32> {
    let opts = VerifyOptions { instances: a.instances, seed: a.seed, fault: a.inject_fault.clone() };
    let report = run_all(&opts)?;
    print!("{}", report.to_text());
    Ok(if report.passed() { exit::OK } else { exit::NUMERIC })
}

fn cmd_split(a: &SplitArgs) -> Result<i32> {
    let split = load_dataset(a.data.dataset, &a.data.root, a.run.seed, a.input_size, a.input_size)?;
    let out = output_root(a.run.out.as_deref());
    ensure_dir(&out)?;
    let path = out.join("split.txt");
    write_text(&path, &split.manifest())?;
    println!("{} -> {}", describe(&split), path.display());
    Ok(exit::OK)
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Saliency(a) => cmd_saliency(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Split(a) => cmd_split(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
