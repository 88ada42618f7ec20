//! Command-line entry points.
//!
//! Settings resolve as flag, then `--config` JSON file, then built-in default.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::{
    build_splits, load_dataset, synth_generate, write_cube, write_labels, write_sidecar, write_split_csv,
    AxisOrder, DatasetConfig, SynthSpec,
};
use crate::error::{Error, Result};
use crate::masking::{FilterScope, MaskMode};
use crate::metrics::MetricsReport;
use crate::model::checkpoint::{load_checkpoint, load_with_meta, save_checkpoint, CheckpointMeta};
use crate::model::{ModelConfig, PositionalKind};
use crate::training::{
    self, ChannelSchedule, Preset, SpatialLoss, Split, TrainConfig, TrainLog, TrainMode, TrainingData,
};

#[derive(Debug, Parser)]
#[command(name = "sfmim", version, about = "Dual-domain masked image modeling for hyperspectral cubes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic scene: cube, labels, sidecar and splits.
    Synth(SynthArgs),
    /// Masked-reconstruction pretraining on the unlabeled pixels.
    Pretrain(RunFlags),
    /// Supervised fine-tuning on the train split.
    Finetune(RunFlags),
    /// Metrics of a checkpoint on one split.
    Eval(EvalArgs),
    /// Pretrain, fine-tune and evaluate once per masking strategy.
    Ablate(RunFlags),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Height and width in pixels.
    #[arg(long, default_value_t = 48)]
    pub hw: usize,
    #[arg(long, default_value_t = 48)]
    pub bands: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0.5)]
    pub unlabeled_fraction: f64,
    #[arg(long, default_value_t = 20)]
    pub train_per_class: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: Split,
    /// Metrics file; defaults to `<checkpoint>.<split>.metrics.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunFlags {
    /// JSON file with any of the settings below (snake_case keys).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub settings: RunSettings,
}

/// Every optional setting shared by the training commands.
#[derive(Clone, Debug, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSettings {
    /// Dataset sidecar JSON.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub mask: Option<MaskMode>,
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, value_enum)]
    pub filter_scope: Option<FilterScope>,
    #[arg(long, value_enum)]
    pub schedule: Option<ChannelSchedule>,
    #[arg(long, value_enum)]
    pub spatial_loss: Option<SpatialLoss>,
    /// Epochs of the command's own phase.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub adam_eps: Option<f64>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub mlp_ratio: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long, value_enum)]
    pub positional: Option<PositionalKind>,
    /// Fine-tuning epoch preset.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Checkpoint to start fine-tuning from.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub head_only: Option<bool>,
    /// Comma-separated masking strategies for `ablate`.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub strategies: Option<Vec<MaskMode>>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    #[arg(long)]
    pub finetune_lr: Option<f64>,
    #[arg(long)]
    pub finetune_batch_size: Option<usize>,
}

fn to_map(s: &RunSettings) -> Map<String, Value> {
    match serde_json::to_value(s).expect("settings serialize") {
        Value::Object(m) => m.into_iter().filter(|(_, v)| !v.is_null()).collect(),
        _ => unreachable!(),
    }
}

impl RunSettings {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Fields set here win; the rest come from `lower`.
    pub fn over(&self, lower: &RunSettings) -> RunSettings {
        let mut merged = to_map(lower);
        merged.extend(to_map(self));
        serde_json::from_value(Value::Object(merged)).expect("merged settings deserialize")
    }
}

impl RunFlags {
    pub fn resolve(&self) -> Result<RunSettings> {
        match &self.config {
            Some(p) => Ok(self.settings.over(&RunSettings::from_file(p)?)),
            None => Ok(self.settings.clone()),
        }
    }
}

/// Fully resolved view of one training command.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub data: PathBuf,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub init: Option<PathBuf>,
    pub strategies: Vec<MaskMode>,
}

impl RunConfig {
    /// `bands` and `classes` come from the dataset.
    pub fn build(s: &RunSettings, phase: TrainMode, bands: usize, classes: usize) -> Result<Self> {
        let data = s.data.clone().ok_or_else(|| Error::Config("--data is required".into()))?;
        let out = s.out.clone().ok_or_else(|| Error::Config("--out is required".into()))?;
        let base = ModelConfig::standard(bands, classes);
        let model = ModelConfig {
            patch_size: s.patch_size.unwrap_or(base.patch_size),
            embed_dim: s.embed_dim.unwrap_or(base.embed_dim),
            depth: s.depth.unwrap_or(base.depth),
            heads: s.heads.unwrap_or(base.heads),
            mlp_ratio: s.mlp_ratio.unwrap_or(base.mlp_ratio),
            dropout: s.dropout.unwrap_or(base.dropout),
            positional: s.positional.unwrap_or(base.positional),
            ..base
        };
        model.validate()?;

        let shared = |mut c: TrainConfig| {
            c.seed = s.seed.unwrap_or(c.seed);
            c.mask_mode = s.mask.unwrap_or(c.mask_mode);
            c.ratio = s.ratio.unwrap_or(c.ratio);
            c.gamma = s.gamma.unwrap_or(c.gamma);
            c.filter_scope = s.filter_scope.unwrap_or(c.filter_scope);
            c.schedule = s.schedule.unwrap_or(c.schedule);
            c.spatial_loss = s.spatial_loss.unwrap_or(c.spatial_loss);
            c.weight_decay = s.weight_decay.unwrap_or(c.weight_decay);
            c.beta1 = s.beta1.unwrap_or(c.beta1);
            c.beta2 = s.beta2.unwrap_or(c.beta2);
            c.eps = s.adam_eps.unwrap_or(c.eps);
            c.head_only = s.head_only.unwrap_or(c.head_only);
            c
        };
        let mut pretrain = shared(TrainConfig::pretrain());
        let mut finetune = shared(TrainConfig::finetune());
        if let Some(p) = s.preset {
            finetune.epochs = p.finetune_epochs();
        }
        pretrain.epochs = s.pretrain_epochs.unwrap_or(pretrain.epochs);
        finetune.epochs = s.finetune_epochs.unwrap_or(finetune.epochs);
        finetune.lr = s.finetune_lr.unwrap_or(finetune.lr);
        finetune.batch_size = s.finetune_batch_size.unwrap_or(finetune.batch_size);
        let own = match phase {
            TrainMode::Pretrain => &mut pretrain,
            TrainMode::Finetune => &mut finetune,
        };
        own.epochs = s.epochs.unwrap_or(own.epochs);
        own.lr = s.lr.unwrap_or(own.lr);
        own.batch_size = s.batch_size.unwrap_or(own.batch_size);
        pretrain.validate()?;
        finetune.validate()?;
        Ok(RunConfig {
            data,
            out,
            model,
            pretrain,
            finetune,
            init: s.init.clone(),
            strategies: s.strategies.clone().unwrap_or_else(|| MaskMode::ALL.to_vec()),
        })
    }
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Contract(_) => 2,
        Error::Training(_) | Error::UndefinedMetric(_) => 4,
        _ => 3,
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| Error::io(p, e))
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        unlabeled_fraction: a.unlabeled_fraction,
        ..SynthSpec::new(a.seed, a.hw, a.bands, a.classes, a.sigma)
    };
    let (cube, labels) = synth_generate(&spec)?;
    let splits = build_splits(&labels, a.train_per_class, a.seed)?;
    create_dir(&a.out)?;
    write_cube(&a.out.join("cube.npy"), &cube)?;
    write_labels(&a.out.join("labels.npy"), &labels)?;
    write_split_csv(&a.out.join("splits.csv"), &splits)?;
    let sidecar = DatasetConfig {
        cube: "cube.npy".into(),
        labels: "labels.npy".into(),
        axis_order: AxisOrder::Hwb,
        splits: Some("splits.csv".into()),
    };
    write_sidecar(&a.out.join("dataset.json"), &sidecar)
}

fn prepare(flags: &RunFlags, phase: TrainMode) -> Result<(RunConfig, TrainingData)> {
    let s = flags.resolve()?;
    let path = s.data.clone().ok_or_else(|| Error::Config("--data is required".into()))?;
    let ds = load_dataset(&path)?;
    let data = TrainingData::from_dataset(&ds)?;
    let run = RunConfig::build(&s, phase, data.cube.bands(), data.classes())?;
    create_dir(&run.out)?;
    let json = serde_json::to_string_pretty(&run).expect("run config serializes");
    write_text(&run.out.join(format!("{}_config.json", phase_name(phase))), &(json + "\n"))?;
    Ok((run, data))
}

fn phase_name(p: TrainMode) -> &'static str {
    match p {
        TrainMode::Pretrain => "pretrain",
        TrainMode::Finetune => "finetune",
    }
}

pub fn cmd_pretrain(flags: &RunFlags) -> Result<()> {
    let (run, data) = prepare(flags, TrainMode::Pretrain)?;
    let mut log = TrainLog::create(&run.out.join("pretrain_log.csv"))?;
    let out = training::pretrain(&data, &run.model, &run.pretrain, None, &mut log)?;
    let meta = |epoch, loss| CheckpointMeta {
        config: run.model.clone(),
        epoch,
        loss,
        metrics: None,
    };
    save_checkpoint(&run.out.join("pretrain_best.sfmc"), &out.best, &meta(out.best_epoch, out.best_loss))?;
    save_checkpoint(&run.out.join("pretrain_final.sfmc"), &out.last, &meta(run.pretrain.epochs, out.last_loss))?;
    Ok(())
}

pub fn cmd_finetune(flags: &RunFlags) -> Result<MetricsReport> {
    let (run, data) = prepare(flags, TrainMode::Finetune)?;
    let init = run.init.as_deref().map(|p| load_checkpoint(p, &run.model)).transpose()?;
    let mut log = TrainLog::create(&run.out.join("finetune_log.csv"))?;
    let out = training::finetune(&data, &run.model, &run.finetune, init, &mut log)?;
    let loss = out
        .history
        .iter()
        .find(|r| r.epoch == out.best_epoch && r.split == "train")
        .and_then(|r| r.loss);
    let meta = CheckpointMeta {
        config: run.model.clone(),
        epoch: out.best_epoch,
        loss,
        metrics: Some(out.report.clone()),
    };
    save_checkpoint(&run.out.join("finetune_best.sfmc"), &out.best, &meta)?;
    write_text(&run.out.join("metrics.json"), &(out.report.to_json() + "\n"))?;
    println!("{}", out.report.to_json());
    Ok(out.report)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<MetricsReport> {
    let (params, _) = load_with_meta(&a.checkpoint)?;
    let ds = load_dataset(&a.data)?;
    let data = TrainingData::from_dataset(&ds)?;
    let split_name = match a.split {
        Split::Train => "train",
        Split::Test => "test",
        Split::Unlabeled => {
            return Err(Error::Config("unlabeled pixels have no ground truth to evaluate".into()));
        }
    };
    let report = training::evaluate(&params, &data, data.coords(a.split))?;
    let path = a.out.clone().unwrap_or_else(|| {
        let mut s = a.checkpoint.as_os_str().to_owned();
        s.push(format!(".{split_name}.metrics.json"));
        PathBuf::from(s)
    });
    write_text(&path, &(report.to_json() + "\n"))?;
    println!("{}", report.to_json());
    Ok(report)
}

pub fn cmd_ablate(flags: &RunFlags) -> Result<Vec<training::AblationRow>> {
    let (run, data) = prepare(flags, TrainMode::Pretrain)?;
    let csv_path = run.out.join("ablation.csv");
    let mut csv = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    writeln!(csv, "strategy,oa,aa,kappa").map_err(|e| Error::io(&csv_path, e))?;
    let rows = training::ablate(&data, &run.model, &run.pretrain, &run.finetune, &run.strategies, |r| {
        writeln!(csv, "{},{:.6},{:.6},{:.6}", r.strategy, r.oa, r.aa, r.kappa)
            .and_then(|_| csv.flush())
            .map_err(|e| Error::io(&csv_path, e))
    })?;
    let json_path = run.out.join("ablation.json");
    let json = serde_json::to_string_pretty(&rows).map_err(|e| Error::json(&json_path, e))?;
    write_text(&json_path, &(json + "\n"))?;
    Ok(rows)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Pretrain(f) => cmd_pretrain(&f),
        Command::Finetune(f) => cmd_finetune(&f).map(drop),
        Command::Eval(a) => cmd_eval(&a).map(drop),
        Command::Ablate(f) => cmd_ablate(&f).map(drop),
    }
}

/// Parses `std::env::args`, runs, and returns the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
