//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use segdebias::datasets::Split;
use segdebias::model::BackboneName;
use segdebias::training::{DataFormat, NamedDataset, Scheme, TrainConfig};

use crate::overlay::Roi;

#[derive(Debug, Parser)]
#[command(name = "segdebias", version, about = "Colour-bias unlearning for semantic segmentation")]
pub struct Cli {
    /// TOML configuration file for the subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice the subcommand makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Replace a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
    #[arg(long, global = true, value_enum, default_value_t = Device::Cpu)]
    pub device: Device,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Device {
    Cpu,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic colour-biased shapes dataset.
    Generate(GenerateArgs),
    /// Write a colour-corrupted copy of a dataset split.
    Corrupt(CorruptArgs),
    /// Train a baseline or adversarial model.
    Train(Box<TrainArgs>),
    /// Score a checkpoint on one or more datasets.
    Evaluate(EvaluateArgs),
    /// Build comparison tables from metrics reports.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value = "train")]
    pub split: Split,
    /// Number of images (overrides the config file).
    #[arg(long)]
    pub count: Option<usize>,
    /// Probability that a shape gets its class colour (overrides the config file).
    #[arg(long)]
    pub correlation: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Variant {
    Greyscale,
    Invert,
    Jitter,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Greyscale => "greyscale",
            Variant::Invert => "invert",
            Variant::Jitter => "jitter",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct CorruptArgs {
    /// Root of the source dataset.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = "val")]
    pub split: Split,
    #[arg(long, value_enum)]
    pub variant: Variant,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset root; repeat to compare against the first one.
    #[arg(long = "dataset", required = true)]
    pub datasets: Vec<PathBuf>,
    #[arg(long, default_value = "val")]
    pub split: Split,
    /// Write overlays for this many lowest-scoring images per dataset.
    #[arg(long, default_value_t = 0)]
    pub overlays: usize,
    /// Region of interest `x,y,width,height` outlined on overlays; repeatable.
    #[arg(long = "roi")]
    pub rois: Vec<Roi>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Baseline metrics reports, one per variant.
    #[arg(long = "baseline", required = true)]
    pub baseline: Vec<PathBuf>,
    /// Reports of the model under comparison, matched to baselines by variant.
    #[arg(long = "ours", required = true)]
    pub ours: Vec<PathBuf>,
}

/// Flag overrides for every training setting; unset flags keep the file value.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub base_lr: Option<f64>,
    #[arg(long)]
    pub lr_step: Option<usize>,
    #[arg(long)]
    pub lr_gamma: Option<f64>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub grl_scale: Option<f64>,
    #[arg(long)]
    pub grl_ramp: Option<bool>,
    #[arg(long)]
    pub bias_loss_weight: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub bias_bins: Option<usize>,
    /// Per-channel mean as `r,g,b`.
    #[arg(long, value_parser = parse_triple)]
    pub norm_mean: Option<[f64; 3]>,
    /// Per-channel standard deviation as `r,g,b`.
    #[arg(long, value_parser = parse_triple)]
    pub norm_std: Option<[f64; 3]>,
    #[arg(long, value_enum)]
    pub backbone: Option<BackboneArg>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub fork_index: Option<usize>,
    #[arg(long)]
    pub bias_hidden: Option<usize>,
    #[arg(long, value_enum)]
    pub data_format: Option<FormatArg>,
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long)]
    pub train_split: Option<Split>,
    #[arg(long)]
    pub val_split: Option<Split>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    /// Extra validation set `name=root[:split]`; repeat to list several. Replaces the file's list.
    #[arg(long = "extra-val", value_parser = parse_named_dataset)]
    pub extra_val: Vec<NamedDataset>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Baseline,
    Lntl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackboneArg {
    MiniSeg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Folder,
    Cityscapes,
}

fn parse_triple(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| format!("expected three comma-separated numbers, got `{s}`"))
}

fn parse_named_dataset(s: &str) -> Result<NamedDataset, String> {
    let (name, rest) = s.split_once('=').ok_or_else(|| format!("expected name=root[:split], got `{s}`"))?;
    let (root, split) = match rest.rsplit_once(':') {
        Some((root, split)) if split.parse::<Split>().is_ok() => (root, split.parse().unwrap()),
        _ => (rest, Split::Val),
    };
    if name.is_empty() || root.is_empty() {
        return Err(format!("expected name=root[:split], got `{s}`"));
    }
    Ok(NamedDataset {
        name: name.into(),
        root: root.into(),
        split,
    })
}

impl TrainArgs {
    /// Applies every flag that was given on top of `cfg`.
    pub fn apply(&self, cfg: &mut TrainConfig) {
        fn set<T: Clone>(dst: &mut T, src: &Option<T>) {
            if let Some(v) = src {
                *dst = v.clone();
            }
        }
        if let Some(s) = self.scheme {
            cfg.scheme = match s {
                SchemeArg::Baseline => Scheme::Baseline,
                SchemeArg::Lntl => Scheme::Lntl,
            };
        }
        set(&mut cfg.epochs, &self.epochs);
        set(&mut cfg.base_lr, &self.base_lr);
        set(&mut cfg.lr_step, &self.lr_step);
        set(&mut cfg.lr_gamma, &self.lr_gamma);
        set(&mut cfg.warmup_epochs, &self.warmup_epochs);
        set(&mut cfg.grl_scale, &self.grl_scale);
        set(&mut cfg.grl_ramp, &self.grl_ramp);
        set(&mut cfg.bias_loss_weight, &self.bias_loss_weight);
        set(&mut cfg.batch_size, &self.batch_size);
        set(&mut cfg.bias_bins, &self.bias_bins);
        set(&mut cfg.normalization.mean, &self.norm_mean);
        set(&mut cfg.normalization.std, &self.norm_std);
        if let Some(BackboneArg::MiniSeg) = self.backbone {
            cfg.model.backbone = BackboneName::MiniSeg;
        }
        set(&mut cfg.model.width, &self.width);
        set(&mut cfg.model.depth, &self.depth);
        if self.fork_index.is_some() {
            cfg.model.fork_index = self.fork_index;
        }
        set(&mut cfg.model.bias_hidden, &self.bias_hidden);
        if let Some(f) = self.data_format {
            cfg.data.format = match f {
                FormatArg::Folder => DataFormat::Folder,
                FormatArg::Cityscapes => DataFormat::Cityscapes,
            };
        }
        set(&mut cfg.data.root, &self.data_root);
        set(&mut cfg.data.train_split, &self.train_split);
        set(&mut cfg.data.val_split, &self.val_split);
        if self.train_fraction.is_some() {
            cfg.data.train_fraction = self.train_fraction;
        }
        if !self.extra_val.is_empty() {
            cfg.data.extra_val = self.extra_val.clone();
        }
    }
}
