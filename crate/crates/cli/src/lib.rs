//! The `uqd` command line: synthetic data, ensemble and MC-Dropout
//! training, distillation, prediction, evaluation and reports.
//!
//! Every subcommand accepts the same settings, each as a long flag or as a
//! key in a `--config` file. Exit codes: 0 on success, 1 for contract or
//! configuration errors, 2 for I/O errors.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use uqd_core::{Error, Result};

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(
    name = "uqd",
    version,
    about = "Ensemble uncertainty quantification for binary segmentation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic train/test dataset
    GenData(Settings),
    /// Train one segmenter (use --dropout for an MC-Dropout model)
    Train(Settings),
    /// Train M independently seeded ensemble members
    TrainEnsemble(Settings),
    /// Distill an ensemble into a single student
    Distill(Settings),
    /// Predict probability and uncertainty maps for one image
    Predict(Settings),
    /// Evaluate methods on the test split and write reports
    Evaluate(Settings),
    /// Rebuild summary tables and figures from evaluation CSVs
    Report(Settings),
}

/// Settings shared by all subcommands; see `RunConfig` for meanings.
#[derive(Args, Debug, Default)]
pub struct Settings {
    /// key=value configuration file, overridden by flags
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<String>,
    /// Output directory
    #[arg(long)]
    pub out: Option<String>,
    /// Training manifest (or its directory)
    #[arg(long)]
    pub data: Option<String>,
    /// Test manifest (or its directory)
    #[arg(long)]
    pub test_data: Option<String>,
    /// Number of training images to generate
    #[arg(long)]
    pub n: Option<String>,
    #[arg(long)]
    pub n_test: Option<String>,
    /// Image side length
    #[arg(long)]
    pub size: Option<String>,
    #[arg(long)]
    pub curves: Option<String>,
    #[arg(long)]
    pub thickness_min: Option<String>,
    #[arg(long)]
    pub thickness_max: Option<String>,
    #[arg(long)]
    pub noise_sigma: Option<String>,
    /// Channel widths, e.g. 8,16,32
    #[arg(long)]
    pub widths: Option<String>,
    #[arg(long)]
    pub dropout: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    #[arg(long)]
    pub weight_decay: Option<String>,
    #[arg(long)]
    pub eta_min: Option<String>,
    /// Ensemble size
    #[arg(long)]
    pub members: Option<String>,
    /// Checkpoint name for `train`
    #[arg(long)]
    pub name: Option<String>,
    /// kl | crd | kl+crd
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub temperature: Option<String>,
    #[arg(long)]
    pub task_weight: Option<String>,
    /// Teacher checkpoint directory or comma-separated files
    #[arg(long)]
    pub teachers: Option<String>,
    /// Checkpoint directory or comma-separated files
    #[arg(long)]
    pub checkpoints: Option<String>,
    /// Input image for `predict`
    #[arg(long)]
    pub image: Option<String>,
    /// Comma-separated: baseline,de,mcd,end-kl,end-crd,gt
    #[arg(long)]
    pub methods: Option<String>,
    /// MC-Dropout passes
    #[arg(long)]
    pub passes: Option<String>,
    #[arg(long)]
    pub bins: Option<String>,
    #[arg(long)]
    pub threshold: Option<String>,
    /// entropy | variance | mi
    #[arg(long)]
    pub measure: Option<String>,
    /// pixel | image
    #[arg(long)]
    pub ece_pooling: Option<String>,
}

impl Settings {
    fn flags(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("seed", &self.seed),
            ("out", &self.out),
            ("data", &self.data),
            ("test-data", &self.test_data),
            ("n", &self.n),
            ("n-test", &self.n_test),
            ("size", &self.size),
            ("curves", &self.curves),
            ("thickness-min", &self.thickness_min),
            ("thickness-max", &self.thickness_max),
            ("noise-sigma", &self.noise_sigma),
            ("widths", &self.widths),
            ("dropout", &self.dropout),
            ("epochs", &self.epochs),
            ("batch-size", &self.batch_size),
            ("lr", &self.lr),
            ("weight-decay", &self.weight_decay),
            ("eta-min", &self.eta_min),
            ("members", &self.members),
            ("name", &self.name),
            ("mode", &self.mode),
            ("temperature", &self.temperature),
            ("task-weight", &self.task_weight),
            ("teachers", &self.teachers),
            ("checkpoints", &self.checkpoints),
            ("image", &self.image),
            ("methods", &self.methods),
            ("passes", &self.passes),
            ("bins", &self.bins),
            ("threshold", &self.threshold),
            ("measure", &self.measure),
            ("ece-pooling", &self.ece_pooling),
        ]
    }

    /// Defaults, then the config file, then flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        for (key, value) in self.flags() {
            if let Some(v) = value {
                cfg.set(key, v, &format!("--{key}"))?;
            }
        }
        Ok(cfg)
    }
}

/// Caps rayon's pool at `UQD_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(value) = std::env::var("UQD_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("UQD_THREADS={value:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("UQD_THREADS: {e}")))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(s) => commands::gen_data(&s.resolve()?),
        Command::Train(s) => commands::train(&s.resolve()?),
        Command::TrainEnsemble(s) => commands::train_ensemble(&s.resolve()?),
        Command::Distill(s) => commands::distill(&s.resolve()?),
        Command::Predict(s) => commands::predict(&s.resolve()?),
        Command::Evaluate(s) => commands::evaluate(&s.resolve()?),
        Command::Report(s) => commands::report(&s.resolve()?),
    }
}
