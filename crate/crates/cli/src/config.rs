//! Run configuration: defaults, then a `key=value` file, then flags.
//!
//! Keys are the long flag names without the leading dashes (`batch-size`,
//! `lr`, ...); underscores are accepted in place of hyphens. Blank lines
//! and `#` comments are ignored. The fully resolved configuration is
//! written back as `resolved-config.txt` in the same syntax.

use std::path::{Path, PathBuf};

use uqd_core::data::SynthConfig;
use uqd_core::distill::{DistillConfig, DistillMode};
use uqd_core::metrics::{EcePooling, EvalOptions};
use uqd_core::model::{parse_widths, ArchConfig};
use uqd_core::train::TrainConfig;
use uqd_core::uq::Measure;
use uqd_core::{Error, Result};

pub const RESOLVED_NAME: &str = "resolved-config.txt";

/// Methods that `evaluate` knows how to run.
pub const METHODS: [&str; 6] = ["baseline", "de", "mcd", "end-kl", "end-crd", "gt"];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub n: usize,
    pub n_test: usize,
    pub size: usize,
    pub curves: usize,
    pub thickness_min: f64,
    pub thickness_max: f64,
    pub noise_sigma: f64,
    pub widths: [usize; 3],
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub eta_min: f64,
    pub members: usize,
    pub name: String,
    pub mode: DistillMode,
    pub temperature: f64,
    pub task_weight: f64,
    pub teachers: Option<String>,
    pub checkpoints: Option<String>,
    pub image: Option<PathBuf>,
    pub methods: Vec<String>,
    pub passes: usize,
    pub bins: usize,
    pub threshold: f64,
    pub measure: Measure,
    pub ece_pooling: EcePooling,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let train = TrainConfig::default();
        let distill = DistillConfig::default();
        let eval = EvalOptions::default();
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            data: None,
            test_data: None,
            n: synth.n_images,
            n_test: 10,
            size: synth.height,
            curves: synth.n_curves,
            thickness_min: synth.thickness_min,
            thickness_max: synth.thickness_max,
            noise_sigma: synth.noise_sigma,
            widths: ArchConfig::default().widths,
            dropout: 0.0,
            epochs: train.epochs,
            batch_size: train.batch_size,
            lr: train.lr_init,
            weight_decay: train.weight_decay,
            eta_min: train.eta_min,
            members: uqd_core::uq::DEFAULT_MEMBERS,
            name: "model".into(),
            mode: distill.mode,
            temperature: distill.temperature,
            task_weight: distill.task_loss_weight,
            teachers: None,
            checkpoints: None,
            image: None,
            methods: METHODS[..5].iter().map(|s| s.to_string()).collect(),
            passes: uqd_core::uq::DEFAULT_MC_PASSES,
            bins: eval.bins,
            threshold: eval.threshold,
            measure: Measure::Entropy,
            ece_pooling: eval.ece_pooling,
        }
    }
}

fn parse<T: std::str::FromStr>(origin: &str, value: &str, what: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{origin}: {value:?} is not a valid {what}")))
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn opt_string(value: &str) -> Option<String> {
    (!value.is_empty()).then(|| value.to_string())
}

impl RunConfig {
    /// Applies one setting; `origin` names its source in error messages.
    pub fn set(&mut self, key: &str, value: &str, origin: &str) -> Result<()> {
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        match key.as_str() {
            "seed" => self.seed = parse(origin, value, "integer")?,
            "out" => self.out = PathBuf::from(value),
            "data" => self.data = opt_path(value),
            "test-data" => self.test_data = opt_path(value),
            "n" => self.n = parse(origin, value, "count")?,
            "n-test" => self.n_test = parse(origin, value, "count")?,
            "size" => self.size = parse(origin, value, "size")?,
            "curves" => self.curves = parse(origin, value, "count")?,
            "thickness-min" => self.thickness_min = parse(origin, value, "number")?,
            "thickness-max" => self.thickness_max = parse(origin, value, "number")?,
            "noise-sigma" => self.noise_sigma = parse(origin, value, "number")?,
            "widths" => {
                self.widths =
                    parse_widths(value).map_err(|e| Error::Config(format!("{origin}: {e}")))?
            }
            "dropout" => self.dropout = parse(origin, value, "rate")?,
            "epochs" => self.epochs = parse(origin, value, "count")?,
            "batch-size" => self.batch_size = parse(origin, value, "count")?,
            "lr" => self.lr = parse(origin, value, "number")?,
            "weight-decay" => self.weight_decay = parse(origin, value, "number")?,
            "eta-min" => self.eta_min = parse(origin, value, "number")?,
            "members" => self.members = parse(origin, value, "count")?,
            "name" => {
                if value.is_empty() || value.contains(['/', '\\']) {
                    return Err(Error::Config(format!("{origin}: invalid name {value:?}")));
                }
                self.name = value.to_string()
            }
            "mode" => {
                self.mode = value
                    .parse()
                    .map_err(|e: Error| Error::Config(format!("{origin}: {e}")))?
            }
            "temperature" => self.temperature = parse(origin, value, "number")?,
            "task-weight" => self.task_weight = parse(origin, value, "number")?,
            "teachers" => self.teachers = opt_string(value),
            "checkpoints" => self.checkpoints = opt_string(value),
            "image" => self.image = opt_path(value),
            "methods" => {
                let methods: Vec<String> = value
                    .split(',')
                    .map(str::trim)
                    .filter(|m| !m.is_empty())
                    .map(str::to_string)
                    .collect();
                if let Some(bad) = methods.iter().find(|m| !METHODS.contains(&m.as_str())) {
                    return Err(Error::Config(format!(
                        "{origin}: unknown method {bad:?} (expected one of {})",
                        METHODS.join(", ")
                    )));
                }
                if methods.is_empty() {
                    return Err(Error::Config(format!("{origin}: no methods given")));
                }
                self.methods = methods;
            }
            "passes" => self.passes = parse(origin, value, "count")?,
            "bins" => self.bins = parse(origin, value, "count")?,
            "threshold" => self.threshold = parse(origin, value, "number")?,
            "measure" => {
                self.measure = value
                    .parse()
                    .map_err(|e: Error| Error::Config(format!("{origin}: {e}")))?
            }
            "ece-pooling" => {
                self.ece_pooling = match value {
                    "pixel" => EcePooling::Pixel,
                    "image" => EcePooling::ImageMean,
                    other => {
                        return Err(Error::Config(format!(
                            "{origin}: ece-pooling {other:?} (expected pixel or image)"
                        )))
                    }
                }
            }
            other => return Err(Error::Config(format!("{origin}: unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies every `key=value` line of `text`.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{origin} line {}: expected key=value", i + 1))
            })?;
            self.set(k, v, &format!("{origin} line {} ({})", i + 1, k.trim()))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Canonical `key=value` dump; reading it back reproduces `self`.
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map_or(String::new(), |p| p.display().to_string())
        };
        let s = |v: &Option<String>| v.clone().unwrap_or_default();
        let pooling = match self.ece_pooling {
            EcePooling::Pixel => "pixel",
            EcePooling::ImageMean => "image",
        };
        let w = self.widths;
        [
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("data", path(&self.data)),
            ("test-data", path(&self.test_data)),
            ("n", self.n.to_string()),
            ("n-test", self.n_test.to_string()),
            ("size", self.size.to_string()),
            ("curves", self.curves.to_string()),
            ("thickness-min", format!("{:?}", self.thickness_min)),
            ("thickness-max", format!("{:?}", self.thickness_max)),
            ("noise-sigma", format!("{:?}", self.noise_sigma)),
            ("widths", format!("{},{},{}", w[0], w[1], w[2])),
            ("dropout", format!("{:?}", self.dropout)),
            ("epochs", self.epochs.to_string()),
            ("batch-size", self.batch_size.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("weight-decay", format!("{:?}", self.weight_decay)),
            ("eta-min", format!("{:?}", self.eta_min)),
            ("members", self.members.to_string()),
            ("name", self.name.clone()),
            ("mode", self.mode.to_string()),
            ("temperature", format!("{:?}", self.temperature)),
            ("task-weight", format!("{:?}", self.task_weight)),
            ("teachers", s(&self.teachers)),
            ("checkpoints", s(&self.checkpoints)),
            ("image", path(&self.image)),
            ("methods", self.methods.join(",")),
            ("passes", self.passes.to_string()),
            ("bins", self.bins.to_string()),
            ("threshold", format!("{:?}", self.threshold)),
            ("measure", self.measure.to_string()),
            ("ece-pooling", pooling.to_string()),
        ]
        .iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect()
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            n_images: self.n,
            height: self.size,
            width: self.size,
            n_curves: self.curves,
            thickness_min: self.thickness_min,
            thickness_max: self.thickness_max,
            noise_sigma: self.noise_sigma,
            seed: self.seed,
        }
    }

    pub fn arch(&self) -> Result<ArchConfig> {
        ArchConfig::new(self.widths, self.dropout)
            .map_err(|e| Error::Config(format!("--widths/--dropout: {e}")))
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_init: self.lr,
            weight_decay: self.weight_decay,
            eta_min: self.eta_min,
            seed: self.seed,
        }
    }

    pub fn distill(&self, teachers: Vec<PathBuf>) -> DistillConfig {
        DistillConfig {
            mode: self.mode,
            temperature: self.temperature,
            task_loss_weight: self.task_weight,
            teacher_checkpoints: teachers,
            batch_size: self.batch_size,
        }
    }

    pub fn eval(&self) -> EvalOptions {
        EvalOptions {
            bins: self.bins,
            threshold: self.threshold,
            ece_pooling: self.ece_pooling,
        }
    }
}
