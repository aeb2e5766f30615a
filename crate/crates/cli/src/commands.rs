//! Subcommand implementations.
//!
//! Output layout under `--out`:
//!
//! ```text
//! resolved-config.txt
//! checkpoints/   member_<m>.ckpt, <name>.ckpt, student_<mode>.ckpt
//! logs/          per-step loss CSVs
//! reports/       metrics.csv, metrics.md, per_image_<method>.csv,
//!                reliability_<method>.csv, summary.md
//! figures/       reliability_<method>.svg
//! maps/          probability and uncertainty PFMs
//! ```

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use uqd_core::checkpoint;
use uqd_core::data::{dataset_checksum, generate_synthetic, write_dataset, Sample};
use uqd_core::distill::{self, init_student, student_seed, write_distill_log, DistillMode};
use uqd_core::io::{self, Dataset, MANIFEST_NAME};
use uqd_core::maps::{Mask, ProbMap};
use uqd_core::metrics::{evaluate_with, MetricRow};
use uqd_core::model::SegNet;
use uqd_core::report;
use uqd_core::seed::{self, stream};
use uqd_core::train::{train_member, write_loss_log};
use uqd_core::uq::{mcd_predict, uncertainty, EnsembleModel};
use uqd_core::{Error, Result};

use crate::config::{RunConfig, RESOLVED_NAME};

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Creates `sub` under the output directory.
fn out_dir(cfg: &RunConfig, sub: &str) -> Result<PathBuf> {
    let dir = cfg.out.join(sub);
    create_dir(&dir)?;
    Ok(dir)
}

fn write_resolved(cfg: &RunConfig) -> Result<()> {
    create_dir(&cfg.out)?;
    report::write_text(&cfg.out.join(RESOLVED_NAME), &cfg.to_text())
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST_NAME)
    } else {
        p.to_path_buf()
    }
}

fn required<'a, T>(value: &'a Option<T>, flag: &str, cmd: &str) -> Result<&'a T> {
    value
        .as_ref()
        .ok_or_else(|| Error::Config(format!("{cmd} needs --{flag}")))
}

fn load_split(path: &Path) -> Result<(Dataset, Vec<Sample>)> {
    let ds = Dataset::load(&manifest_path(path))?;
    let samples = ds.samples()?;
    if samples.is_empty() {
        return Err(Error::Config(format!("{} lists no images", path.display())));
    }
    Ok((ds, samples))
}

/// A directory (every `member_<m>.ckpt` in index order) or a
/// comma-separated list of files.
pub fn resolve_checkpoints(spec: &str) -> Result<Vec<PathBuf>> {
    let path = Path::new(spec);
    if path.is_dir() {
        let members = member_checkpoints(path)?;
        if members.is_empty() {
            return Err(Error::Config(format!(
                "{} contains no member_<m>.ckpt files",
                path.display()
            )));
        }
        return Ok(members);
    }
    Ok(spec
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(PathBuf::from)
        .collect())
}

fn member_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut found = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(index) = name
            .strip_prefix("member_")
            .and_then(|r| r.strip_suffix(".ckpt"))
            .and_then(|i| i.parse::<usize>().ok())
        {
            found.push((index, entry.path()));
        }
    }
    found.sort();
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

fn load_checked(path: &Path) -> Result<SegNet> {
    if !path.is_file() {
        return Err(Error::Config(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    checkpoint::load(path)
}

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let synth = cfg.synth();
    let train = generate_synthetic(&synth)?;
    let test = generate_synthetic(&synth.split(cfg.n_test, 1))?;
    write_resolved(cfg)?;
    for (split, samples) in [("train", &train), ("test", &test)] {
        let ds = write_dataset(samples, &cfg.out.join(split))?;
        println!(
            "{split}: {} pairs in {}, checksum {}",
            ds.len(),
            ds.root.display(),
            dataset_checksum(&ds)?
        );
    }
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let (_, samples) = load_split(required(&cfg.data, "data", "train")?)?;
    let arch = cfg.arch()?;
    let train = cfg.train();
    train.validate()?;
    write_resolved(cfg)?;
    let outcome = train_member(&samples, &arch, &train, cfg.seed)?;
    let ckpt = out_dir(cfg, "checkpoints")?.join(format!("{}.ckpt", cfg.name));
    checkpoint::save(&outcome.net, &ckpt)?;
    write_loss_log(
        &out_dir(cfg, "logs")?.join(format!("{}.csv", cfg.name)),
        &outcome.log,
    )?;
    println!(
        "{}: final loss {:.6}, checksum {}",
        ckpt.display(),
        outcome.log.last().map_or(f64::NAN, |r| r.loss),
        outcome.net.checksum()
    );
    Ok(())
}

pub fn train_ensemble(cfg: &RunConfig) -> Result<()> {
    if cfg.members == 0 {
        return Err(Error::Config("--members must be at least 1".into()));
    }
    let (_, samples) = load_split(required(&cfg.data, "data", "train-ensemble")?)?;
    let arch = cfg.arch()?;
    let train = cfg.train();
    train.validate()?;
    write_resolved(cfg)?;
    let ckpt_dir = out_dir(cfg, "checkpoints")?;
    let log_dir = out_dir(cfg, "logs")?;
    let outcomes = (0..cfg.members)
        .into_par_iter()
        .map(|m| train_member(&samples, &arch, &train, cfg.seed + m as u64))
        .collect::<Result<Vec<_>>>()?;
    for (m, o) in outcomes.iter().enumerate() {
        let ckpt = ckpt_dir.join(format!("member_{m}.ckpt"));
        checkpoint::save(&o.net, &ckpt)?;
        write_loss_log(&log_dir.join(format!("member_{m}.csv")), &o.log)?;
        println!(
            "{}: seed {}, final loss {:.6}, checksum {}",
            ckpt.display(),
            cfg.seed + m as u64,
            o.log.last().map_or(f64::NAN, |r| r.loss),
            o.net.checksum()
        );
    }
    Ok(())
}

fn mode_tag(mode: DistillMode) -> &'static str {
    match mode {
        DistillMode::Kl => "kl",
        DistillMode::Crd => "crd",
        DistillMode::KlCrd => "kl-crd",
    }
}

pub fn distill(cfg: &RunConfig) -> Result<()> {
    let (_, samples) = load_split(required(&cfg.data, "data", "distill")?)?;
    let spec = match &cfg.teachers {
        Some(t) => t.clone(),
        None => cfg.out.join("checkpoints").display().to_string(),
    };
    let dcfg = cfg.distill(resolve_checkpoints(&spec)?);
    dcfg.validate()?;
    let teachers = dcfg.load_teachers()?;
    let arch = cfg.arch()?;
    let train = cfg.train();
    train.validate()?;
    write_resolved(cfg)?;
    let seed = student_seed(cfg.seed);
    let student = init_student(&arch, seed)?;
    let train = uqd_core::train::TrainConfig { seed, ..train };
    let out = distill::distill(student, &samples, &teachers, &dcfg, &train)?;
    let tag = mode_tag(cfg.mode);
    let ckpt = out_dir(cfg, "checkpoints")?.join(format!("student_{tag}.ckpt"));
    checkpoint::save(&out.net, &ckpt)?;
    write_distill_log(
        &out_dir(cfg, "logs")?.join(format!("distill_{tag}.csv")),
        &out.log,
    )?;
    println!(
        "{}: {} teachers, final total loss {:.6}, checksum {}",
        ckpt.display(),
        teachers.len(),
        out.log.last().map_or(f64::NAN, |r| r.loss.total),
        out.net.checksum()
    );
    Ok(())
}

/// How a method turns an image into probabilities.
enum Predictor {
    Single(SegNet),
    Ensemble(EnsembleModel),
    Mcd {
        net: SegNet,
        passes: usize,
        seed: u64,
    },
    GroundTruth,
}

impl Predictor {
    /// Mean map and member maps for test item `index`.
    fn predict(&self, s: &Sample, index: usize) -> Result<(ProbMap, Vec<ProbMap>)> {
        match self {
            Self::Single(net) => {
                let p = net.predict_prob(&s.image)?;
                Ok((p.clone(), vec![p]))
            }
            Self::Ensemble(ens) => ens.predict(&s.image),
            Self::Mcd { net, passes, seed } => mcd_predict(
                net,
                &s.image,
                *passes,
                seed::derive_seed(*seed, stream::MC_PASS, index as u64),
            ),
            Self::GroundTruth => {
                let p = s.mask.to_prob_map();
                Ok((p.clone(), vec![p]))
            }
        }
    }
}

fn predictor(cfg: &RunConfig, method: &str, ckpt_dir: &Path) -> Result<Predictor> {
    let single = |name: &str| load_checked(&ckpt_dir.join(name)).map(Predictor::Single);
    match method {
        "baseline" => single("member_0.ckpt"),
        "end-kl" => single("student_kl.ckpt"),
        "end-crd" => single("student_crd.ckpt"),
        "de" => {
            let paths = member_checkpoints(ckpt_dir)?;
            if paths.is_empty() {
                return Err(Error::Config(format!(
                    "method de: no member_<m>.ckpt in {}",
                    ckpt_dir.display()
                )));
            }
            let members = paths
                .iter()
                .map(|p| checkpoint::load(p))
                .collect::<Result<Vec<_>>>()?;
            Ok(Predictor::Ensemble(EnsembleModel::new(members)?))
        }
        "mcd" => {
            let net = load_checked(&ckpt_dir.join("mcd.ckpt"))?;
            if net.dropout_rate() <= 0.0 {
                return Err(Error::Config(
                    "method mcd: mcd.ckpt has no dropout (train it with --name mcd --dropout 0.2)"
                        .into(),
                ));
            }
            Ok(Predictor::Mcd {
                net,
                passes: cfg.passes,
                seed: cfg.seed,
            })
        }
        "gt" => Ok(Predictor::GroundTruth),
        other => Err(Error::Config(format!("unknown method {other:?}"))),
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(
        || path.display().to_string(),
        |s| s.to_string_lossy().into_owned(),
    )
}

pub fn evaluate(cfg: &RunConfig) -> Result<()> {
    let (ds, samples) = load_split(required(&cfg.test_data, "test-data", "evaluate")?)?;
    let eval = cfg.eval();
    let ckpt_dir = cfg
        .checkpoints
        .as_ref()
        .map_or_else(|| cfg.out.join("checkpoints"), PathBuf::from);
    let predictors = cfg
        .methods
        .iter()
        .map(|m| predictor(cfg, m, &ckpt_dir))
        .collect::<Result<Vec<_>>>()?;
    write_resolved(cfg)?;
    let reports_dir = out_dir(cfg, "reports")?;
    let figures_dir = out_dir(cfg, "figures")?;
    let names: Vec<String> = ds.items.iter().map(|(img, _)| stem(img)).collect();
    let mut rows = Vec::new();
    for (method, pred) in cfg.methods.iter().zip(&predictors) {
        let outputs = samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| pred.predict(s, i))
            .collect::<Result<Vec<_>>>()?;
        let pairs: Vec<(ProbMap, Mask)> = outputs
            .iter()
            .zip(&samples)
            .map(|((p, _), s)| (p.clone(), s.mask.clone()))
            .collect();
        let rep = evaluate_with(&pairs, &eval)?;
        let per_image = rep.per_image.clone().unwrap_or_default();
        report::write_text(
            &reports_dir.join(format!("per_image_{method}.csv")),
            &report::per_image_csv(&names, &per_image)?,
        )?;
        report::write_text(
            &reports_dir.join(format!("reliability_{method}.csv")),
            &report::reliability_csv(&rep.reliability),
        )?;
        report::write_text(
            &figures_dir.join(format!("reliability_{method}.svg")),
            &report::reliability_svg(&rep.reliability, &format!("Reliability: {method}")),
        )?;
        let maps_dir = out_dir(cfg, &format!("maps/{method}"))?;
        for (name, (mean, members)) in names.iter().zip(&outputs) {
            let u = uncertainty(cfg.measure, mean, members)?;
            io::write_pfm(&maps_dir.join(format!("{name}_prob.pfm")), mean)?;
            io::write_pfm_values(
                &maps_dir.join(format!("{name}_{}.pfm", cfg.measure)),
                u.width,
                u.height,
                &u.values,
            )?;
        }
        rows.push((method.clone(), rep.row()));
    }
    report::write_text(
        &reports_dir.join("metrics.csv"),
        &report::metrics_csv(&rows),
    )?;
    let md = report::metrics_markdown(&rows);
    report::write_text(&reports_dir.join("metrics.md"), &md)?;
    print!("{md}");
    Ok(())
}

pub fn report(cfg: &RunConfig) -> Result<()> {
    let reports_dir = cfg.out.join("reports");
    let metrics_path = reports_dir.join("metrics.csv");
    let text = std::fs::read_to_string(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let rows: Vec<(String, MetricRow)> =
        report::parse_metrics_csv(&text, &metrics_path.display().to_string())?;
    let figures_dir = out_dir(cfg, "figures")?;
    let mut md = String::from("# Evaluation summary\n\n");
    md.push_str(&report::metrics_markdown(&rows));
    md.push_str("\n## Reliability\n\n");
    for (method, _) in &rows {
        let path = reports_dir.join(format!("reliability_{method}.csv"));
        if !path.is_file() {
            continue;
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let table = report::parse_reliability_csv(&text, &path.display().to_string())?;
        let svg = figures_dir.join(format!("reliability_{method}.svg"));
        report::write_text(
            &svg,
            &report::reliability_svg(&table, &format!("Reliability: {method}")),
        )?;
        md.push_str(&format!(
            "- {method}: ECE {:.4} over {} pixels, figure `figures/reliability_{method}.svg`\n",
            table.ece(),
            table.total()
        ));
    }
    report::write_text(&reports_dir.join("summary.md"), &md)?;
    print!("{md}");
    Ok(())
}

pub fn predict(cfg: &RunConfig) -> Result<()> {
    let image_path = required(&cfg.image, "image", "predict")?;
    let spec = required(&cfg.checkpoints, "checkpoints", "predict")?;
    let paths = resolve_checkpoints(spec)?;
    let nets = paths
        .iter()
        .map(|p| load_checked(p))
        .collect::<Result<Vec<_>>>()?;
    let image = io::read_pgm_image(image_path)?;
    let sample = Sample {
        mask: Mask::zeros(image.shape()[0], image.shape()[1]),
        image,
    };
    let pred = match nets.len() {
        1 if nets[0].dropout_rate() > 0.0 && cfg.passes > 0 => Predictor::Mcd {
            net: nets.into_iter().next().unwrap(),
            passes: cfg.passes,
            seed: cfg.seed,
        },
        1 => Predictor::Single(nets.into_iter().next().unwrap()),
        _ => Predictor::Ensemble(EnsembleModel::new(nets)?),
    };
    write_resolved(cfg)?;
    let (mean, members) = pred.predict(&sample, 0)?;
    let u = uncertainty(cfg.measure, &mean, &members)?;
    let dir = out_dir(cfg, "maps")?;
    let name = stem(image_path);
    let prob = dir.join(format!("{name}_prob.pfm"));
    let unc = dir.join(format!("{name}_{}.pfm", cfg.measure));
    io::write_pfm(&prob, &mean)?;
    io::write_pfm_values(&unc, u.width, u.height, &u.values)?;
    println!(
        "{} and {} from {} model(s)",
        prob.display(),
        unc.display(),
        members.len()
    );
    Ok(())
}
