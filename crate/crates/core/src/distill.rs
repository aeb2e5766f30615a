//! Ensemble distillation into a single student network.
//!
//! EnD-KL matches the student's per-pixel probabilities to the teacher
//! ensemble's mean with `KL(teacher-mean || student)`. EnD-CRD pulls the
//! student's bottleneck representation of each batch item towards every
//! teacher's representation of the same item, using the other items of the
//! batch as negatives (InfoNCE over cosine similarities at temperature `T`).
//! Both variants add a weighted BCE task term against the ground truth.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::checkpoint;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::maps::{binary_kl, ProbMap};
use crate::model::{ArchConfig, Representation, SegNet};
use crate::seed::{self, stream, SeedRng};
use crate::tensor::Tensor;
use crate::train::{run_schedule, TrainConfig};
use crate::uq::EnsembleModel;

pub const DEFAULT_TEMPERATURE: f64 = 0.07;
pub const DEFAULT_TASK_WEIGHT: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistillMode {
    Kl,
    Crd,
    /// Both distillation terms, summed.
    KlCrd,
}

impl DistillMode {
    pub fn uses_kl(self) -> bool {
        matches!(self, Self::Kl | Self::KlCrd)
    }

    pub fn uses_crd(self) -> bool {
        matches!(self, Self::Crd | Self::KlCrd)
    }
}

impl FromStr for DistillMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kl" => Ok(Self::Kl),
            "crd" => Ok(Self::Crd),
            "kl+crd" => Ok(Self::KlCrd),
            other => Err(Error::Config(format!(
                "unknown distillation mode {other:?} (expected kl, crd or kl+crd)"
            ))),
        }
    }
}

impl fmt::Display for DistillMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Kl => "kl",
            Self::Crd => "crd",
            Self::KlCrd => "kl+crd",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub mode: DistillMode,
    /// CRD temperature.
    pub temperature: f64,
    pub task_loss_weight: f64,
    pub teacher_checkpoints: Vec<PathBuf>,
    /// Mini-batch size, which is also the CRD contrast set size.
    pub batch_size: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            mode: DistillMode::Kl,
            temperature: DEFAULT_TEMPERATURE,
            task_loss_weight: DEFAULT_TASK_WEIGHT,
            teacher_checkpoints: Vec::new(),
            batch_size: TrainConfig::default().batch_size,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode.uses_crd() && !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if !(self.task_loss_weight >= 0.0 && self.task_loss_weight.is_finite()) {
            return Err(Error::Config(format!(
                "task_loss_weight {} must be nonnegative",
                self.task_loss_weight
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Loads the teacher checkpoints, reporting every missing path at once.
    pub fn load_teachers(&self) -> Result<EnsembleModel> {
        if self.teacher_checkpoints.is_empty() {
            return Err(Error::Config("teacher list is empty".into()));
        }
        let missing: Vec<String> = self
            .teacher_checkpoints
            .iter()
            .filter(|p| !p.is_file())
            .map(|p| p.display().to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!(
                "missing teacher checkpoints: {}",
                missing.join(", ")
            )));
        }
        let members = self
            .teacher_checkpoints
            .iter()
            .map(|p| checkpoint::load(p))
            .collect::<Result<Vec<_>>>()?;
        EnsembleModel::new(members)
    }
}

/// Pixel-mean `KL(p || q)` with clamped logs.
pub fn kl_divergence(p: &ProbMap, q: &ProbMap) -> Result<f64> {
    p.check_same_dims(q.dims())?;
    let total: f64 = p
        .probs()
        .iter()
        .zip(q.probs())
        .map(|(&a, &b)| binary_kl(a, b))
        .sum();
    Ok(total / p.len() as f64)
}

fn check_crd_inputs(n_student: usize, n_teacher: usize, temperature: f64) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Contract(format!(
            "temperature {temperature} must be positive"
        )));
    }
    if n_student == 0 || n_student != n_teacher {
        return Err(Error::Dimension(format!(
            "{n_student} student and {n_teacher} teacher representations"
        )));
    }
    Ok(())
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "representations of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric(
            "cosine similarity of a zero-norm representation".into(),
        ));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Contrastive loss of one teacher: the batch mean over `i` of
/// `-ln softmax_j(cos(z_s[i], z_t[j]) / T)[i]`.
pub fn crd_loss(
    student: &[Representation],
    teacher: &[Representation],
    temperature: f64,
) -> Result<f64> {
    check_crd_inputs(student.len(), teacher.len(), temperature)?;
    let mut total = 0.0;
    for (i, s) in student.iter().enumerate() {
        let logits = teacher
            .iter()
            .map(|t| Ok(cosine(&s.vector, &t.vector)? / temperature))
            .collect::<Result<Vec<f64>>>()?;
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - logits[i];
    }
    Ok(total / student.len() as f64)
}

/// Sum of [`crd_loss`] over teachers.
pub fn crd_total_loss(
    student: &[Representation],
    per_teacher: &[Vec<Representation>],
    temperature: f64,
) -> Result<f64> {
    if per_teacher.is_empty() {
        return Err(Error::Contract("CRD needs at least one teacher".into()));
    }
    per_teacher
        .iter()
        .map(|t| crd_loss(student, t, temperature))
        .sum()
}

/// Differentiable [`crd_loss`]: student representations on the tape,
/// teacher representations as constants.
pub fn crd_loss_vars<'t>(
    student: &[Var<'t>],
    teacher: &[Vec<f64>],
    temperature: f64,
) -> Result<Var<'t>> {
    check_crd_inputs(student.len(), teacher.len(), temperature)?;
    let tape = student[0].tape();
    let teacher: Vec<Var<'t>> = teacher
        .iter()
        .map(|t| tape.constant(Tensor::from_vec(t.clone())))
        .collect();
    let mut terms = Vec::with_capacity(student.len());
    for (i, &s) in student.iter().enumerate() {
        let sims = teacher
            .iter()
            .map(|&t| s.cosine(t))
            .collect::<Result<Vec<_>>>()?;
        let logits = Var::stack(&sims)?.scale(1.0 / temperature)?;
        terms.push(logits.log_softmax(0)?.select(i)?.neg()?);
    }
    Var::stack(&terms)?.mean()
}

/// Value of each loss term for one step. Absent terms are `None`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub kl_term: Option<f64>,
    pub crd_term: Option<f64>,
    pub task_term: Option<f64>,
    pub total: f64,
}

/// Frozen-teacher outputs for a set of samples.
#[derive(Clone, Debug)]
pub struct TeacherTargets {
    /// Ensemble-mean probabilities per sample.
    pub mean: Vec<Vec<f64>>,
    /// `reps[m][i]`: teacher `m`'s representation of sample `i`.
    pub reps: Vec<Vec<Vec<f64>>>,
}

impl TeacherTargets {
    pub fn compute(teachers: &EnsembleModel, samples: &[&Sample]) -> Result<Self> {
        let mut reps = vec![Vec::with_capacity(samples.len()); teachers.len()];
        let mut mean = Vec::with_capacity(samples.len());
        for s in samples {
            let mut probs = Vec::with_capacity(teachers.len());
            for (m, t) in teachers.members().iter().enumerate() {
                let (logits, rep) = t.forward(&s.image, None)?;
                probs.push(ProbMap::from_tensor(&crate::autodiff::sigmoid(&logits))?);
                reps[m].push(rep.vector);
            }
            mean.push(crate::uq::mean_map(&probs)?.probs().to_vec());
        }
        Ok(Self { mean, reps })
    }

    fn select(&self, idx: &[usize]) -> Self {
        Self {
            mean: idx.iter().map(|&i| self.mean[i].clone()).collect(),
            reps: self
                .reps
                .iter()
                .map(|r| idx.iter().map(|&i| r[i].clone()).collect())
                .collect(),
        }
    }
}

/// One distillation step: the loss breakdown and the gradients of the
/// total loss with respect to the student's parameters.
///
/// Teachers are read only; they must be in eval mode.
pub fn distill_step(
    student: &SegNet,
    batch: &[&Sample],
    teachers: &EnsembleModel,
    cfg: &DistillConfig,
    rng: &mut SeedRng,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    if teachers
        .members()
        .iter()
        .any(|t| t.mode() != crate::model::Mode::Eval)
    {
        return Err(Error::Contract("teachers must be in eval mode".into()));
    }
    let targets = TeacherTargets::compute(teachers, batch)?;
    step_on_targets(student, batch, &targets, cfg, rng)
}

fn step_on_targets(
    student: &SegNet,
    batch: &[&Sample],
    targets: &TeacherTargets,
    cfg: &DistillConfig,
    rng: &mut SeedRng,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    if cfg.mode.uses_crd() {
        if let Some(r) = targets.reps.first().and_then(|r| r.first()) {
            if r.len() != student.arch().representation_dim() {
                return Err(Error::Dimension(format!(
                    "teacher representation has {} entries, student {}",
                    r.len(),
                    student.arch().representation_dim()
                )));
            }
        }
    }
    let tape = Tape::new();
    let params = student.bind(&tape, true);
    let mut kl_terms = Vec::new();
    let mut task_terms = Vec::new();
    let mut reps = Vec::new();
    let use_task = cfg.task_loss_weight > 0.0;
    for (i, s) in batch.iter().enumerate() {
        let out = student.forward_vars(&tape, &params, &s.image, Some(rng))?;
        let q = out.logits.sigmoid()?;
        if cfg.mode.uses_kl() {
            kl_terms.push(q.binary_kl_from(&targets.mean[i])?);
        }
        if use_task {
            task_terms.push(q.binary_cross_entropy(&s.mask.as_f64())?);
        }
        reps.push(out.rep);
    }

    let kl = if kl_terms.is_empty() {
        None
    } else {
        Some(Var::stack(&kl_terms)?.mean()?)
    };
    let crd = if cfg.mode.uses_crd() {
        let per_teacher = targets
            .reps
            .iter()
            .map(|t| crd_loss_vars(&reps, t, cfg.temperature))
            .collect::<Result<Vec<_>>>()?;
        Some(Var::stack(&per_teacher)?.sum()?)
    } else {
        None
    };
    let task = if use_task {
        Some(Var::stack(&task_terms)?.mean()?)
    } else {
        None
    };
    let weighted_task = task.map(|t| t.scale(cfg.task_loss_weight)).transpose()?;
    let mut total: Option<Var> = None;
    for v in [kl, crd, weighted_task].into_iter().flatten() {
        total = Some(match total {
            Some(t) => t.add(v)?,
            None => v,
        });
    }
    let total = total.ok_or_else(|| Error::Config("no loss terms are active".into()))?;
    tape.backward(total)?;
    let grads = params
        .iter()
        .map(|p| p.grad().expect("leaf grad"))
        .collect();
    let breakdown = LossBreakdown {
        kl_term: kl.map(|v| v.item()),
        crd_term: crd.map(|v| v.item()),
        task_term: task.map(|v| v.item()),
        total: total.item(),
    };
    for (name, v) in [
        ("kl_term", breakdown.kl_term),
        ("crd_term", breakdown.crd_term),
        ("task_term", breakdown.task_term),
        ("total", Some(breakdown.total)),
    ] {
        if let Some(v) = v {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("{name} is not finite")));
            }
        }
    }
    Ok((breakdown, grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

pub struct DistillOutcome {
    /// Trained student, left in eval mode.
    pub net: SegNet,
    pub log: Vec<DistillRecord>,
}

/// Seed for a student distilled in a run with base seed `base`; distinct
/// from every ensemble member's seed stream.
pub fn student_seed(base: u64) -> u64 {
    seed::derive_seed(base, stream::INIT, u64::MAX)
}

/// A freshly initialized student for the given seed.
pub fn init_student(arch: &ArchConfig, seed_: u64) -> Result<SegNet> {
    SegNet::new(arch.clone(), &mut seed::derived_rng(seed_, stream::INIT, 0))
}

/// Trains `student` against the frozen ensemble. `train.batch_size` is
/// replaced by `cfg.batch_size`.
pub fn distill(
    mut student: SegNet,
    data: &[Sample],
    teachers: &EnsembleModel,
    cfg: &DistillConfig,
    train: &TrainConfig,
) -> Result<DistillOutcome> {
    cfg.validate()?;
    let train = TrainConfig {
        batch_size: cfg.batch_size,
        ..train.clone()
    };
    let all: Vec<&Sample> = data.iter().collect();
    let targets = TeacherTargets::compute(teachers, &all)?;
    let mut log = Vec::new();
    run_schedule(
        &mut student,
        data.len(),
        &train,
        |net, batch, rng| {
            let samples: Vec<&Sample> = batch.iter().map(|&i| &data[i]).collect();
            let (loss, grads) = step_on_targets(net, &samples, &targets.select(batch), cfg, rng)?;
            Ok((grads, loss.total, loss))
        },
        |epoch, step, lr, loss| {
            log.push(DistillRecord {
                epoch,
                step,
                lr,
                loss,
            })
        },
    )?;
    Ok(DistillOutcome { net: student, log })
}

/// Writes `step,kl_term,crd_term,task_term,total`; absent terms are empty.
pub fn write_distill_log(path: &Path, log: &[DistillRecord]) -> Result<()> {
    let cell = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    let mut out = String::from("step,kl_term,crd_term,task_term,total\n");
    for r in log {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step,
            cell(r.loss.kl_term),
            cell(r.loss.crd_term),
            cell(r.loss.task_term),
            r.loss.total
        ));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Mean over samples of `KL(teacher-mean || student)`.
pub fn mean_kl_to_teachers(
    student: &SegNet,
    teachers: &EnsembleModel,
    samples: &[Sample],
) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let (mean, _) = teachers.predict(&s.image)?;
        total += kl_divergence(&mean, &student.predict_prob(&s.image)?)?;
    }
    Ok(total / samples.len().max(1) as f64)
}
