//! Segmentation (DSC, MCC) and calibration (ECE, Brier, NLL) metrics.
//!
//! Conventions:
//! - binarization puts a pixel exactly at the threshold in the foreground;
//! - DSC of two empty masks is 1.0;
//! - MCC with a zero factor in its denominator is 0.0;
//! - ECE bins the confidence of the predicted class, `max(p, 1 - p)`, into
//!   equal-width intervals over `[0.5, 1.0]`, each closed-open except the
//!   last, which is closed.

use std::ops::AddAssign;

use crate::error::{Error, Result};
use crate::maps::{clamped_ln, Mask, ProbMap};

pub const DEFAULT_BINS: usize = 10;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Foreground wherever `p >= threshold`.
pub fn binarize(p: &ProbMap, threshold: f64) -> Result<Mask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Contract(format!(
            "threshold {threshold} not in (0, 1)"
        )));
    }
    let labels = p
        .probs()
        .iter()
        .map(|&v| u8::from(v >= threshold))
        .collect();
    Mask::new(p.height(), p.width(), labels)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn from_masks(pred: &Mask, gt: &Mask) -> Result<Self> {
        check_dims(pred.dims(), gt.dims())?;
        let mut c = Self::default();
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            match (p, g) {
                (1, 1) => c.tp += 1,
                (1, 0) => c.fp += 1,
                (0, 0) => c.tn += 1,
                _ => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// `2 tp / (2 tp + fp + fn)`, or 1.0 when both masks are empty.
    pub fn dice(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }

    pub fn mcc(&self) -> f64 {
        mcc(self)
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.tn += o.tn;
        self.fn_ += o.fn_;
    }
}

pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    Ok(ConfusionCounts::from_masks(pred, gt)?.dice())
}

/// Matthews correlation coefficient; 0.0 when any marginal is empty.
pub fn mcc(c: &ConfusionCounts) -> f64 {
    let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
    let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if denom == 0.0 {
        return 0.0;
    }
    ((tp * tn - fp * fn_) / denom.sqrt()).clamp(-1.0, 1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReliabilityBin {
    pub confidence_lo: f64,
    pub confidence_hi: f64,
    /// Mean confidence of the pixels in the bin (0 when empty).
    pub mean_confidence: f64,
    /// Fraction of correctly classified pixels in the bin (0 when empty).
    pub accuracy: f64,
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReliabilityTable {
    pub bins: Vec<ReliabilityBin>,
}

impl ReliabilityTable {
    pub fn total(&self) -> u64 {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// Count-weighted mean gap between accuracy and confidence.
    pub fn ece(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        self.bins
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| b.count as f64 / total as f64 * (b.accuracy - b.mean_confidence).abs())
            .sum()
    }
}

/// Running per-bin sums; mergeable across images.
#[derive(Clone, Debug, PartialEq)]
pub struct BinAccumulator {
    edges: Vec<f64>,
    conf_sum: Vec<f64>,
    correct: Vec<u64>,
    count: Vec<u64>,
}

impl BinAccumulator {
    pub fn new(bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::Contract("ECE needs at least one bin".into()));
        }
        let width = 0.5 / bins as f64;
        let edges = (0..=bins)
            .map(|b| {
                if b == bins {
                    1.0
                } else {
                    0.5 + b as f64 * width
                }
            })
            .collect();
        Ok(Self {
            edges,
            conf_sum: vec![0.0; bins],
            correct: vec![0; bins],
            count: vec![0; bins],
        })
    }

    pub fn bins(&self) -> usize {
        self.count.len()
    }

    /// Bin of a confidence in `[0.5, 1]`, consistent with the edge table.
    fn index(&self, confidence: f64) -> usize {
        let b = self.bins();
        let width = 0.5 / b as f64;
        let mut i = (((confidence - 0.5) / width).floor().max(0.0) as usize).min(b - 1);
        while i > 0 && confidence < self.edges[i] {
            i -= 1;
        }
        while i + 1 < b && confidence >= self.edges[i + 1] {
            i += 1;
        }
        i
    }

    pub fn add(&mut self, p: &ProbMap, gt: &Mask) -> Result<()> {
        check_dims(p.dims(), gt.dims())?;
        for (&prob, &label) in p.probs().iter().zip(gt.labels()) {
            let predicted = u8::from(prob >= DEFAULT_THRESHOLD);
            let confidence = prob.max(1.0 - prob);
            let i = self.index(confidence);
            self.conf_sum[i] += confidence;
            self.count[i] += 1;
            if predicted == label {
                self.correct[i] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &BinAccumulator) -> Result<()> {
        if other.bins() != self.bins() {
            return Err(Error::Dimension(format!(
                "merging {} bins into {}",
                other.bins(),
                self.bins()
            )));
        }
        for i in 0..self.bins() {
            self.conf_sum[i] += other.conf_sum[i];
            self.correct[i] += other.correct[i];
            self.count[i] += other.count[i];
        }
        Ok(())
    }

    pub fn table(&self) -> ReliabilityTable {
        let bins = (0..self.bins())
            .map(|i| {
                let n = self.count[i];
                let (mean_confidence, accuracy) = if n == 0 {
                    (0.0, 0.0)
                } else {
                    (
                        self.conf_sum[i] / n as f64,
                        self.correct[i] as f64 / n as f64,
                    )
                };
                ReliabilityBin {
                    confidence_lo: self.edges[i],
                    confidence_hi: self.edges[i + 1],
                    mean_confidence,
                    accuracy,
                    count: n,
                }
            })
            .collect();
        ReliabilityTable { bins }
    }
}

/// Expected calibration error with `bins` equal-width confidence bins.
pub fn ece(p: &ProbMap, gt: &Mask, bins: usize) -> Result<(f64, ReliabilityTable)> {
    let mut acc = BinAccumulator::new(bins)?;
    acc.add(p, gt)?;
    let table = acc.table();
    Ok((table.ece(), table))
}

fn squared_error_sum(p: &ProbMap, gt: &Mask) -> Result<f64> {
    check_dims(p.dims(), gt.dims())?;
    Ok(p.probs()
        .iter()
        .zip(gt.labels())
        .map(|(&p, &y)| (p - f64::from(y)).powi(2))
        .sum())
}

fn nll_sum(p: &ProbMap, gt: &Mask) -> Result<f64> {
    check_dims(p.dims(), gt.dims())?;
    Ok(p.probs()
        .iter()
        .zip(gt.labels())
        .map(|(&p, &y)| -clamped_ln(if y == 1 { p } else { 1.0 - p }))
        .sum())
}

/// Mean squared error between probabilities and labels.
pub fn brier(p: &ProbMap, gt: &Mask) -> Result<f64> {
    Ok(squared_error_sum(p, gt)? / p.len() as f64)
}

/// Mean negative log-probability of the true class, floored at `1e-12`.
pub fn nll(p: &ProbMap, gt: &Mask) -> Result<f64> {
    Ok(nll_sum(p, gt)? / p.len() as f64)
}

fn check_dims(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

/// All scalar metrics of one image or one pooled population.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub dsc: f64,
    pub mcc: f64,
    pub ece: f64,
    pub brier: f64,
    pub nll: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EcePooling {
    /// Bins pool every pixel of every image.
    #[default]
    Pixel,
    /// Mean of the per-image ECE values.
    ImageMean,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub bins: usize,
    pub threshold: f64,
    pub ece_pooling: EcePooling,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            bins: DEFAULT_BINS,
            threshold: DEFAULT_THRESHOLD,
            ece_pooling: EcePooling::Pixel,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationReport {
    pub dsc: f64,
    pub mcc: f64,
    pub ece: f64,
    pub brier: f64,
    pub nll: f64,
    pub reliability: ReliabilityTable,
    pub per_image: Option<Vec<MetricRow>>,
}

impl CalibrationReport {
    pub fn row(&self) -> MetricRow {
        MetricRow {
            dsc: self.dsc,
            mcc: self.mcc,
            ece: self.ece,
            brier: self.brier,
            nll: self.nll,
        }
    }
}

/// Pooled metrics with default options (10 bins, threshold 0.5).
pub fn evaluate(pairs: &[(ProbMap, Mask)]) -> Result<CalibrationReport> {
    evaluate_with(pairs, &EvalOptions::default())
}

/// Pixel-pooled aggregate metrics plus per-image rows.
pub fn evaluate_with(pairs: &[(ProbMap, Mask)], opts: &EvalOptions) -> Result<CalibrationReport> {
    if pairs.is_empty() {
        return Err(Error::Contract("evaluate needs at least one image".into()));
    }
    let mut counts = ConfusionCounts::default();
    let mut bins = BinAccumulator::new(opts.bins)?;
    let (mut se, mut nl, mut pixels) = (0.0, 0.0, 0usize);
    let mut per_image = Vec::with_capacity(pairs.len());
    for (p, gt) in pairs {
        let c = ConfusionCounts::from_masks(&binarize(p, opts.threshold)?, gt)?;
        let mut b = BinAccumulator::new(opts.bins)?;
        b.add(p, gt)?;
        let (img_se, img_nl) = (squared_error_sum(p, gt)?, nll_sum(p, gt)?);
        per_image.push(MetricRow {
            dsc: c.dice(),
            mcc: c.mcc(),
            ece: b.table().ece(),
            brier: img_se / p.len() as f64,
            nll: img_nl / p.len() as f64,
        });
        counts += c;
        bins.merge(&b)?;
        se += img_se;
        nl += img_nl;
        pixels += p.len();
    }
    let reliability = bins.table();
    let ece = match opts.ece_pooling {
        EcePooling::Pixel => reliability.ece(),
        EcePooling::ImageMean => {
            per_image.iter().map(|r| r.ece).sum::<f64>() / per_image.len() as f64
        }
    };
    Ok(CalibrationReport {
        dsc: counts.dice(),
        mcc: counts.mcc(),
        ece,
        brier: se / pixels as f64,
        nll: nl / pixels as f64,
        reliability,
        per_image: Some(per_image),
    })
}
