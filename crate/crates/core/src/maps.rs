//! Per-pixel probability maps and binary masks.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied wherever a probability enters a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// `ln(max(x, PROB_FLOOR))`.
pub fn clamped_ln(x: f64) -> f64 {
    x.max(PROB_FLOOR).ln()
}

/// Binary KL divergence `KL(Bern(p) || Bern(q))` with clamped logs.
pub fn binary_kl(p: f64, q: f64) -> f64 {
    p * (clamped_ln(p) - clamped_ln(q)) + (1.0 - p) * (clamped_ln(1.0 - p) - clamped_ln(1.0 - q))
}

/// Binary cross-entropy of probability `q` against target `y`.
pub fn binary_xent(y: f64, q: f64) -> f64 {
    -(y * clamped_ln(q) + (1.0 - y) * clamped_ln(1.0 - q))
}

/// Entropy (nats) of a Bernoulli with parameter `p`.
pub fn binary_entropy(p: f64) -> f64 {
    let h = -p * clamped_ln(p) - (1.0 - p) * clamped_ln(1.0 - p);
    h.max(0.0)
}

/// Where a probability map came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Single,
    EnsembleMean(usize),
    McdMean(usize),
}

/// Foreground probability for every pixel of an `H × W` image.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    probs: Vec<f64>,
    pub provenance: Provenance,
}

impl ProbMap {
    pub fn new(height: usize, width: usize, probs: Vec<f64>) -> Result<Self> {
        if height * width != probs.len() || height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "{height}x{width} map needs {} values, got {}",
                height * width,
                probs.len()
            )));
        }
        if let Some(bad) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Contract(format!("probability {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            probs,
            provenance: Provenance::Single,
        })
    }

    pub fn constant(height: usize, width: usize, p: f64) -> Result<Self> {
        Self::new(height, width, vec![p; height * width])
    }

    /// From an `H × W` tensor of probabilities.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [h, w] => Self::new(*h, *w, t.data().to_vec()),
            [1, h, w] => Self::new(*h, *w, t.data().to_vec()),
            s => Err(Error::Dimension(format!(
                "probability map from shape {s:?}"
            ))),
        }
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width], self.probs.clone()).expect("map dims match data")
    }

    pub(crate) fn check_same_dims(&self, other: (usize, usize)) -> Result<()> {
        if self.dims() != other {
            return Err(Error::Dimension(format!(
                "map {:?} vs {:?}",
                self.dims(),
                other
            )));
        }
        Ok(())
    }
}

/// Binary `{0, 1}` label image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl Mask {
    /// Fails with a contract error if any label is not 0 or 1.
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if height * width != labels.len() || height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "{height}x{width} mask needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Contract(format!("mask label {bad} is not binary")));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.labels.iter().filter(|&&l| l == 1).count() as f64 / self.labels.len() as f64
    }

    /// Labels as `0.0` / `1.0` targets.
    pub fn as_f64(&self) -> Vec<f64> {
        self.labels.iter().map(|&l| f64::from(l)).collect()
    }

    /// The mask itself viewed as a (perfectly confident) probability map.
    pub fn to_prob_map(&self) -> ProbMap {
        ProbMap::new(self.height, self.width, self.as_f64())
            .expect("binary labels are probabilities")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn kl_examples() {
        assert_eq!(binary_kl(0.3, 0.3), 0.0);
        assert_abs_diff_eq!(binary_kl(1.0, 0.5), 2f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(binary_kl(0.9, 0.5), 0.368_064_2, epsilon = 1e-6);
        assert_abs_diff_eq!(binary_kl(0.5, 0.9), 0.510_825_6, epsilon = 1e-6);
    }

    #[test]
    fn entropy_bounds() {
        assert_abs_diff_eq!(binary_entropy(0.5), 2f64.ln(), epsilon = 1e-15);
        assert_eq!(binary_entropy(0.0), 0.0);
        assert_eq!(binary_entropy(1.0), 0.0);
        assert_abs_diff_eq!(binary_entropy(0.25), 0.562_335, epsilon = 1e-6);
    }

    #[test]
    fn mask_rejects_non_binary() {
        assert!(matches!(
            Mask::new(1, 2, vec![0, 2]),
            Err(Error::Contract(_))
        ));
        assert!(matches!(Mask::new(1, 2, vec![0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn prob_map_rejects_out_of_range() {
        assert!(ProbMap::new(1, 1, vec![1.5]).is_err());
        assert!(ProbMap::new(1, 1, vec![f64::NAN]).is_err());
    }
}
