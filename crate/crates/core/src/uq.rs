//! Deep Ensemble and Monte-Carlo Dropout inference, plus pixelwise
//! uncertainty measures.
//!
//! Means over members or passes are taken as `x_0 + (sum_m (x_m - x_0)) / M`
//! with the sum in ascending index order. The result is reproducible and
//! equals `x_0` exactly when all members agree.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::maps::{binary_entropy, ProbMap, Provenance};
use crate::model::SegNet;
use crate::seed;
use crate::tensor::Tensor;

/// Default ensemble size.
pub const DEFAULT_MEMBERS: usize = 5;
/// Default number of stochastic test-time passes for MC-Dropout.
pub const DEFAULT_MC_PASSES: usize = 10;

/// `M` independently trained networks sharing one architecture.
#[derive(Clone, Debug)]
pub struct EnsembleModel {
    members: Vec<SegNet>,
}

impl EnsembleModel {
    /// Freezes the members (eval mode). Fails on an empty list or mixed
    /// architectures.
    pub fn new(mut members: Vec<SegNet>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::Contract("ensemble needs at least one member".into()))?;
        let arch = first.arch().clone();
        if let Some(m) = members.iter().position(|m| m.arch().widths != arch.widths) {
            return Err(Error::Dimension(format!(
                "member {m} has widths {:?}, member 0 has {:?}",
                members[m].arch().widths,
                arch.widths
            )));
        }
        members.iter_mut().for_each(SegNet::eval);
        Ok(Self { members })
    }

    pub fn members(&self) -> &[SegNet] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Per-member probabilities and their arithmetic mean.
    pub fn predict(&self, image: &Tensor) -> Result<(ProbMap, Vec<ProbMap>)> {
        let members = self
            .members
            .iter()
            .map(|m| m.predict_prob(image))
            .collect::<Result<Vec<_>>>()?;
        let mean = mean_map(&members)?.with_provenance(Provenance::EnsembleMean(members.len()));
        Ok((mean, members))
    }
}

/// Deep Ensemble prediction: the mean of the members' predictive
/// distributions, together with the members' own maps.
pub fn ensemble_predict(ens: &EnsembleModel, image: &Tensor) -> Result<(ProbMap, Vec<ProbMap>)> {
    ens.predict(image)
}

/// Pixelwise mean of `f(value)` over members, anchored at member 0.
fn anchored_mean(maps: &[ProbMap], f: impl Fn(f64) -> f64) -> Vec<f64> {
    let anchor: Vec<f64> = maps[0].probs().iter().map(|&p| f(p)).collect();
    let mut shift = vec![0.0; anchor.len()];
    for m in &maps[1..] {
        for ((s, &p), &a) in shift.iter_mut().zip(m.probs()).zip(&anchor) {
            *s += f(p) - a;
        }
    }
    let n = maps.len() as f64;
    anchor.iter().zip(shift).map(|(&a, s)| a + s / n).collect()
}

/// Pixelwise arithmetic mean of the maps.
pub fn mean_map(maps: &[ProbMap]) -> Result<ProbMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Contract("mean of zero probability maps".into()))?;
    for m in maps {
        m.check_same_dims(first.dims())?;
    }
    let probs = anchored_mean(maps, |p| p)
        .into_iter()
        .map(|p| p.clamp(0.0, 1.0))
        .collect();
    ProbMap::new(first.height(), first.width(), probs)
}

/// Monte-Carlo Dropout: `passes` dropout-active forwards, pass `k` seeded
/// with `seed + k`, and their mean.
pub fn mcd_predict(
    net: &SegNet,
    image: &Tensor,
    passes: usize,
    seed: u64,
) -> Result<(ProbMap, Vec<ProbMap>)> {
    if net.dropout_rate() <= 0.0 {
        return Err(Error::Contract(
            "MC-Dropout needs a network with a positive dropout rate".into(),
        ));
    }
    if passes == 0 {
        return Err(Error::Contract("MC-Dropout needs at least one pass".into()));
    }
    let maps = (0..passes)
        .map(|k| {
            let mut rng = seed::rng(seed.wrapping_add(k as u64));
            net.predict_prob_stochastic(image, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = mean_map(&maps)?.with_provenance(Provenance::McdMean(passes));
    Ok((mean, maps))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Measure {
    Entropy,
    Variance,
    MutualInformation,
}

impl FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entropy" => Ok(Measure::Entropy),
            "variance" => Ok(Measure::Variance),
            "mi" | "mutual_information" => Ok(Measure::MutualInformation),
            other => Err(Error::Config(format!(
                "unknown measure {other:?} (expected entropy, variance or mi)"
            ))),
        }
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Measure::Entropy => "entropy",
            Measure::Variance => "variance",
            Measure::MutualInformation => "mi",
        })
    }
}

/// Nonnegative per-pixel uncertainty.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub measure: Measure,
}

/// Binary entropy of the predictive mean, in nats.
pub fn predictive_entropy(p: &ProbMap) -> UncertaintyMap {
    UncertaintyMap {
        height: p.height(),
        width: p.width(),
        values: p.probs().iter().map(|&v| binary_entropy(v)).collect(),
        measure: Measure::Entropy,
    }
}

/// Population variance across members.
pub fn member_variance(members: &[ProbMap]) -> Result<UncertaintyMap> {
    let mean = mean_map(members)?;
    let n = members.len() as f64;
    let mut acc = vec![0.0; mean.len()];
    for m in members {
        for ((a, p), mu) in acc.iter_mut().zip(m.probs()).zip(mean.probs()) {
            *a += (p - mu) * (p - mu);
        }
    }
    Ok(UncertaintyMap {
        height: mean.height(),
        width: mean.width(),
        values: acc.into_iter().map(|a| (a / n).clamp(0.0, 0.25)).collect(),
        measure: Measure::Variance,
    })
}

/// Tolerance for checking that `mean` really is the members' mean.
const MEAN_CONSISTENCY_TOL: f64 = 1e-9;

/// `H(mean) - mean_m H(member_m)`, floored at zero.
pub fn mutual_information(mean: &ProbMap, members: &[ProbMap]) -> Result<UncertaintyMap> {
    let recomputed = mean_map(members)?;
    mean.check_same_dims(recomputed.dims())?;
    if let Some((i, (a, b))) = mean
        .probs()
        .iter()
        .zip(recomputed.probs())
        .enumerate()
        .find(|(_, (a, b))| (*a - *b).abs() > MEAN_CONSISTENCY_TOL)
    {
        return Err(Error::Contract(format!(
            "pixel {i}: mean {a} is not the member mean {b}"
        )));
    }
    let member_entropy = anchored_mean(members, binary_entropy);
    let values = mean
        .probs()
        .iter()
        .zip(member_entropy)
        .map(|(&p, h)| (binary_entropy(p) - h).max(0.0))
        .collect();
    Ok(UncertaintyMap {
        height: mean.height(),
        width: mean.width(),
        values,
        measure: Measure::MutualInformation,
    })
}

/// Dispatches on `measure`; `members` may hold a single map for entropy.
pub fn uncertainty(
    measure: Measure,
    mean: &ProbMap,
    members: &[ProbMap],
) -> Result<UncertaintyMap> {
    match measure {
        Measure::Entropy => Ok(predictive_entropy(mean)),
        Measure::Variance => member_variance(members),
        Measure::MutualInformation => mutual_information(mean, members),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchConfig;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn map(v: &[f64]) -> ProbMap {
        ProbMap::new(1, v.len(), v.to_vec()).unwrap()
    }

    fn image(seed: u64) -> Tensor {
        let mut r = seed::rng(seed);
        Tensor::new(vec![8, 8], (0..64).map(|_| r.random::<f64>()).collect()).unwrap()
    }

    fn net(seed: u64, rate: f64) -> SegNet {
        let mut n = SegNet::new(
            ArchConfig::new([2, 4, 8], rate).unwrap(),
            &mut seed::rng(seed),
        )
        .unwrap();
        n.eval();
        n
    }

    #[test]
    fn mean_of_two() {
        let m = mean_map(&[map(&[0.2]), map(&[0.6])]).unwrap();
        assert_abs_diff_eq!(m.probs()[0], 0.4, epsilon = 1e-15);
    }

    #[test]
    fn ensemble_single_member_is_identity() {
        let ens = EnsembleModel::new(vec![net(1, 0.0)]).unwrap();
        let (mean, members) = ensemble_predict(&ens, &image(0)).unwrap();
        assert_eq!(mean.probs(), members[0].probs());
        assert_eq!(mean.provenance, Provenance::EnsembleMean(1));
    }

    #[test]
    fn ensemble_identical_members() {
        let ens = EnsembleModel::new(vec![net(1, 0.0), net(1, 0.0), net(1, 0.0)]).unwrap();
        let (mean, members) = ensemble_predict(&ens, &image(0)).unwrap();
        for (a, b) in mean.probs().iter().zip(members[0].probs()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn ensemble_rejects_mixed_arch() {
        let other = {
            let mut n =
                SegNet::new(ArchConfig::new([2, 4, 6], 0.0).unwrap(), &mut seed::rng(0)).unwrap();
            n.eval();
            n
        };
        assert!(EnsembleModel::new(vec![net(1, 0.0), other]).is_err());
        assert!(EnsembleModel::new(vec![]).is_err());
    }

    #[test]
    fn ensemble_mean_order_invariance() {
        let nets = vec![net(1, 0.0), net(2, 0.0), net(3, 0.0), net(4, 0.0)];
        let mut rev = nets.clone();
        rev.reverse();
        let (a, _) = ensemble_predict(&EnsembleModel::new(nets).unwrap(), &image(5)).unwrap();
        let (b, _) = ensemble_predict(&EnsembleModel::new(rev).unwrap(), &image(5)).unwrap();
        for (x, y) in a.probs().iter().zip(b.probs()) {
            assert!((x - y).abs() <= 1e-15);
        }
    }

    #[test]
    fn mcd_contracts() {
        let img = image(1);
        assert!(matches!(
            mcd_predict(&net(1, 0.0), &img, 10, 3),
            Err(Error::Contract(_))
        ));
        let n = net(1, 0.3);
        assert!(mcd_predict(&n, &img, 0, 3).is_err());
        let (a, pa) = mcd_predict(&n, &img, 10, 3).unwrap();
        let (b, _) = mcd_predict(&n, &img, 10, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(pa.len(), 10);
        let (one, _) = mcd_predict(&n, &img, 1, 42).unwrap();
        let single = n.predict_prob_stochastic(&img, &mut seed::rng(42)).unwrap();
        assert_eq!(one.probs(), single.probs());
    }

    #[test]
    fn mcd_ten_passes_close_to_many() {
        let n = net(6, 0.3);
        let img = image(2);
        let (few, _) = mcd_predict(&n, &img, 10, 100).unwrap();
        let (_, many) = mcd_predict(&n, &img, 10_000, 1_000_000).unwrap();
        let big_mean = mean_map(&many).unwrap();
        let var = member_variance(&many).unwrap();
        for i in 0..few.len() {
            let sigma = var.values[i].sqrt();
            let delta = (few.probs()[i] - big_mean.probs()[i]).abs();
            assert!(
                delta < 4.0 * sigma / 10f64.sqrt(),
                "pixel {i}: {delta} vs sigma {sigma}"
            );
        }
    }

    #[test]
    fn entropy_examples() {
        let h = predictive_entropy(&map(&[0.5, 0.0, 1.0, 0.25]));
        assert_abs_diff_eq!(h.values[0], 2f64.ln(), epsilon = 1e-15);
        assert_eq!(h.values[1], 0.0);
        assert_eq!(h.values[2], 0.0);
        assert_abs_diff_eq!(h.values[3], 0.562_335, epsilon = 1e-6);
    }

    #[test]
    fn variance_examples() {
        let v = member_variance(&[map(&[0.3, 0.0]), map(&[0.3, 1.0])]).unwrap();
        assert_eq!(v.values[0], 0.0);
        assert_eq!(v.values[1], 0.25);
        assert_eq!(member_variance(&[map(&[0.7])]).unwrap().values, vec![0.0]);
        assert!(member_variance(&[]).is_err());
    }

    #[test]
    fn mi_examples() {
        let same = [map(&[0.3]), map(&[0.3])];
        let mean = mean_map(&same).unwrap();
        assert_eq!(mutual_information(&mean, &same).unwrap().values, vec![0.0]);

        let opposite = [map(&[0.0]), map(&[1.0])];
        let mean = mean_map(&opposite).unwrap();
        let mi = mutual_information(&mean, &opposite).unwrap();
        assert_abs_diff_eq!(mi.values[0], 2f64.ln(), epsilon = 1e-15);

        let half = [map(&[0.5]), map(&[0.5])];
        let mean = mean_map(&half).unwrap();
        assert_eq!(mutual_information(&mean, &half).unwrap().values, vec![0.0]);

        let wrong = map(&[0.9]);
        assert!(matches!(
            mutual_information(&wrong, &opposite),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn measure_parsing() {
        assert_eq!("mi".parse::<Measure>().unwrap(), Measure::MutualInformation);
        assert_eq!("variance".parse::<Measure>().unwrap(), Measure::Variance);
        assert!("bald".parse::<Measure>().is_err());
    }

    proptest! {
        #[test]
        fn mi_bounded_by_entropy(
            m in prop::sample::select(vec![2usize, 5, 10]),
            probs in prop::collection::vec(0.0f64..=1.0, 10),
        ) {
            let members: Vec<ProbMap> = probs[..m].iter().map(|&p| map(&[p])).collect();
            let mean = mean_map(&members).unwrap();
            let mi = mutual_information(&mean, &members).unwrap().values[0];
            let h = predictive_entropy(&mean).values[0];
            prop_assert!(mi >= 0.0);
            prop_assert!(mi <= h + 1e-15);
        }

        #[test]
        fn entropy_is_concave(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let mid = binary_entropy(0.5 * (a + b));
            prop_assert!(mid + 1e-15 >= 0.5 * (binary_entropy(a) + binary_entropy(b)));
        }
    }
}
