//! Metrics against a brute-force per-pixel reference, plus calibration
//! sanity on synthetic populations.

use rand::Rng;
use uqd_core::maps::{Mask, ProbMap};
use uqd_core::metrics::{
    binarize, brier, dice, ece, evaluate_with, mcc, nll, ConfusionCounts, EcePooling, EvalOptions,
};
use uqd_core::seed::{self, SeedRng};

const TOL: f64 = 1e-10;

struct Reference {
    dsc: f64,
    mcc: f64,
    ece: f64,
    brier: f64,
    nll: f64,
}

/// Straight-line per-pixel evaluation, written independently of the library.
fn reference(p: &[f64], y: &[u8], bins: usize) -> Reference {
    let (mut tp, mut fp, mut tn, mut fn_) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for (&pi, &yi) in p.iter().zip(y) {
        let pred = pi >= 0.5;
        match (pred, yi == 1) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, false) => tn += 1.0,
            (false, true) => fn_ += 1.0,
        }
    }
    let dsc = if tp + fp + fn_ == 0.0 {
        1.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fn_)
    };
    let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    let mcc = if den == 0.0 {
        0.0
    } else {
        (tp * tn - fp * fn_) / den.sqrt()
    };

    let n = p.len() as f64;
    let mut ece = 0.0;
    for b in 0..bins {
        let lo = 0.5 + b as f64 * (0.5 / bins as f64);
        let hi = if b + 1 == bins {
            1.0
        } else {
            0.5 + (b + 1) as f64 * (0.5 / bins as f64)
        };
        let (mut cnt, mut conf, mut correct) = (0.0, 0.0, 0.0);
        for (&pi, &yi) in p.iter().zip(y) {
            let c = if pi >= 0.5 { pi } else { 1.0 - pi };
            let inside = c >= lo && (c < hi || (b + 1 == bins && c <= hi));
            if inside {
                cnt += 1.0;
                conf += c;
                if (pi >= 0.5) == (yi == 1) {
                    correct += 1.0;
                }
            }
        }
        if cnt > 0.0 {
            ece += cnt / n * (correct / cnt - conf / cnt).abs();
        }
    }
    let brier = p
        .iter()
        .zip(y)
        .map(|(&pi, &yi)| (pi - yi as f64).powi(2))
        .sum::<f64>()
        / n;
    let nll = p
        .iter()
        .zip(y)
        .map(|(&pi, &yi)| {
            let q = if yi == 1 { pi } else { 1.0 - pi };
            -(if q < 1e-12 { 1e-12 } else { q }).ln()
        })
        .sum::<f64>()
        / n;
    Reference {
        dsc,
        mcc,
        ece,
        brier,
        nll,
    }
}

/// Probabilities mixing generic values with bin edges and extremes.
fn random_case(rng: &mut SeedRng, h: usize, w: usize) -> (ProbMap, Mask) {
    const SPECIAL: [f64; 8] = [0.0, 1.0, 0.5, 0.55, 0.45, 0.9, 0.1, 0.95];
    let probs = (0..h * w)
        .map(|_| {
            if rng.random::<f64>() < 0.2 {
                SPECIAL[rng.random_range(0..SPECIAL.len())]
            } else {
                rng.random::<f64>()
            }
        })
        .collect();
    let fg = rng.random::<f64>();
    let labels = (0..h * w)
        .map(|_| u8::from(rng.random::<f64>() < fg))
        .collect();
    (
        ProbMap::new(h, w, probs).unwrap(),
        Mask::new(h, w, labels).unwrap(),
    )
}

#[test]
fn metrics_match_brute_force_reference() {
    let mut rng = seed::rng(2024);
    for case in 0..100 {
        let (p, gt) = random_case(&mut rng, 8, 8);
        let r = reference(p.probs(), gt.labels(), 10);
        let pred = binarize(&p, 0.5).unwrap();
        let counts = ConfusionCounts::from_masks(&pred, &gt).unwrap();
        let got = [
            dice(&pred, &gt).unwrap(),
            mcc(&counts),
            ece(&p, &gt, 10).unwrap().0,
            brier(&p, &gt).unwrap(),
            nll(&p, &gt).unwrap(),
        ];
        let want = [r.dsc, r.mcc, r.ece, r.brier, r.nll];
        for (name, (g, w)) in ["dsc", "mcc", "ece", "brier", "nll"]
            .iter()
            .zip(got.iter().zip(want))
        {
            assert!((g - w).abs() < TOL, "case {case} {name}: {g} vs {w}");
        }
    }
}

#[test]
fn pooled_evaluation_matches_reference_on_concatenation() {
    let mut rng = seed::rng(5);
    let pairs: Vec<_> = (0..4).map(|_| random_case(&mut rng, 8, 8)).collect();
    let all_p: Vec<f64> = pairs.iter().flat_map(|(p, _)| p.probs().to_vec()).collect();
    let all_y: Vec<u8> = pairs
        .iter()
        .flat_map(|(_, m)| m.labels().to_vec())
        .collect();
    let r = reference(&all_p, &all_y, 10);
    let rep = evaluate_with(&pairs, &EvalOptions::default()).unwrap();
    for (g, w) in [
        (rep.dsc, r.dsc),
        (rep.mcc, r.mcc),
        (rep.ece, r.ece),
        (rep.brier, r.brier),
        (rep.nll, r.nll),
    ] {
        assert!((g - w).abs() < TOL, "{g} vs {w}");
    }
    let per = rep.per_image.as_ref().unwrap();
    assert_eq!(per.len(), 4);
    let img_mean = evaluate_with(
        &pairs,
        &EvalOptions {
            ece_pooling: EcePooling::ImageMean,
            ..EvalOptions::default()
        },
    )
    .unwrap();
    let want = per.iter().map(|r| r.ece).sum::<f64>() / 4.0;
    assert!((img_mean.ece - want).abs() < TOL);
}

fn calibrated_population(n: usize, seed_: u64) -> (Vec<f64>, Vec<u8>) {
    let mut rng = seed::rng(seed_);
    let mut p = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let q: f64 = rng.random();
        p.push(q);
        y.push(u8::from(rng.random::<f64>() < q));
    }
    (p, y)
}

#[test]
fn calibrated_population_has_small_ece_and_sharpening_raises_it() {
    let (p, y) = calibrated_population(1_000_000, 11);
    let gt = Mask::new(1000, 1000, y).unwrap();
    let calibrated = ProbMap::new(1000, 1000, p.clone()).unwrap();
    let base = ece(&calibrated, &gt, 10).unwrap().0;
    assert!(base < 0.01, "{base}");
    let mut prev = base;
    for k in [1.5, 2.0, 3.0] {
        // p^k / (p^k + (1-p)^k) pushes every probability towards 0 or 1
        let sharp: Vec<f64> = p
            .iter()
            .map(|&q| {
                let (a, b) = (q.powf(k), (1.0 - q).powf(k));
                a / (a + b)
            })
            .collect();
        let e = ece(&ProbMap::new(1000, 1000, sharp).unwrap(), &gt, 10)
            .unwrap()
            .0;
        assert!(e > prev, "sharpening {k}: {e} <= {prev}");
        prev = e;
    }
}

#[test]
fn ground_truth_as_prediction_is_perfect() {
    let mut rng = seed::rng(3);
    let (_, gt) = random_case(&mut rng, 8, 8);
    let rep = evaluate_with(&[(gt.to_prob_map(), gt.clone())], &EvalOptions::default()).unwrap();
    assert_eq!(rep.dsc, 1.0);
    assert_eq!(rep.ece, 0.0);
    assert_eq!(rep.brier, 0.0);
}
