//! Supervised training: BCE task loss, Adam with L2 weight decay, and a
//! per-step cosine-annealed learning rate.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::autodiff::Tape;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::maps::{binary_xent, Mask, ProbMap};
use crate::model::{ArchConfig, SegNet};
use crate::seed::{self, stream, SeedRng};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub weight_decay: f64,
    pub eta_min: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 70,
            batch_size: 4,
            lr_init: 1e-4,
            weight_decay: 1e-5,
            eta_min: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be at least 1".into(),
            ));
        }
        if !(self.lr_init > 0.0 && self.lr_init.is_finite()) {
            return Err(Error::Config(format!(
                "lr_init {} must be positive",
                self.lr_init
            )));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight_decay {} must be nonnegative",
                self.weight_decay
            )));
        }
        if !(0.0..=self.lr_init).contains(&self.eta_min) {
            return Err(Error::Config(format!(
                "eta_min {} must lie in [0, lr_init]",
                self.eta_min
            )));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_items: usize) -> usize {
        n_items.div_ceil(self.batch_size)
    }
}

/// Mean binary cross-entropy of `p` against the mask, with clamped logs.
pub fn bce_loss(p: &ProbMap, gt: &Mask) -> Result<f64> {
    if p.dims() != gt.dims() {
        return Err(Error::Dimension(format!(
            "{:?} vs {:?}",
            p.dims(),
            gt.dims()
        )));
    }
    let total: f64 = p
        .probs()
        .iter()
        .zip(gt.labels())
        .map(|(&q, &y)| binary_xent(f64::from(y), q))
        .sum();
    Ok(total / p.len() as f64)
}

/// `eta_min + (lr_init - eta_min) (1 + cos(pi t / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_init: f64, eta_min: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Contract(format!(
            "step {step} beyond schedule length {total_steps}"
        )));
    }
    if total_steps == 0 {
        return Ok(lr_init);
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(eta_min + 0.5 * (lr_init - eta_min) * (1.0 + phase.cos()))
}

/// Adam moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl OptimizerState {
    pub fn new(net: &SegNet) -> Self {
        let zeros: Vec<Vec<f64>> = net
            .params()
            .iter()
            .map(|p| vec![0.0; p.value.len()])
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update. The L2 term `weight_decay * theta` is added to the
/// gradient before the moment updates (classic Adam with L2, not AdamW).
pub fn adam_step(
    net: &mut SegNet,
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != net.params().len() || state.m.len() != grads.len() {
        return Err(Error::Dimension(format!(
            "{} gradients for {} parameters",
            grads.len(),
            net.params().len()
        )));
    }
    for (p, g) in net.params().iter().zip(grads) {
        if g.shape() != p.value.shape() {
            return Err(Error::Dimension(format!(
                "gradient {:?} for {} {:?}",
                g.shape(),
                p.name,
                p.value.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient for {}",
                p.name
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, (p, g)) in net.params_mut().iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, theta) in p.value.data_mut().iter_mut().enumerate() {
            let grad = g.data()[j] + weight_decay * *theta;
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * grad;
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * grad * grad;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *theta -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

pub struct TrainOutcome {
    /// Trained network, left in eval mode.
    pub net: SegNet,
    pub log: Vec<LossRecord>,
}

/// Mini-batch driver shared by member training and distillation.
///
/// Visits the data in a per-epoch shuffled order (stream `SHUFFLE`), calls
/// `step` with the batch indices and a per-step dropout generator, and
/// applies Adam at the cosine-scheduled rate. `step` returns the
/// parameter gradients and a record of its own.
pub(crate) fn run_schedule<R>(
    net: &mut SegNet,
    n_items: usize,
    cfg: &TrainConfig,
    mut step: impl FnMut(&SegNet, &[usize], &mut SeedRng) -> Result<(Vec<Tensor>, f64, R)>,
    mut on_step: impl FnMut(usize, usize, f64, R),
) -> Result<()> {
    cfg.validate()?;
    if n_items == 0 {
        return Err(Error::Contract("training set is empty".into()));
    }
    net.train();
    let steps_per_epoch = cfg.steps_per_epoch(n_items);
    let total = cfg.epochs * steps_per_epoch;
    let mut state = OptimizerState::new(net);
    let mut global = 0;
    let mut order: Vec<usize> = (0..n_items).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut seed::derived_rng(
            cfg.seed,
            stream::SHUFFLE,
            epoch as u64,
        ));
        for batch in order.chunks(cfg.batch_size) {
            let lr = cosine_lr(global, total, cfg.lr_init, cfg.eta_min)?;
            let mut rng = seed::derived_rng(cfg.seed, stream::DROPOUT, global as u64);
            let diverged = |e: Error| {
                Error::Numeric(format!(
                    "training diverged in epoch {epoch} (last finite epoch: {}): {e}",
                    epoch
                        .checked_sub(1)
                        .map_or("none".to_string(), |e| e.to_string())
                ))
            };
            let (grads, loss, record) = step(net, batch, &mut rng).map_err(|e| match e {
                Error::Numeric(_) => diverged(e),
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(diverged(Error::Numeric("non-finite loss".into())));
            }
            adam_step(net, &grads, &mut state, lr, cfg.weight_decay).map_err(|e| match e {
                Error::Numeric(_) => diverged(e),
                other => other,
            })?;
            on_step(epoch, global, lr, record);
            global += 1;
        }
    }
    net.eval();
    Ok(())
}

/// Mean BCE over a batch and its parameter gradients.
pub fn bce_batch_grads(
    net: &SegNet,
    samples: &[&Sample],
    rng: &mut SeedRng,
) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let params = net.bind(&tape, true);
    let mut terms = Vec::with_capacity(samples.len());
    for s in samples {
        let out = net.forward_vars(&tape, &params, &s.image, Some(rng))?;
        terms.push(
            out.logits
                .sigmoid()?
                .binary_cross_entropy(&s.mask.as_f64())?,
        );
    }
    let loss = crate::autodiff::Var::stack(&terms)?.mean()?;
    tape.backward(loss)?;
    let grads = params
        .iter()
        .map(|p| p.grad().expect("leaf grad"))
        .collect();
    Ok((loss.item(), grads))
}

/// Trains one segmenter from a seeded initialization.
///
/// The result depends only on `(data, arch, cfg, member_seed)`;
/// `cfg.seed` is replaced by `member_seed`.
pub fn train_member(
    data: &[Sample],
    arch: &ArchConfig,
    cfg: &TrainConfig,
    member_seed: u64,
) -> Result<TrainOutcome> {
    let cfg = TrainConfig {
        seed: member_seed,
        ..cfg.clone()
    };
    let mut net = SegNet::new(
        arch.clone(),
        &mut seed::derived_rng(member_seed, stream::INIT, 0),
    )?;
    let mut log = Vec::new();
    run_schedule(
        &mut net,
        data.len(),
        &cfg,
        |net, batch, rng| {
            let samples: Vec<&Sample> = batch.iter().map(|&i| &data[i]).collect();
            let (loss, grads) = bce_batch_grads(net, &samples, rng)?;
            Ok((grads, loss, loss))
        },
        |epoch, step, lr, loss| {
            log.push(LossRecord {
                epoch,
                step,
                lr,
                loss,
            })
        },
    )?;
    Ok(TrainOutcome { net, log })
}

/// Writes `epoch,step,lr,loss` lines.
pub fn write_loss_log(path: &Path, log: &[LossRecord]) -> Result<()> {
    let mut out = String::from("epoch,step,lr,loss\n");
    for r in log {
        out.push_str(&format!("{},{},{:e},{}\n", r.epoch, r.step, r.lr, r.loss));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tiny_net(seed_: u64) -> SegNet {
        SegNet::new(
            ArchConfig::new([2, 2, 2], 0.0).unwrap(),
            &mut seed::rng(seed_),
        )
        .unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 1e-5).unwrap(), 1e-3);
        assert_abs_diff_eq!(
            cosine_lr(100, 100, 1e-3, 1e-5).unwrap(),
            1e-5,
            epsilon = 1e-18
        );
        assert_abs_diff_eq!(
            cosine_lr(50, 100, 1e-3, 1e-5).unwrap(),
            (1e-3 + 1e-5) / 2.0,
            epsilon = 1e-18
        );
        assert!(matches!(
            cosine_lr(101, 100, 1e-3, 0.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn cosine_non_increasing() {
        let lrs: Vec<f64> = (0..=500)
            .map(|t| cosine_lr(t, 500, 1e-4, 0.0).unwrap())
            .collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn adam_zero_gradient_fixed_point() {
        let mut net = tiny_net(1);
        let before = net.checksum();
        let mut state = OptimizerState::new(&net);
        let zeros: Vec<Tensor> = net
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        for _ in 0..3 {
            adam_step(&mut net, &zeros, &mut state, 1e-2, 0.0).unwrap();
        }
        assert_eq!(net.checksum(), before);
        assert_eq!(state.step_count(), 3);
    }

    #[test]
    fn adam_first_step_is_sign() {
        let mut net = tiny_net(2);
        let before = net.flat_params();
        let mut state = OptimizerState::new(&net);
        let grads: Vec<Tensor> = net
            .params()
            .iter()
            .enumerate()
            .map(|(i, p)| p.value.map(|_| if i % 2 == 0 { 0.3 } else { -2.0 }))
            .collect();
        let lr = 1e-3;
        adam_step(&mut net, &grads, &mut state, lr, 0.0).unwrap();
        let after = net.flat_params();
        let flat_g: Vec<f64> = grads.iter().flat_map(|g| g.data().to_vec()).collect();
        for ((a, b), g) in after.data().iter().zip(before.data()).zip(&flat_g) {
            assert_abs_diff_eq!(a - b, -lr * g.signum(), epsilon = 1e-9);
        }
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut net = tiny_net(3);
        let mut state = OptimizerState::new(&net);
        let mut grads: Vec<Tensor> = net
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        grads[0].data_mut()[0] = f64::NAN;
        assert!(matches!(
            adam_step(&mut net, &grads, &mut state, 1e-3, 0.0),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn bce_examples() {
        let m = Mask::new(1, 2, vec![1, 0]).unwrap();
        assert_eq!(bce_loss(&m.to_prob_map(), &m).unwrap(), 0.0);
        let half = ProbMap::constant(1, 2, 0.5).unwrap();
        assert_abs_diff_eq!(bce_loss(&half, &m).unwrap(), 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            eta_min: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(TrainConfig::default().steps_per_epoch(30), 8);
    }
}
