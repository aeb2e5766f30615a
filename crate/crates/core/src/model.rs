//! Miniature encoder–decoder segmenter with dropout.
//!
//! Layout (`c1, c2, c3` are the configured widths, every conv is 3×3 with
//! same padding and SiLU activation unless noted):
//!
//! ```text
//! enc1:       1 -> c1 -> c1          (H × W)      dropout
//! avg-pool 2×2
//! enc2:      c1 -> c2 -> c2          (H/2 × W/2)  dropout
//! avg-pool 2×2
//! bottleneck: c2 -> c3 -> c3         (H/4 × W/4)  dropout   ──> representation
//! upsample, concat enc2
//! dec2: c3+c2 -> c2 -> c2
//! upsample, concat enc1
//! dec1: c2+c1 -> c1 -> c1
//! head: 1×1 conv c1 -> 1, no activation (logits)
//! ```
//!
//! The representation used for contrastive distillation is the spatial mean
//! of the bottleneck activation, taken before its dropout.

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{sigmoid, Tape, Var};
use crate::error::{Error, Result};
use crate::maps::ProbMap;
use crate::seed::SeedRng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    /// Channel widths of the two encoder stages and the bottleneck.
    pub widths: [usize; 3],
    pub dropout_rate: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            widths: [8, 16, 32],
            dropout_rate: 0.0,
        }
    }
}

impl ArchConfig {
    /// Default rate for Monte-Carlo dropout members.
    pub const MC_DROPOUT_RATE: f64 = 0.2;

    pub fn new(widths: [usize; 3], dropout_rate: f64) -> Result<Self> {
        let cfg = Self {
            widths,
            dropout_rate,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) {
            return Err(Error::Config(format!(
                "channel widths must be positive: {:?}",
                self.widths
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} not in [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn representation_dim(&self) -> usize {
        self.widths[2]
    }

    /// `(name, shape)` of every parameter, in storage order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let [c1, c2, c3] = self.widths;
        let convs: [(&str, usize, usize, usize); 11] = [
            ("enc1.conv1", 1, c1, 3),
            ("enc1.conv2", c1, c1, 3),
            ("enc2.conv1", c1, c2, 3),
            ("enc2.conv2", c2, c2, 3),
            ("bottleneck.conv1", c2, c3, 3),
            ("bottleneck.conv2", c3, c3, 3),
            ("dec2.conv1", c3 + c2, c2, 3),
            ("dec2.conv2", c2, c2, 3),
            ("dec1.conv1", c2 + c1, c1, 3),
            ("dec1.conv2", c1, c1, 3),
            ("head", c1, 1, 1),
        ];
        convs
            .iter()
            .flat_map(|&(name, cin, cout, k)| {
                [
                    (format!("{name}.weight"), vec![cout, cin, k, k]),
                    (format!("{name}.bias"), vec![cout]),
                ]
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Canonical `key=value` text, one entry per line, keys sorted.
    pub fn to_text(&self) -> String {
        let [c1, c2, c3] = self.widths;
        format!(
            "arch=mini-unet\ndropout_rate={:?}\nwidths={c1},{c2},{c3}\n",
            self.dropout_rate
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut widths = None;
        let mut dropout_rate = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("arch line without '=': {line:?}")))?;
            match key.trim() {
                "arch" if value.trim() == "mini-unet" => {}
                "arch" => return Err(Error::Config(format!("unknown arch {value:?}"))),
                "widths" => widths = Some(parse_widths(value)?),
                "dropout_rate" => {
                    dropout_rate = Some(
                        value
                            .trim()
                            .parse::<f64>()
                            .map_err(|_| Error::Config(format!("bad dropout_rate {value:?}")))?,
                    )
                }
                other => return Err(Error::Config(format!("unknown arch key {other:?}"))),
            }
        }
        Self::new(
            widths.ok_or_else(|| Error::Config("arch block lacks widths".into()))?,
            dropout_rate.ok_or_else(|| Error::Config("arch block lacks dropout_rate".into()))?,
        )
    }
}

/// Parses `"a,b,c"` into three channel widths.
pub fn parse_widths(value: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = value
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad widths {value:?}")))?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("widths needs three values, got {value:?}")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RepSource {
    Student,
    Teacher(usize),
}

/// Pooled bottleneck feature of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Representation {
    pub vector: Vec<f64>,
    pub source: RepSource,
}

pub struct NetOutput<'t> {
    /// `H × W` logits.
    pub logits: Var<'t>,
    /// `[c3]` representation.
    pub rep: Var<'t>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegNet {
    arch: ArchConfig,
    params: Vec<Param>,
    mode: Mode,
}

impl SegNet {
    /// Fan-in scaled uniform init: weights in `±sqrt(6 / fan_in)`, zero biases.
    pub fn new(arch: ArchConfig, rng: &mut SeedRng) -> Result<Self> {
        arch.validate()?;
        let params = arch
            .param_specs()
            .into_iter()
            .map(|(name, shape)| {
                let n = shape.iter().product();
                let data = if name.ends_with(".weight") {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                } else {
                    vec![0.0; n]
                };
                Param {
                    name,
                    value: Tensor::new(shape, data).expect("spec shape"),
                }
            })
            .collect();
        Ok(Self {
            arch,
            params,
            mode: Mode::Train,
        })
    }

    /// Every parameter zero.
    pub fn zeros(arch: ArchConfig) -> Result<Self> {
        arch.validate()?;
        let params = arch
            .param_specs()
            .into_iter()
            .map(|(name, shape)| Param {
                value: Tensor::zeros(&shape),
                name,
            })
            .collect();
        Ok(Self {
            arch,
            params,
            mode: Mode::Train,
        })
    }

    /// Reassembles a network from named parameters, checking names and shapes.
    pub fn from_params(arch: ArchConfig, params: Vec<Param>) -> Result<Self> {
        arch.validate()?;
        let specs = arch.param_specs();
        if specs.len() != params.len() {
            return Err(Error::Dimension(format!(
                "architecture has {} parameters, got {}",
                specs.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in specs.iter().zip(&params) {
            if *name != p.name || shape.as_slice() != p.value.shape() {
                return Err(Error::Dimension(format!(
                    "expected {name} {shape:?}, got {} {:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(Self {
            arch,
            params,
            mode: Mode::Eval,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn dropout_rate(&self) -> f64 {
        self.arch.dropout_rate
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn train(&mut self) {
        self.mode = Mode::Train;
    }

    pub fn eval(&mut self) {
        self.mode = Mode::Eval;
    }

    /// All parameters concatenated in storage order.
    pub fn flat_params(&self) -> Tensor {
        let data = self
            .params
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect();
        Tensor::from_vec(data)
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Dimension(format!(
                "{} values for {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value
                .data_mut()
                .copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// SHA-256 of the little-endian parameter bytes.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for p in &self.params {
            hasher.update(p.name.as_bytes());
            for v in p.value.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Records the parameters on `tape`, as trainable leaves or constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect()
    }

    /// Parameter variables carved out of one flat vector (see [`Self::flat_params`]).
    pub fn bind_flat<'t>(&self, flat: Var<'t>) -> Result<Vec<Var<'t>>> {
        let mut offset = 0;
        self.params
            .iter()
            .map(|p| {
                let v = flat.slice(offset, p.value.shape())?;
                offset += p.value.len();
                Ok(v)
            })
            .collect()
    }

    /// Forward pass on the tape.
    ///
    /// Dropout is applied when an `rng` is supplied and the rate is
    /// positive, in either mode; eval mode with an rng is Monte-Carlo
    /// dropout. Train mode with a positive rate requires an rng.
    pub fn forward_vars<'t>(
        &self,
        tape: &'t Tape,
        params: &[Var<'t>],
        image: &Tensor,
        mut rng: Option<&mut SeedRng>,
    ) -> Result<NetOutput<'t>> {
        if params.len() != self.params.len() {
            return Err(Error::Dimension(format!(
                "{} parameter vars for {} parameters",
                params.len(),
                self.params.len()
            )));
        }
        let rate = self.arch.dropout_rate;
        if self.mode == Mode::Train && rate > 0.0 && rng.is_none() {
            return Err(Error::Contract(
                "train-mode forward with dropout needs a random generator".into(),
            ));
        }
        let (h, w) = check_image(image)?;
        let x = tape.constant(image.reshape(&[1, h, w])?);

        let conv = |x: Var<'t>, layer: usize| x.conv2d(params[2 * layer], params[2 * layer + 1]);
        let block = |x: Var<'t>, layer: usize| -> Result<Var<'t>> {
            conv(conv(x, layer)?.silu()?, layer + 1)?.silu()
        };
        let mut drop = |x: Var<'t>| -> Result<Var<'t>> {
            match rng.as_deref_mut() {
                Some(r) if rate > 0.0 => x.dropout(rate, r),
                _ => Ok(x),
            }
        };

        let e1 = drop(block(x, 0)?)?;
        let e2 = drop(block(e1.avg_pool2()?, 2)?)?;
        let b = block(e2.avg_pool2()?, 4)?;
        let rep = b.global_avg_pool()?;
        let b = drop(b)?;
        let d2 = block(Var::concat(&[b.upsample2()?, e2])?, 6)?;
        let d1 = block(Var::concat(&[d2.upsample2()?, e1])?, 8)?;
        let logits = conv(d1, 10)?.reshape(&[h, w])?;
        Ok(NetOutput { logits, rep })
    }

    /// Forward pass returning plain values.
    pub fn forward(
        &self,
        image: &Tensor,
        rng: Option<&mut SeedRng>,
    ) -> Result<(Tensor, Representation)> {
        let tape = Tape::new();
        let params = self.bind(&tape, false);
        let out = self.forward_vars(&tape, &params, image, rng)?;
        let rep = Representation {
            vector: out.rep.value().into_data(),
            source: RepSource::Student,
        };
        Ok((out.logits.value(), rep))
    }

    /// Deterministic foreground probabilities; requires eval mode.
    pub fn predict_prob(&self, image: &Tensor) -> Result<ProbMap> {
        if self.mode != Mode::Eval {
            return Err(Error::Contract(
                "predict_prob needs an eval-mode network".into(),
            ));
        }
        let (logits, _) = self.forward(image, None)?;
        ProbMap::from_tensor(&sigmoid(&logits))
    }

    /// One stochastic (dropout-active) prediction, as used by MC-Dropout.
    pub fn predict_prob_stochastic(&self, image: &Tensor, rng: &mut SeedRng) -> Result<ProbMap> {
        let (logits, _) = self.forward(image, Some(rng))?;
        ProbMap::from_tensor(&sigmoid(&logits))
    }
}

/// Accepts `[H, W]` or `[1, H, W]` images in `[0, 1]` with H, W divisible by 4.
fn check_image(image: &Tensor) -> Result<(usize, usize)> {
    let (h, w) = match image.shape() {
        [h, w] | [1, h, w] => (*h, *w),
        s => {
            return Err(Error::Dimension(format!(
                "image must be H x W (single channel), got {s:?}"
            )))
        }
    };
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::Dimension(format!(
            "image {h}x{w}: both sides must be multiples of 4"
        )));
    }
    if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Contract("image values must lie in [0, 1]".into()));
    }
    Ok((h, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut r = seed::rng(seed);
        Tensor::new(vec![h, w], (0..h * w).map(|_| r.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn param_count_is_deterministic() {
        let arch = ArchConfig::new([2, 4, 8], 0.0).unwrap();
        // 1*2*9+2 + 2*2*9+2 + 2*4*9+4 + 4*4*9+4 + 4*8*9+8 + 8*8*9+8
        // + 12*4*9+4 + 4*4*9+4 + 6*2*9+2 + 2*2*9+2 + 2+1
        assert_eq!(arch.param_count(), 1897);
        let net = SegNet::new(arch.clone(), &mut seed::rng(0)).unwrap();
        assert_eq!(net.param_count(), arch.param_count());
    }

    #[test]
    fn shape_preserving() {
        let net = SegNet::new(ArchConfig::new([2, 4, 8], 0.0).unwrap(), &mut seed::rng(1)).unwrap();
        for (h, w) in [(16, 16), (16, 24), (32, 20)] {
            let (logits, rep) = net.forward(&image(h, w, 3), None).unwrap();
            assert_eq!(logits.shape(), &[h, w]);
            assert_eq!(rep.vector.len(), 8);
        }
    }

    #[test]
    fn bad_image_shape() {
        let net = SegNet::new(ArchConfig::new([2, 4, 8], 0.0).unwrap(), &mut seed::rng(1)).unwrap();
        assert!(matches!(
            net.forward(&image(10, 12, 0), None),
            Err(Error::Dimension(_))
        ));
        let three = Tensor::zeros(&[3, 8, 8]);
        assert!(matches!(
            net.forward(&three, None),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn zero_weights_give_head_bias() {
        let arch = ArchConfig::new([2, 4, 8], 0.0).unwrap();
        let mut net = SegNet::zeros(arch).unwrap();
        let last = net.params_mut().last_mut().unwrap();
        assert_eq!(last.name, "head.bias");
        last.value.data_mut()[0] = 0.37;
        let (logits, _) = net.forward(&image(8, 8, 5), None).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.37));
    }

    #[test]
    fn train_needs_rng_with_dropout() {
        let net = SegNet::new(ArchConfig::new([2, 4, 8], 0.5).unwrap(), &mut seed::rng(1)).unwrap();
        assert!(matches!(
            net.forward(&image(8, 8, 0), None),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn dropout_seeded_determinism() {
        let mut net =
            SegNet::new(ArchConfig::new([2, 4, 8], 0.5).unwrap(), &mut seed::rng(1)).unwrap();
        net.train();
        let img = image(16, 16, 2);
        let a = net.forward(&img, Some(&mut seed::rng(10))).unwrap();
        let b = net.forward(&img, Some(&mut seed::rng(10))).unwrap();
        let c = net.forward(&img, Some(&mut seed::rng(11))).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn zero_rate_train_equals_eval() {
        let mut net =
            SegNet::new(ArchConfig::new([2, 4, 8], 0.0).unwrap(), &mut seed::rng(4)).unwrap();
        let img = image(16, 16, 9);
        net.train();
        let t1 = net.forward(&img, None).unwrap();
        let t2 = net.forward(&img, Some(&mut seed::rng(3))).unwrap();
        net.eval();
        let e = net.forward(&img, None).unwrap();
        assert_eq!(t1.0.data(), e.0.data());
        assert_eq!(t2.0.data(), e.0.data());
    }

    #[test]
    fn predict_prob_requires_eval() {
        let mut net =
            SegNet::new(ArchConfig::new([2, 4, 8], 0.0).unwrap(), &mut seed::rng(4)).unwrap();
        net.train();
        assert!(matches!(
            net.predict_prob(&image(8, 8, 1)),
            Err(Error::Contract(_))
        ));
        net.eval();
        let p = net.predict_prob(&image(8, 8, 1)).unwrap();
        assert!(p.probs().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn predict_prob_constant_logits() {
        let arch = ArchConfig::new([2, 4, 8], 0.0).unwrap();
        let mut net = SegNet::zeros(arch).unwrap();
        net.eval();
        let p = net.predict_prob(&image(8, 8, 1)).unwrap();
        assert!(p.probs().iter().all(|&v| v == 0.5));
        net.params_mut().last_mut().unwrap().value.data_mut()[0] = 3f64.ln();
        let p = net.predict_prob(&image(8, 8, 1)).unwrap();
        assert!(p.probs().iter().all(|&v| (v - 0.75).abs() < 1e-15));
    }

    #[test]
    fn logit_recovery_round_trip() {
        let mut net =
            SegNet::new(ArchConfig::new([2, 4, 8], 0.0).unwrap(), &mut seed::rng(8)).unwrap();
        net.eval();
        let img = image(16, 16, 4);
        let (logits, _) = net.forward(&img, None).unwrap();
        let p = net.predict_prob(&img).unwrap();
        for (l, p) in logits.data().iter().zip(p.probs()) {
            assert!(((p / (1.0 - p)).ln() - l).abs() < 1e-9);
        }
    }

    #[test]
    fn arch_text_round_trip() {
        let arch = ArchConfig::new([3, 5, 7], 0.2).unwrap();
        assert_eq!(ArchConfig::from_text(&arch.to_text()).unwrap(), arch);
        assert!(ArchConfig::from_text("widths=1,2\ndropout_rate=0.1").is_err());
    }

    #[test]
    fn flat_params_round_trip() {
        let mut net =
            SegNet::new(ArchConfig::new([2, 4, 8], 0.0).unwrap(), &mut seed::rng(8)).unwrap();
        let flat = net.flat_params();
        let before = net.checksum();
        net.set_flat_params(flat.data()).unwrap();
        assert_eq!(net.checksum(), before);
    }
}
