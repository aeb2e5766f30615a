//! Synthetic vessel-like segmentation data.
//!
//! Each image is a smooth background crossed by dark quadratic Bézier
//! curves, plus Gaussian noise, min-max normalized and quantized to the
//! 256 PGM levels. The mask is the exact raster of the curves.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{self, Dataset};
use crate::maps::Mask;
use crate::seed::{self, stream, SeedRng};
use crate::tensor::Tensor;

/// One training or test item. Image values are multiples of `1/255`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub mask: Mask,
}

pub const MIN_FOREGROUND: f64 = 0.02;
pub const MAX_FOREGROUND: f64 = 0.4;
const MAX_RETRIES: usize = 64;
const CURVE_SEGMENTS: usize = 48;
const CURVE_CONTRAST: f64 = 0.45;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_images: usize,
    pub height: usize,
    pub width: usize,
    pub n_curves: usize,
    /// Stroke width range in pixels.
    pub thickness_min: f64,
    pub thickness_max: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_images: 30,
            height: 64,
            width: 64,
            n_curves: 4,
            thickness_min: 1.5,
            thickness_max: 3.0,
            noise_sigma: 0.15,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_images == 0 {
            return Err(Error::Config("n_images must be positive".into()));
        }
        if self.height < 4
            || self.width < 4
            || !self.height.is_multiple_of(4)
            || !self.width.is_multiple_of(4)
        {
            return Err(Error::Config(format!(
                "image size {}x{} must be positive multiples of 4",
                self.height, self.width
            )));
        }
        if !(self.thickness_min > 0.0 && self.thickness_min <= self.thickness_max)
            || !self.thickness_max.is_finite()
        {
            return Err(Error::Config(format!(
                "thickness range [{}, {}] is invalid",
                self.thickness_min, self.thickness_max
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise_sigma {} is invalid",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    /// The config for a disjoint split drawn from the same distribution.
    pub fn split(&self, n_images: usize, tag: u64) -> Self {
        Self {
            n_images,
            seed: seed::derive_seed(self.seed, stream::SYNTH, u64::MAX - tag),
            ..self.clone()
        }
    }
}

/// Generates `n_images` samples; image `i` depends only on the seed and `i`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    (0..cfg.n_images)
        .map(|i| {
            let mut rng = seed::derived_rng(cfg.seed, stream::SYNTH, i as u64);
            for _ in 0..MAX_RETRIES {
                let s = draw_sample(cfg, &mut rng)?;
                let frac = s.mask.foreground_fraction();
                if cfg.n_curves == 0 || (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac) {
                    return Ok(s);
                }
            }
            Err(Error::Config(format!(
                "image {i}: foreground fraction outside [{MIN_FOREGROUND}, {MAX_FOREGROUND}] \
                 after {MAX_RETRIES} attempts; adjust n_curves or thickness"
            )))
        })
        .collect()
}

fn draw_sample(cfg: &SynthConfig, rng: &mut SeedRng) -> Result<Sample> {
    let (h, w) = (cfg.height, cfg.width);
    let mut field = background(h, w, rng);
    let mut labels = vec![0u8; h * w];
    for _ in 0..cfg.n_curves {
        let pts: [(f64, f64); 3] = std::array::from_fn(|_| {
            (
                rng.random_range(-0.1..1.1) * w as f64,
                rng.random_range(-0.1..1.1) * h as f64,
            )
        });
        let half = 0.5 * rng.random_range(cfg.thickness_min..=cfg.thickness_max);
        raster_bezier(&pts, half, h, w, &mut labels);
    }
    for (v, &l) in field.iter_mut().zip(&labels) {
        if l == 1 {
            *v -= CURVE_CONTRAST;
        }
    }
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
        for v in field.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    let (lo, hi) = field
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let span = hi - lo;
    let data = field
        .iter()
        .map(|&v| {
            let u = if span > 0.0 { (v - lo) / span } else { 0.0 };
            (u * 255.0).round() / 255.0
        })
        .collect();
    Ok(Sample {
        image: Tensor::new(vec![h, w], data)?,
        mask: Mask::new(h, w, labels)?,
    })
}

fn background(h: usize, w: usize, rng: &mut SeedRng) -> Vec<f64> {
    let base = rng.random_range(0.55..0.75);
    let gx = rng.random_range(-0.15..0.15);
    let gy = rng.random_range(-0.15..0.15);
    let waves: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.random_range(0.03..0.08),
                rng.random_range(0.5..1.5),
                rng.random_range(0.5..1.5),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let v = y as f64 / h as f64;
        for x in 0..w {
            let u = x as f64 / w as f64;
            let mut b = base + gx * (u - 0.5) + gy * (v - 0.5);
            for &(amp, fx, fy, phase) in &waves {
                b += amp * (std::f64::consts::TAU * (fx * u + fy * v) + phase).sin();
            }
            out.push(b);
        }
    }
    out
}

/// Marks every pixel whose centre lies within `half` of the curve polyline.
fn raster_bezier(pts: &[(f64, f64); 3], half: f64, h: usize, w: usize, labels: &mut [u8]) {
    let at = |t: f64| {
        let s = 1.0 - t;
        (
            s * s * pts[0].0 + 2.0 * s * t * pts[1].0 + t * t * pts[2].0,
            s * s * pts[0].1 + 2.0 * s * t * pts[1].1 + t * t * pts[2].1,
        )
    };
    let mut prev = at(0.0);
    for k in 1..=CURVE_SEGMENTS {
        let next = at(k as f64 / CURVE_SEGMENTS as f64);
        let x0 = ((prev.0.min(next.0) - half - 0.5).floor().max(0.0)) as usize;
        let x1 = ((prev.0.max(next.0) + half + 0.5).ceil().min(w as f64 - 1.0)).max(-1.0);
        let y0 = ((prev.1.min(next.1) - half - 0.5).floor().max(0.0)) as usize;
        let y1 = ((prev.1.max(next.1) + half + 0.5).ceil().min(h as f64 - 1.0)).max(-1.0);
        if x1 >= 0.0 && y1 >= 0.0 {
            for y in y0..=y1 as usize {
                for x in x0..=x1 as usize {
                    let c = (x as f64 + 0.5, y as f64 + 0.5);
                    if segment_distance(c, prev, next) <= half {
                        labels[y * w + x] = 1;
                    }
                }
            }
        }
        prev = next;
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Writes `img_NNN.pgm` / `mask_NNN.pgm` pairs and a manifest into `dir`.
pub fn write_dataset(samples: &[Sample], dir: &Path) -> Result<Dataset> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut items = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let img = PathBuf::from(format!("img_{i:03}.pgm"));
        let mask = PathBuf::from(format!("mask_{i:03}.pgm"));
        io::write_pgm_image(&dir.join(&img), &s.image)?;
        io::write_pgm_mask(&dir.join(&mask), &s.mask)?;
        items.push((img, mask));
    }
    let ds = Dataset {
        root: dir.to_path_buf(),
        items,
    };
    ds.write_manifest()?;
    Ok(ds)
}

/// SHA-256 over the manifest text and every listed file, in manifest order.
pub fn dataset_checksum(ds: &Dataset) -> Result<String> {
    let mut hasher = Sha256::new();
    hasher.update(ds.manifest_text().as_bytes());
    for (img, mask) in &ds.items {
        for p in [img, mask] {
            let full = ds.root.join(p);
            let bytes = std::fs::read(&full).map_err(|e| Error::io(&full, e))?;
            hasher.update((bytes.len() as u64).to_le_bytes());
            hasher.update(&bytes);
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Loads every sample listed in a manifest.
pub fn load_samples(manifest: &Path) -> Result<Vec<Sample>> {
    Dataset::load(manifest)?.samples()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_images: 4,
            height: 16,
            width: 16,
            n_curves: 2,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_and_quantized() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a, b);
        for s in &a {
            for &v in s.image.data() {
                assert!((0.0..=1.0).contains(&v));
                assert_eq!((v * 255.0).round() / 255.0, v);
            }
            let f = s.mask.foreground_fraction();
            assert!((MIN_FOREGROUND..=MAX_FOREGROUND).contains(&f), "{f}");
        }
    }

    #[test]
    fn curves_are_dark() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            ..small()
        };
        for s in generate_synthetic(&cfg).unwrap() {
            let (mut fg, mut nf, mut bg, mut nb) = (0.0, 0, 0.0, 0);
            for (&v, &l) in s.image.data().iter().zip(s.mask.labels()) {
                if l == 1 {
                    fg += v;
                    nf += 1;
                } else {
                    bg += v;
                    nb += 1;
                }
            }
            assert!(fg / nf as f64 + 0.2 < bg / nb as f64);
        }
    }

    #[test]
    fn no_curves_gives_empty_masks() {
        let cfg = SynthConfig {
            n_curves: 0,
            ..small()
        };
        for s in generate_synthetic(&cfg).unwrap() {
            assert!(s.mask.labels().iter().all(|&l| l == 0));
        }
    }

    #[test]
    fn unsatisfiable_sparsity_is_config_error() {
        let cfg = SynthConfig {
            n_curves: 40,
            thickness_min: 6.0,
            thickness_max: 8.0,
            ..small()
        };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn split_seeds_differ() {
        let cfg = small();
        assert_ne!(cfg.split(2, 1).seed, cfg.seed);
        assert_ne!(
            generate_synthetic(&cfg.split(2, 1)).unwrap()[0],
            generate_synthetic(&cfg).unwrap()[0]
        );
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            SynthConfig {
                n_images: 0,
                ..small()
            },
            SynthConfig {
                height: 10,
                ..small()
            },
            SynthConfig {
                thickness_min: 0.0,
                ..small()
            },
            SynthConfig {
                noise_sigma: -1.0,
                ..small()
            },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn written_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_synthetic(&small()).unwrap();
        let ds = write_dataset(&samples, dir.path()).unwrap();
        let loaded = load_samples(&dir.path().join(io::MANIFEST_NAME)).unwrap();
        assert_eq!(loaded, samples);
        let c1 = dataset_checksum(&ds).unwrap();
        let other = tempfile::tempdir().unwrap();
        let ds2 = write_dataset(&samples, other.path()).unwrap();
        assert_eq!(dataset_checksum(&ds2).unwrap(), c1);
    }
}
