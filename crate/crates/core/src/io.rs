//! PGM (images, masks), PFM (probability maps) and dataset manifests.
//!
//! PGM files are binary `P5` with maxval 255. Image bytes map to `[0, 1]`
//! by division by 255; mask bytes are 0 or 255. PFM files are grayscale
//! `Pf`, written little-endian (negative scale) with rows bottom-up.

use std::path::{Path, PathBuf};

use log::warn;

use crate::error::{Error, Result};
use crate::maps::{Mask, ProbMap};
use crate::tensor::Tensor;

fn format_err(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        offset,
        message: message.into(),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Netpbm-style header tokenizer: whitespace separated, `#` comments.
struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn token(&mut self) -> Option<(usize, &'a str)> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return None;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .map(|t| (start, t))
    }

    fn number<T: std::str::FromStr>(&mut self, path: &Path, what: &str) -> Result<T> {
        let at = self.pos;
        let (start, tok) = self
            .token()
            .ok_or_else(|| format_err(path, at, format!("missing {what}")))?;
        tok.parse()
            .map_err(|_| format_err(path, start, format!("bad {what} {tok:?}")))
    }

    /// Consumes the single whitespace byte that ends a header.
    fn end(&mut self, path: &Path) -> Result<usize> {
        match self.bytes.get(self.pos) {
            Some(c) if c.is_ascii_whitespace() => Ok(self.pos + 1),
            _ => Err(format_err(
                path,
                self.pos,
                "header not terminated by whitespace",
            )),
        }
    }
}

/// Raw `P5` contents: `(width, height, pixel bytes)`.
pub fn read_pgm_bytes(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = read_file(path)?;
    let mut h = Header {
        bytes: &bytes,
        pos: 0,
    };
    match h.token() {
        Some((_, "P5")) => {}
        Some((at, other)) => {
            return Err(format_err(
                path,
                at,
                format!("magic {other:?}, expected P5"),
            ))
        }
        None => return Err(format_err(path, 0, "empty file")),
    }
    let width: usize = h.number(path, "width")?;
    let height: usize = h.number(path, "height")?;
    let maxval_at = h.pos;
    let maxval: u32 = h.number(path, "maxval")?;
    if maxval != 255 {
        return Err(format_err(
            path,
            maxval_at,
            format!("maxval {maxval}, only 255 is supported"),
        ));
    }
    if width == 0 || height == 0 {
        return Err(format_err(path, 0, "zero image dimension"));
    }
    let start = h.end(path)?;
    let expected = width * height;
    let actual = bytes.len() - start;
    if actual != expected {
        return Err(format_err(
            path,
            start,
            format!("expected {expected} bytes of pixel data, found {actual}"),
        ));
    }
    Ok((width, height, bytes[start..].to_vec()))
}

pub fn write_pgm_bytes(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::Dimension(format!(
            "{} pixels for a {width}x{height} image",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    write_file(path, &out)
}

/// Grayscale image as an `H × W` tensor with values `byte / 255`.
pub fn read_pgm_image(path: &Path) -> Result<Tensor> {
    let (w, h, px) = read_pgm_bytes(path)?;
    Tensor::new(
        vec![h, w],
        px.iter().map(|&b| f64::from(b) / 255.0).collect(),
    )
}

/// Quantizes `round(255 v)`; values of the form `k / 255` round-trip exactly.
pub fn write_pgm_image(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = match image.shape() {
        [h, w] | [1, h, w] => (*h, *w),
        s => return Err(Error::Dimension(format!("PGM image from shape {s:?}"))),
    };
    let px: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    write_pgm_bytes(path, w, h, &px)
}

pub fn read_pgm_mask(path: &Path) -> Result<Mask> {
    let (w, h, px) = read_pgm_bytes(path)?;
    let header_len = std::fs::metadata(path)
        .map(|m| m.len() as usize)
        .unwrap_or(0)
        - px.len();
    let labels = px
        .iter()
        .enumerate()
        .map(|(i, &b)| match b {
            0 => Ok(0),
            255 => Ok(1),
            other => Err(format_err(
                path,
                header_len + i,
                format!("mask byte {other} is neither 0 nor 255"),
            )),
        })
        .collect::<Result<Vec<u8>>>()?;
    Mask::new(h, w, labels)
}

pub fn write_pgm_mask(path: &Path, mask: &Mask) -> Result<()> {
    let px: Vec<u8> = mask.labels().iter().map(|&l| l * 255).collect();
    write_pgm_bytes(path, mask.width(), mask.height(), &px)
}

/// A probability map read from disk, with the number of values that had to
/// be clamped into `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PfmRead {
    pub map: ProbMap,
    pub clamped: usize,
}

pub fn read_pfm(path: &Path) -> Result<PfmRead> {
    let (w, h, values) = read_pfm_values(path)?;
    let mut clamped = 0;
    let probs = values
        .into_iter()
        .map(|v| {
            let v = f64::from(v);
            if (0.0..=1.0).contains(&v) {
                v
            } else {
                clamped += 1;
                v.clamp(0.0, 1.0)
            }
        })
        .collect();
    if clamped > 0 {
        warn!("{}: clamped {clamped} values into [0, 1]", path.display());
    }
    Ok(PfmRead {
        map: ProbMap::new(h, w, probs)?,
        clamped,
    })
}

/// Raw `Pf` contents in top-down row order: `(width, height, values)`.
pub fn read_pfm_values(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = read_file(path)?;
    let mut h = Header {
        bytes: &bytes,
        pos: 0,
    };
    match h.token() {
        Some((_, "Pf")) => {}
        Some((at, other)) => {
            return Err(format_err(
                path,
                at,
                format!("magic {other:?}, expected grayscale Pf"),
            ))
        }
        None => return Err(format_err(path, 0, "empty file")),
    }
    let width: usize = h.number(path, "width")?;
    let height: usize = h.number(path, "height")?;
    let scale_at = h.pos;
    let scale: f64 = h.number(path, "scale")?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(format_err(path, scale_at, format!("invalid scale {scale}")));
    }
    if width == 0 || height == 0 {
        return Err(format_err(path, 0, "zero image dimension"));
    }
    let start = h.end(path)?;
    let expected = width * height * 4;
    let actual = bytes.len() - start;
    if actual != expected {
        return Err(format_err(
            path,
            start,
            format!("expected {expected} bytes of float data, found {actual}"),
        ));
    }
    let little = scale < 0.0;
    let mut values = vec![0f32; width * height];
    for (i, chunk) in bytes[start..].chunks_exact(4).enumerate() {
        let raw: [u8; 4] = chunk.try_into().unwrap();
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        if !v.is_finite() {
            return Err(format_err(path, start + 4 * i, "non-finite value"));
        }
        let (file_row, col) = (i / width, i % width);
        values[(height - 1 - file_row) * width + col] = v;
    }
    Ok((width, height, values))
}

/// Writes any `H × W` float field (probabilities, uncertainties) as PFM.
pub fn write_pfm_values(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::Dimension(format!(
            "{} values for a {width}x{height} map",
            values.len()
        )));
    }
    let mut out = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    for row in (0..height).rev() {
        for &v in &values[row * width..(row + 1) * width] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    write_file(path, &out)
}

pub fn write_pfm(path: &Path, p: &ProbMap) -> Result<()> {
    write_pfm_values(path, p.width(), p.height(), p.probs())
}

/// Image/mask pairs listed in a manifest file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    /// Directory the manifest's relative paths are resolved against.
    pub root: PathBuf,
    pub items: Vec<(PathBuf, PathBuf)>,
}

pub const MANIFEST_NAME: &str = "manifest.txt";

impl Dataset {
    /// Loads `image<TAB>mask` lines; paths must exist and be unique.
    pub fn load(manifest: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
        let root = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut items = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let body = line.trim_end_matches(['\n', '\r']);
            if !body.is_empty() {
                let (img, mask) = body
                    .split_once('\t')
                    .ok_or_else(|| format_err(manifest, offset, "expected image<TAB>mask"))?;
                for p in [img, mask] {
                    if !seen.insert(p.to_string()) {
                        return Err(Error::Config(format!(
                            "{}: duplicate path {p}",
                            manifest.display()
                        )));
                    }
                    let full = root.join(p);
                    if !full.is_file() {
                        return Err(Error::Config(format!(
                            "{}: listed file {} does not exist",
                            manifest.display(),
                            full.display()
                        )));
                    }
                }
                items.push((PathBuf::from(img), PathBuf::from(mask)));
            }
            offset += line.len();
        }
        Ok(Self { root, items })
    }

    pub fn manifest_text(&self) -> String {
        self.items
            .iter()
            .map(|(i, m)| format!("{}\t{}\n", i.display(), m.display()))
            .collect()
    }

    pub fn write_manifest(&self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST_NAME);
        write_file(&path, self.manifest_text().as_bytes())?;
        Ok(path)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Reads every pair, checking that image and mask shapes agree.
    pub fn samples(&self) -> Result<Vec<crate::data::Sample>> {
        self.items
            .iter()
            .map(|(i, m)| {
                let image = read_pgm_image(&self.root.join(i))?;
                let mask = read_pgm_mask(&self.root.join(m))?;
                if image.shape() != [mask.height(), mask.width()] {
                    return Err(Error::Dimension(format!(
                        "{} is {:?} but its mask is {}x{}",
                        i.display(),
                        image.shape(),
                        mask.height(),
                        mask.width()
                    )));
                }
                Ok(crate::data::Sample { image, mask })
            })
            .collect()
    }
}
