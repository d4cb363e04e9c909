//! Datasets: IDX and XTEN ingestion, label files, seeded splits and the
//! uniform/Gaussian noise OOD generators.

pub mod fixtures;
mod idx;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub use idx::{idx_images_to_bytes, idx_labels_to_bytes, parse_idx_images, parse_idx_labels};

/// Images `[N, C, H, W]` in `[0, 1]`, with optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Option<Vec<usize>>,
    pub name: String,
}

impl Dataset {
    pub fn new(name: impl Into<String>, images: Tensor, labels: Option<Vec<usize>>) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::dim("dataset", format!("images must be [N,C,H,W], got {:?}", images.shape())));
        }
        if let Some((i, v)) = images.data().iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("pixel {i} = {v} outside [0, 1]")));
        }
        if let Some(l) = &labels {
            if l.len() != images.batch() {
                return Err(Error::format(0, format!("{} labels for {} images", l.len(), images.batch())));
            }
        }
        Ok(Self { images, labels, name: name.into() })
    }

    pub fn len(&self) -> usize {
        self.images.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-image shape `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::contract(format!("dataset `{}` has no labels", self.name)))
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.labels.as_ref().and_then(|l| l.iter().max()).map(|m| m + 1)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.select(indices)?,
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            name: self.name.clone(),
        })
    }

    /// Loads images from IDX or XTEN (detected by magic), with optional labels
    /// from IDX, XTEN or one-integer-per-line text.
    pub fn load(images: impl AsRef<Path>, labels: Option<&Path>) -> Result<Self> {
        let path = images.as_ref();
        let bytes = std::fs::read(path)?;
        let tensor = if bytes.starts_with(b"XTEN") {
            let t = Tensor::read_xten(&bytes[..])?;
            match t.ndim() {
                3 => {
                    let s = t.shape().to_vec();
                    t.reshape(vec![s[0], 1, s[1], s[2]])?
                }
                _ => t,
            }
        } else {
            parse_idx_images(&bytes)?
        };
        let labels = labels.map(load_labels).transpose()?;
        let name = path.file_stem().map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned());
        Self::new(name, tensor, labels)
    }

    /// Loads an IDX image file and optional IDX label file.
    pub fn load_idx(images: impl AsRef<Path>, labels: Option<&Path>) -> Result<Self> {
        let path = images.as_ref();
        let t = parse_idx_images(&std::fs::read(path)?)?;
        let labels = labels.map(|p| std::fs::read(p).map_err(Error::from).and_then(|b| parse_idx_labels(&b))).transpose()?;
        let name = path.file_stem().map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned());
        Self::new(name, t, labels)
    }

    pub fn save_idx(&self, images: impl AsRef<Path>, labels: Option<&Path>) -> Result<()> {
        std::fs::write(images, idx_images_to_bytes(&self.images)?)?;
        if let (Some(p), Some(l)) = (labels, &self.labels) {
            std::fs::write(p, idx_labels_to_bytes(l)?)?;
        }
        Ok(())
    }

    pub fn save_xten(&self, images: impl AsRef<Path>, labels: Option<&Path>) -> Result<()> {
        self.images.save(images)?;
        if let (Some(p), Some(l)) = (labels, &self.labels) {
            save_labels_text(p, l)?;
        }
        Ok(())
    }
}

/// Reads labels from IDX (magic 0x00000801), a 1-D XTEN tensor, or text with one integer per line.
pub fn load_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(&[0, 0, 8, 1]) {
        return parse_idx_labels(&bytes);
    }
    if bytes.starts_with(b"XTEN") {
        let t = Tensor::read_xten(&bytes[..])?;
        return t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::format(0, format!("label {i} = {v} is not a class id")))
                }
            })
            .collect();
    }
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::format(e.valid_up_to(), "labels are not UTF-8"))?;
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let t = line.trim();
        if !t.is_empty() {
            out.push(t.parse().map_err(|_| Error::format(offset, format!("bad label `{t}`")))?);
        }
        offset += line.len();
    }
    Ok(out)
}

pub fn save_labels_text(path: &Path, labels: &[usize]) -> Result<()> {
    let text: String = labels.iter().map(|l| format!("{l}\n")).collect();
    std::fs::write(path, text)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    Uniform,
    Gaussian,
}

pub const GAUSSIAN_NOISE_MEAN: f64 = 0.5;
pub const GAUSSIAN_NOISE_SD: f64 = 0.25;

/// `n` noise images of per-image shape `[C, H, W]`: i.i.d. uniform on [0, 1],
/// or Normal(0.5, 0.25²) clipped to [0, 1].
pub fn gen_noise(kind: NoiseKind, n: usize, shape: [usize; 3], seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::contract("noise set needs at least one image"));
    }
    let len = n * shape.iter().product::<usize>();
    let (name, data) = match kind {
        NoiseKind::Uniform => {
            let mut r = rng::stream(seed, "noise/uniform");
            ("uniform", (0..len).map(|_| r.gen::<f32>()).collect())
        }
        NoiseKind::Gaussian => {
            let mut r = rng::stream(seed, "noise/gaussian");
            let normal = Normal::new(GAUSSIAN_NOISE_MEAN, GAUSSIAN_NOISE_SD).expect("valid sd");
            ("gaussian", (0..len).map(|_| normal.sample(&mut r).clamp(0.0, 1.0) as f32).collect())
        }
    };
    Dataset::new(name, Tensor::new(vec![n, shape[0], shape[1], shape[2]], data)?, None)
}

/// Seeded shuffle, then the first `round(fraction·n)` images go left and the rest right.
pub fn split(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (a, b) = split_indices(ds.len(), fraction, seed)?;
    Ok((ds.subset(&a)?, ds.subset(&b)?))
}

pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction {fraction} not in (0, 1)")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, "split"));
    let k = (fraction * n as f64).round() as usize;
    if k == 0 || k == n {
        return Err(Error::contract(format!("split of {n} items at {fraction} leaves an empty side")));
    }
    let right = idx.split_off(k);
    Ok((idx, right))
}
