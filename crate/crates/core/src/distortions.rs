//! Image distortions used to synthesize near-OOD data for XOOD-L calibration.
//!
//! Every distortion is a pure function of `(images, labels, seed)`. Image `i`
//! draws its parameters from its own stream (`seed ^ i` after purpose
//! derivation), so results do not depend on batch order or parallelism.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, SplitMix64};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DistortionKind {
    Geometric,
    Mixup,
    GaussianNoise,
    GaussianBlur,
}

impl DistortionKind {
    /// In fold order: fold `i + 1` of the XOOD-L cross-validation holds `ALL[i]`.
    pub const ALL: [DistortionKind; 4] =
        [DistortionKind::Geometric, DistortionKind::Mixup, DistortionKind::GaussianNoise, DistortionKind::GaussianBlur];

    fn tag(self) -> &'static str {
        match self {
            DistortionKind::Geometric => "geometric",
            DistortionKind::Mixup => "mixup",
            DistortionKind::GaussianNoise => "noise",
            DistortionKind::GaussianBlur => "blur",
        }
    }
}

impl fmt::Display for DistortionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for DistortionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown distortion {s:?} (expected geometric, mixup, noise or blur)")))
    }
}

/// Sampling ranges. [`Default`] gives the standard values.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranges {
    pub rotation_deg: f64,
    pub shift_fraction: f64,
    pub flip_probability: f64,
    pub brightness: (f64, f64),
    pub zoom: (f64, f64),
    pub noise_variance: (f64, f64),
    pub blur_variance: (f64, f64),
    pub affine_scale: (f64, f64),
}

impl Default for Ranges {
    fn default() -> Self {
        Self {
            rotation_deg: 90.0,
            shift_fraction: 0.2,
            flip_probability: 0.5,
            brightness: (0.2, 2.0),
            zoom: (0.9, 1.1),
            noise_variance: (0.0, 2.0),
            blur_variance: (0.2, 5.0),
            affine_scale: (1.0 / 8.0, 8.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistortionConfig {
    pub kind: DistortionKind,
    pub seed: u64,
    pub ranges: Ranges,
}

impl DistortionConfig {
    pub fn new(kind: DistortionKind, seed: u64) -> Self {
        Self { kind, seed, ranges: Ranges::default() }
    }

    pub fn apply(&self, images: &Tensor, labels: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let r = &self.ranges;
        match self.kind {
            DistortionKind::Geometric => per_image(images, labels, self.seed, self.kind, |img, dims, s| {
                apply_geometric(img, dims, &GeometricParams::sample(s, r, dims))
            }),
            DistortionKind::Mixup => mixup(images, labels, self.seed),
            DistortionKind::GaussianNoise => per_image(images, labels, self.seed, self.kind, |img, _, s| {
                let p = NoiseParams::sample(s, r);
                apply_noise(img, &p, s)
            }),
            DistortionKind::GaussianBlur => per_image(images, labels, self.seed, self.kind, |img, dims, s| {
                apply_blur(img, dims, &BlurParams::sample(s, r))
            }),
        }
    }
}

/// Distorts a whole dataset; labels (if any) follow the distortion's label rule.
pub fn distort_dataset(ds: &Dataset, kind: DistortionKind, seed: u64) -> Result<Dataset> {
    let labels = ds.labels.as_deref().unwrap_or(&[]);
    let (images, labels) = DistortionConfig::new(kind, seed).apply(&ds.images, labels)?;
    let labels = if ds.labels.is_some() { Some(labels) } else { None };
    Dataset::new(format!("{}+{kind}", ds.name), images, labels)
}

pub fn geometric(images: &Tensor, labels: &[usize], seed: u64) -> Result<(Tensor, Vec<usize>)> {
    DistortionConfig::new(DistortionKind::Geometric, seed).apply(images, labels)
}

pub fn gaussian_noise_affine(images: &Tensor, labels: &[usize], seed: u64) -> Result<(Tensor, Vec<usize>)> {
    DistortionConfig::new(DistortionKind::GaussianNoise, seed).apply(images, labels)
}

pub fn gaussian_blur_affine(images: &Tensor, labels: &[usize], seed: u64) -> Result<(Tensor, Vec<usize>)> {
    DistortionConfig::new(DistortionKind::GaussianBlur, seed).apply(images, labels)
}

/// `[C, H, W]` of one image.
pub type Dims = [usize; 3];

fn check_input(images: &Tensor, labels: &[usize]) -> Result<Dims> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::dim("distort", format!("expected [N, C, H, W], got {s:?}")));
    }
    if !labels.is_empty() && labels.len() != s[0] {
        return Err(Error::contract(format!("{} labels for {} images", labels.len(), s[0])));
    }
    if let Some(i) = images.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::contract(format!("pixel {i} is outside [0, 1]")));
    }
    Ok([s[1], s[2], s[3]])
}

fn per_image(
    images: &Tensor,
    labels: &[usize],
    seed: u64,
    kind: DistortionKind,
    f: impl Fn(&[f32], Dims, &mut SplitMix64) -> Vec<f32>,
) -> Result<(Tensor, Vec<usize>)> {
    let dims = check_input(images, labels)?;
    let base = rng::derive_seed(seed, &format!("distort/{kind}"));
    let mut out = Vec::with_capacity(images.len());
    for i in 0..images.batch() {
        out.extend(f(images.item(i), dims, &mut rng::item_stream(base, i)));
    }
    Ok((Tensor::new(images.shape().to_vec(), out)?, labels.to_vec()))
}

fn clip(v: f64) -> f32 {
    v.clamp(0.0, 1.0) as f32
}

/// Parameters of one geometric distortion. Shifts are in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometricParams {
    pub flip: bool,
    pub angle_deg: f64,
    pub zoom: f64,
    pub shift_x: f64,
    pub shift_y: f64,
    pub brightness: f64,
}

impl GeometricParams {
    pub const IDENTITY: Self = Self { flip: false, angle_deg: 0.0, zoom: 1.0, shift_x: 0.0, shift_y: 0.0, brightness: 1.0 };

    pub fn sample(r: &mut SplitMix64, ranges: &Ranges, dims: Dims) -> Self {
        let [_, h, w] = dims;
        let flip = r.gen_bool(ranges.flip_probability);
        let angle_deg = r.gen_range(-ranges.rotation_deg..=ranges.rotation_deg);
        let zoom = r.gen_range(ranges.zoom.0..=ranges.zoom.1);
        let sx = r.gen_range(-ranges.shift_fraction..=ranges.shift_fraction);
        let sy = r.gen_range(-ranges.shift_fraction..=ranges.shift_fraction);
        let brightness = r.gen_range(ranges.brightness.0..=ranges.brightness.1);
        Self { flip, angle_deg, zoom, shift_x: sx * w as f64, shift_y: sy * h as f64, brightness }
    }
}

fn bilinear(plane: &[f32], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let at = |xi: f64, yi: f64| -> f64 {
        if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
            0.0
        } else {
            f64::from(plane[yi as usize * w + xi as usize])
        }
    };
    let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1.0, y0) * fx;
    let bottom = at(x0, y0 + 1.0) * (1.0 - fx) + at(x0 + 1.0, y0 + 1.0) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Flip, rotate, zoom and shift about the image centre (bilinear, zero fill),
/// then scale brightness and clip.
pub fn apply_geometric(img: &[f32], dims: Dims, p: &GeometricParams) -> Vec<f32> {
    let [c, h, w] = dims;
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (sin, cos) = p.angle_deg.to_radians().sin_cos();
    let mut out = Vec::with_capacity(img.len());
    for plane in img.chunks_exact(h * w).take(c) {
        for y in 0..h {
            for x in 0..w {
                // Invert each step, last one first.
                let (mut u, mut v) = (x as f64 - p.shift_x - cx, y as f64 - p.shift_y - cy);
                u /= p.zoom;
                v /= p.zoom;
                let (ru, rv) = (cos * u + sin * v, -sin * u + cos * v);
                let mut sx = ru + cx;
                let sy = rv + cy;
                if p.flip {
                    sx = (w as f64 - 1.0) - sx;
                }
                out.push(clip(bilinear(plane, h, w, sx, sy) * p.brightness));
            }
        }
    }
    out
}

/// Per-image affine `x ← a·x + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub a: f64,
    pub b: f64,
}

impl Affine {
    pub const IDENTITY: Self = Self { a: 1.0, b: 0.0 };

    /// Interval `b` is drawn from for a given `a`.
    pub fn offset_range(a: f64) -> (f64, f64) {
        ((1.0 - a).min(0.0), (1.0 - a).max(0.0))
    }

    /// `a` log-uniform over the range, then `b` uniform over [`Affine::offset_range`].
    pub fn sample(r: &mut SplitMix64, ranges: &Ranges) -> Self {
        let (lo, hi) = ranges.affine_scale;
        let a = r.gen_range(lo.ln()..=hi.ln()).exp();
        Self { a, b: Self::sample_offset(r, a) }
    }

    pub fn sample_offset(r: &mut SplitMix64, a: f64) -> f64 {
        let (lo, hi) = Self::offset_range(a);
        if lo == hi {
            lo
        } else {
            r.gen_range(lo..=hi)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseParams {
    pub variance: f64,
    pub affine: Affine,
}

impl NoiseParams {
    pub fn sample(r: &mut SplitMix64, ranges: &Ranges) -> Self {
        let variance = r.gen_range(ranges.noise_variance.0..=ranges.noise_variance.1);
        Self { variance, affine: Affine::sample(r, ranges) }
    }
}

/// Adds `N(0, variance)` per pixel, drawing from `r`, then applies the affine and clips.
pub fn apply_noise(img: &[f32], p: &NoiseParams, r: &mut SplitMix64) -> Vec<f32> {
    let normal = Normal::new(0.0, p.variance.sqrt()).expect("finite variance");
    img.iter()
        .map(|&v| {
            let noisy = if p.variance > 0.0 { f64::from(v) + normal.sample(r) } else { f64::from(v) };
            clip(p.affine.a * noisy + p.affine.b)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlurParams {
    pub variance: f64,
    pub affine: Affine,
}

impl BlurParams {
    pub fn sample(r: &mut SplitMix64, ranges: &Ranges) -> Self {
        let variance = r.gen_range(ranges.blur_variance.0..=ranges.blur_variance.1);
        Self { variance, affine: Affine::sample(r, ranges) }
    }
}

/// Normalized 1-D Gaussian of radius `⌈3σ⌉`, centre at index `radius`.
pub fn gaussian_kernel(variance: f64) -> Vec<f64> {
    let sigma = variance.sqrt();
    let radius = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * variance)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Mirror index into `0..n` with the edge sample repeated (`d c b a | a b c d`).
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Separable Gaussian blur with reflected borders, without affine or clipping.
pub fn blur_plane(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let radius = (kernel.len() / 2) as i64;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] =
                kernel.iter().enumerate().map(|(k, &g)| g * plane[y * w + reflect(x as i64 + k as i64 - radius, w)]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] =
                kernel.iter().enumerate().map(|(k, &g)| g * tmp[reflect(y as i64 + k as i64 - radius, h) * w + x]).sum();
        }
    }
    out
}

pub fn apply_blur(img: &[f32], dims: Dims, p: &BlurParams) -> Vec<f32> {
    let [_, h, w] = dims;
    let kernel = gaussian_kernel(p.variance);
    img.chunks_exact(h * w)
        .flat_map(|plane| {
            let plane: Vec<f64> = plane.iter().map(|&v| f64::from(v)).collect();
            blur_plane(&plane, h, w, &kernel)
        })
        .map(|v| clip(p.affine.a * v + p.affine.b))
        .collect()
}

/// `w·a + (1 − w)·b` and the label of the heavier image (`a` when `w = 0.5`).
pub fn mix_pair(a: &[f32], b: &[f32], w: f64, label_a: Option<usize>, label_b: Option<usize>) -> (Vec<f32>, Option<usize>) {
    let img = a.iter().zip(b).map(|(&x, &y)| (w * f64::from(x) + (1.0 - w) * f64::from(y)) as f32).collect();
    (img, if w >= 0.5 { label_a } else { label_b })
}

/// Convex combination of each image with a partner from a seeded permutation.
pub fn mixup(images: &Tensor, labels: &[usize], seed: u64) -> Result<(Tensor, Vec<usize>)> {
    check_input(images, labels)?;
    let n = images.batch();
    if n < 2 {
        return Err(Error::contract("mixup needs at least two images"));
    }
    let mut partner: Vec<usize> = (0..n).collect();
    partner.shuffle(&mut rng::stream(seed, "distort/mixup/partner"));
    let base = rng::derive_seed(seed, "distort/mixup");
    let mut out = Vec::with_capacity(images.len());
    let mut new_labels = Vec::with_capacity(labels.len());
    for (i, &j) in partner.iter().enumerate() {
        let w: f64 = rng::item_stream(base, i).gen();
        let (img, label) = mix_pair(images.item(i), images.item(j), w, labels.get(i).copied(), labels.get(j).copied());
        out.extend(img);
        new_labels.extend(label);
    }
    Ok((Tensor::new(images.shape().to_vec(), out)?, new_labels))
}
