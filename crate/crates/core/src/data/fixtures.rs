//! Procedural image sets used as desk-scale stand-ins for MNIST-style data.
//!
//! * [`glyphs`]: six classes of thin anti-aliased strokes on a black
//!   background (ring, vertical bar, horizontal bar, X, plus, square).
//! * [`garments`]: filled, textured silhouettes (shirt, trousers, bag, shoe).
//!   Structurally different from the glyphs; used as an OOD set.
//! * [`blobs`]: two linearly separable classes (bright blob in the top or
//!   bottom half; horizontal flips keep the class).

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::rng::{self, SplitMix64};
use crate::tensor::Tensor;

pub const GLYPH_CLASSES: usize = 6;
pub const GLYPH_SIDE: usize = 28;

type Point = (f64, f64);

fn seg_dist(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

fn render(side: usize, mut value: impl FnMut(f64, f64) -> f64) -> Vec<f32> {
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            out.push(value(x as f64 + 0.5, y as f64 + 0.5).clamp(0.0, 1.0) as f32);
        }
    }
    out
}

/// Anti-aliased stroke coverage for a point at distance `d` from the centre line.
fn stroke(d: f64, thickness: f64) -> f64 {
    (thickness / 2.0 + 0.5 - d).clamp(0.0, 1.0)
}

fn rotate(p: Point, c: Point, angle: f64) -> Point {
    let (s, co) = angle.sin_cos();
    let (x, y) = (p.0 - c.0, p.1 - c.1);
    (c.0 + co * x - s * y, c.1 + s * x + co * y)
}

fn glyph(class: usize, r: &mut SplitMix64) -> Vec<f32> {
    let side = GLYPH_SIDE as f64;
    let c = (side / 2.0 + r.gen_range(-3.0..3.0), side / 2.0 + r.gen_range(-3.0..3.0));
    let size = r.gen_range(6.0..9.5);
    let thick = r.gen_range(1.5..2.8);
    let ink = r.gen_range(0.75..1.0);
    let tilt = r.gen_range(-0.2..0.2);
    let segs: Vec<(Point, Point)> = match class {
        1 => vec![((c.0, c.1 - size), (c.0, c.1 + size))],
        2 => vec![((c.0 - size, c.1), (c.0 + size, c.1))],
        3 => vec![
            ((c.0 - size * 0.8, c.1 - size * 0.8), (c.0 + size * 0.8, c.1 + size * 0.8)),
            ((c.0 - size * 0.8, c.1 + size * 0.8), (c.0 + size * 0.8, c.1 - size * 0.8)),
        ],
        4 => vec![((c.0, c.1 - size), (c.0, c.1 + size)), ((c.0 - size, c.1), (c.0 + size, c.1))],
        5 => {
            let s = size * 0.8;
            let corners = [(c.0 - s, c.1 - s), (c.0 + s, c.1 - s), (c.0 + s, c.1 + s), (c.0 - s, c.1 + s)];
            (0..4).map(|i| (corners[i], corners[(i + 1) % 4])).collect()
        }
        _ => Vec::new(),
    };
    let segs: Vec<(Point, Point)> = segs.into_iter().map(|(a, b)| (rotate(a, c, tilt), rotate(b, c, tilt))).collect();
    let noise = Normal::new(0.0, 0.03).unwrap();
    let mut img = render(GLYPH_SIDE, |x, y| {
        let d = if class == 0 {
            (((x - c.0).powi(2) + (y - c.1).powi(2)).sqrt() - size * 0.85).abs()
        } else {
            segs.iter().map(|&(a, b)| seg_dist((x, y), a, b)).fold(f64::INFINITY, f64::min)
        };
        ink * stroke(d, thick)
    });
    for v in &mut img {
        *v = (f64::from(*v) + noise.sample(r)).clamp(0.0, 1.0) as f32;
    }
    img
}

fn garment(kind: usize, r: &mut SplitMix64) -> Vec<f32> {
    let side = GLYPH_SIDE as f64;
    let c = (side / 2.0 + r.gen_range(-2.0..2.0), side / 2.0 + r.gen_range(-2.0..2.0));
    let fill = r.gen_range(0.35..0.85);
    let freq = r.gen_range(0.3..1.6);
    let phase = r.gen_range(0.0..std::f64::consts::TAU);
    let contrast = r.gen_range(0.05..0.3);
    let w = r.gen_range(7.0..10.0);
    let h = r.gen_range(8.0..11.0);
    let inside_rect = |x: f64, y: f64, x0: f64, y0: f64, x1: f64, y1: f64| x >= x0 && x <= x1 && y >= y0 && y <= y1;
    render(GLYPH_SIDE, |x, y| {
        let inside = match kind {
            0 => {
                inside_rect(x, y, c.0 - w * 0.7, c.1 - h, c.0 + w * 0.7, c.1 + h)
                    || inside_rect(x, y, c.0 - w * 1.3, c.1 - h, c.0 + w * 1.3, c.1 - h * 0.3)
            }
            1 => {
                inside_rect(x, y, c.0 - w * 0.8, c.1 - h, c.0 + w * 0.8, c.1 - h * 0.4)
                    || inside_rect(x, y, c.0 - w * 0.8, c.1 - h, c.0 - w * 0.15, c.1 + h)
                    || inside_rect(x, y, c.0 + w * 0.15, c.1 - h, c.0 + w * 0.8, c.1 + h)
            }
            2 => {
                let handle = (((x - c.0).powi(2) + (y - (c.1 - h * 0.3)).powi(2)).sqrt() - w * 0.6).abs() < 1.2
                    && y < c.1 - h * 0.3;
                handle || inside_rect(x, y, c.0 - w, c.1 - h * 0.3, c.0 + w, c.1 + h * 0.8)
            }
            _ => {
                let ex = (x - c.0) / (w * 1.3);
                let ey = (y - c.1) / (h * 0.6);
                (ex * ex + ey * ey <= 1.0 && y >= c.1 - h * 0.2) || inside_rect(x, y, c.0 - w * 1.2, c.1 - h * 0.6, c.0 - w * 0.3, c.1)
            }
        };
        if inside {
            fill * (1.0 - contrast + contrast * (freq * y + phase).sin())
        } else {
            0.0
        }
    })
}

fn build(name: &str, n: usize, side: usize, images: Vec<f32>, labels: Option<Vec<usize>>) -> Dataset {
    let t = Tensor::new(vec![n, 1, side, side], images).expect("fixture shape");
    Dataset::new(name, t, labels).expect("fixture pixels in range")
}

/// Balanced glyph set of `n` images, `28×28`, classes `0..6`.
pub fn glyphs(n: usize, seed: u64) -> Dataset {
    let base = rng::derive_seed(seed, "fixture/glyphs");
    let mut images = Vec::with_capacity(n * GLYPH_SIDE * GLYPH_SIDE);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % GLYPH_CLASSES;
        images.extend(glyph(class, &mut rng::item_stream(base, i)));
        labels.push(class);
    }
    build("glyphs", n, GLYPH_SIDE, images, Some(labels))
}

/// `n` garment silhouettes, `28×28`, unlabeled.
pub fn garments(n: usize, seed: u64) -> Dataset {
    let base = rng::derive_seed(seed, "fixture/garments");
    let mut images = Vec::with_capacity(n * GLYPH_SIDE * GLYPH_SIDE);
    for i in 0..n {
        images.extend(garment(i % 4, &mut rng::item_stream(base, i)));
    }
    build("garments", n, GLYPH_SIDE, images, None)
}

/// Two classes: a Gaussian bump in the top (class 0) or bottom (class 1) half.
pub fn blobs(n: usize, side: usize, seed: u64) -> Dataset {
    let base = rng::derive_seed(seed, "fixture/blobs");
    let mut images = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    let s = side as f64;
    for i in 0..n {
        let class = i % 2;
        let mut r = rng::item_stream(base, i);
        let cx = s * 0.5 + r.gen_range(-2.0..2.0);
        let cy = if class == 0 { s * 0.25 } else { s * 0.75 } + r.gen_range(-1.0..1.0);
        let width = r.gen_range(1.5..3.0);
        images.extend(render(side, |x, y| (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * width * width)).exp()));
        labels.push(class);
    }
    build("blobs", n, side, images, Some(labels))
}
