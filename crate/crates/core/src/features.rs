//! Per-layer statistics of the activation-layer inputs, and the
//! Yeo-Johnson power transform that makes them roughly Gaussian.

use std::fmt;
use std::str::FromStr;

use crate::container::fmt_exact;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{Network, TapTrace};
use crate::tensor::Tensor;

/// Which statistic(s) to take from each tap tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureKind {
    MinMax,
    MinOnly,
    MaxOnly,
    /// Fraction of strictly positive values.
    Positivity,
    Sum,
    Lp(u8),
    /// Lp norm of `relu(x)` and of `relu(-x)`.
    SplitLp(u8),
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 11] = [
        FeatureKind::MinMax,
        FeatureKind::MinOnly,
        FeatureKind::MaxOnly,
        FeatureKind::Positivity,
        FeatureKind::Sum,
        FeatureKind::Lp(1),
        FeatureKind::Lp(2),
        FeatureKind::Lp(3),
        FeatureKind::SplitLp(1),
        FeatureKind::SplitLp(2),
        FeatureKind::SplitLp(3),
    ];

    fn validate(self) -> Result<Self> {
        match self {
            FeatureKind::Lp(p) | FeatureKind::SplitLp(p) if !(1..=3).contains(&p) => {
                Err(Error::Config(format!("Lp order {p} not in {{1, 2, 3}}")))
            }
            k => Ok(k),
        }
    }

    pub fn per_layer(self) -> usize {
        match self {
            FeatureKind::MinMax | FeatureKind::SplitLp(_) => 2,
            _ => 1,
        }
    }

    /// Column suffixes for one layer.
    fn suffixes(self) -> Vec<String> {
        match self {
            FeatureKind::MinMax => vec!["min".into(), "max".into()],
            FeatureKind::MinOnly => vec!["min".into()],
            FeatureKind::MaxOnly => vec!["max".into()],
            FeatureKind::Positivity => vec!["positivity".into()],
            FeatureKind::Sum => vec!["sum".into()],
            FeatureKind::Lp(p) => vec![format!("l{p}")],
            FeatureKind::SplitLp(p) => vec![format!("l{p}_pos"), format!("l{p}_neg")],
        }
    }

    /// `layer1_min, layer1_max, …` for `r` layers.
    pub fn column_names(self, r: usize) -> Vec<String> {
        let suffixes = self.suffixes();
        (1..=r).flat_map(|j| suffixes.iter().map(move |s| format!("layer{j}_{s}"))).collect()
    }

    fn push_stats(self, x: &[f32], out: &mut Vec<f64>) {
        let lp = |p: u8, vals: &mut dyn Iterator<Item = f64>| -> f64 {
            let s: f64 = vals.map(|v| v.abs().powi(i32::from(p))).sum();
            s.powf(1.0 / f64::from(p))
        };
        match self {
            FeatureKind::MinMax => {
                let (lo, hi) = min_max(x);
                out.push(lo);
                out.push(hi);
            }
            FeatureKind::MinOnly => out.push(min_max(x).0),
            FeatureKind::MaxOnly => out.push(min_max(x).1),
            FeatureKind::Positivity => out.push(x.iter().filter(|&&v| v > 0.0).count() as f64 / x.len() as f64),
            FeatureKind::Sum => out.push(x.iter().map(|&v| f64::from(v)).sum()),
            FeatureKind::Lp(p) => out.push(lp(p, &mut x.iter().map(|&v| f64::from(v)))),
            FeatureKind::SplitLp(p) => {
                out.push(lp(p, &mut x.iter().map(|&v| f64::from(v.max(0.0)))));
                out.push(lp(p, &mut x.iter().map(|&v| f64::from((-v).max(0.0)))));
            }
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureKind::MinMax => write!(f, "minmax"),
            FeatureKind::MinOnly => write!(f, "min"),
            FeatureKind::MaxOnly => write!(f, "max"),
            FeatureKind::Positivity => write!(f, "positivity"),
            FeatureKind::Sum => write!(f, "sum"),
            FeatureKind::Lp(p) => write!(f, "l{p}"),
            FeatureKind::SplitLp(p) => write!(f, "split-l{p}"),
        }
    }
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let order = |t: &str| t.parse::<u8>().map_err(|_| Error::Config(format!("unknown feature kind `{s}`")));
        let kind = match s {
            "minmax" => FeatureKind::MinMax,
            "min" => FeatureKind::MinOnly,
            "max" => FeatureKind::MaxOnly,
            "positivity" => FeatureKind::Positivity,
            "sum" => FeatureKind::Sum,
            _ => {
                if let Some(p) = s.strip_prefix("split-l") {
                    FeatureKind::SplitLp(order(p)?)
                } else if let Some(p) = s.strip_prefix('l') {
                    FeatureKind::Lp(order(p)?)
                } else {
                    return Err(Error::Config(format!("unknown feature kind `{s}`")));
                }
            }
        };
        kind.validate()
    }
}

fn min_max(x: &[f32]) -> (f64, f64) {
    let (lo, hi) = x.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    (f64::from(lo), f64::from(hi))
}

/// Feature matrix for a traced batch: one row per image, `per_layer · r` columns
/// ordered layer by layer (`layer1_min, layer1_max, layer2_min, …` for MinMax).
pub fn extract(trace: &TapTrace, kind: FeatureKind) -> Result<Matrix> {
    let kind = kind.validate()?;
    if trace.taps.is_empty() {
        return Err(Error::contract("trace has no activation layers"));
    }
    let n = trace.batch();
    let width = kind.per_layer() * trace.num_layers();
    let mut data = Vec::with_capacity(n * width);
    for i in 0..n {
        for j in 0..trace.num_layers() {
            kind.push_stats(trace.tap(j, i), &mut data);
        }
    }
    Matrix::new(n, width, data)
}

/// Images per forward pass in [`extract_images`]; bounds tap memory.
pub const EXTRACT_CHUNK: usize = 256;

/// Classifier outputs and raw features for a set of images.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    pub predictions: Vec<usize>,
    pub probabilities: Tensor,
    pub features: Matrix,
}

/// Runs the network over `images` in chunks and extracts `kind` features.
pub fn extract_images(net: &Network, images: &Tensor, kind: FeatureKind) -> Result<FeatureBatch> {
    let n = images.batch();
    if n == 0 {
        return Err(Error::contract("no images to extract features from"));
    }
    let mut predictions = Vec::with_capacity(n);
    let mut probs = Vec::new();
    let mut feats = Vec::new();
    for start in (0..n).step_by(EXTRACT_CHUNK) {
        let idx: Vec<usize> = (start..(start + EXTRACT_CHUNK).min(n)).collect();
        let (pred, p, trace) = net.forward_with_taps(&images.select(&idx)?)?;
        predictions.extend(pred);
        probs.push(p);
        feats.push(extract(&trace, kind)?);
    }
    let probabilities = Tensor::concat(&probs.iter().collect::<Vec<_>>())?;
    let features = Matrix::vstack(&feats.iter().collect::<Vec<_>>())?;
    Ok(FeatureBatch { predictions, probabilities, features })
}

/// Yeo-Johnson transform of one value.
pub fn yeo_johnson(x: f64, lambda: f64) -> f64 {
    const EPS: f64 = 1e-12;
    if x >= 0.0 {
        let l = x.ln_1p();
        if lambda.abs() < EPS {
            l
        } else {
            (lambda * l).exp_m1() / lambda
        }
    } else {
        let l = (-x).ln_1p();
        let e = 2.0 - lambda;
        if e.abs() < EPS {
            -l
        } else {
            -(e * l).exp_m1() / e
        }
    }
}

/// Profile log-likelihood of λ for one column:
/// `−(n/2)·ln σ̂²(λ) + (λ−1)·Σ sign(x)·ln(|x|+1)`, with σ̂² the biased variance.
pub fn yeo_johnson_log_likelihood(x: &[f64], lambda: f64) -> f64 {
    let n = x.len() as f64;
    let t: Vec<f64> = x.iter().map(|&v| yeo_johnson(v, lambda)).collect();
    let mean = t.iter().sum::<f64>() / n;
    let var = t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if !(var > 0.0) {
        // Saturated transform (or constant data): not a usable maximum.
        return f64::NEG_INFINITY;
    }
    let jac: f64 = x.iter().map(|&v| v.signum() * v.abs().ln_1p()).sum();
    let ll = -0.5 * n * var.ln() + (lambda - 1.0) * jac;
    if ll.is_nan() {
        f64::NEG_INFINITY
    } else {
        ll
    }
}

pub const LAMBDA_RANGE: (f64, f64) = (-5.0, 5.0);
const LAMBDA_TOL: f64 = 1e-4;
pub const STD_FLOOR: f64 = 1e-8;

/// Golden-section maximization of the profile log-likelihood over [`LAMBDA_RANGE`].
pub fn fit_lambda(x: &[f64]) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = LAMBDA_RANGE;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = yeo_johnson_log_likelihood(x, c);
    let mut fd = yeo_johnson_log_likelihood(x, d);
    while b - a > LAMBDA_TOL {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = yeo_johnson_log_likelihood(x, c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = yeo_johnson_log_likelihood(x, d);
        }
    }
    (a + b) / 2.0
}

/// Per-column Yeo-Johnson exponents followed by standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerTransform {
    pub lambdas: Vec<f64>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Columns whose transformed std fell below the floor; their std is stored as 1.
    pub degenerate: Vec<bool>,
}

impl PowerTransform {
    pub fn fit(features: &Matrix) -> Result<Self> {
        let n = features.rows();
        if n < 10 {
            return Err(Error::contract(format!("power transform needs at least 10 rows, got {n}")));
        }
        check_finite(features)?;
        let d = features.cols();
        let mut pt = Self {
            lambdas: Vec::with_capacity(d),
            means: Vec::with_capacity(d),
            stds: Vec::with_capacity(d),
            degenerate: Vec::with_capacity(d),
        };
        for j in 0..d {
            let col = features.column(j);
            let constant = col.iter().all(|&v| v == col[0]);
            let lambda = if constant { 1.0 } else { fit_lambda(&col) };
            let t: Vec<f64> = col.iter().map(|&v| yeo_johnson(v, lambda)).collect();
            let mean = t.iter().sum::<f64>() / n as f64;
            let std = (t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            let degenerate = !(std >= STD_FLOOR) || !std.is_finite();
            pt.lambdas.push(lambda);
            pt.means.push(mean);
            pt.stds.push(if degenerate { 1.0 } else { std });
            pt.degenerate.push(degenerate);
        }
        Ok(pt)
    }

    pub fn dim(&self) -> usize {
        self.lambdas.len()
    }

    pub fn apply_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(j, &v)| (yeo_johnson(v, self.lambdas[j]) - self.means[j]) / self.stds[j])
            .collect()
    }

    pub fn apply(&self, features: &Matrix) -> Result<Matrix> {
        if features.cols() != self.dim() {
            return Err(Error::dim(
                "power transform",
                format!("{} columns, transform fitted on {}", features.cols(), self.dim()),
            ));
        }
        check_finite(features)?;
        let data = features.iter_rows().flat_map(|r| self.apply_row(r)).collect();
        Matrix::new(features.rows(), features.cols(), data)
    }

    /// One line per dimension: `dim,lambda,mean,std[,degenerate]`.
    pub fn to_text(&self) -> String {
        let mut s = String::from("dim,lambda,mean,std\n");
        for j in 0..self.dim() {
            s.push_str(&format!(
                "{j},{},{},{}{}\n",
                fmt_exact(self.lambdas[j]),
                fmt_exact(self.means[j]),
                fmt_exact(self.stds[j]),
                if self.degenerate[j] { ",degenerate" } else { "" }
            ));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut pt = Self { lambdas: vec![], means: vec![], stds: vec![], degenerate: vec![] };
        let mut offset = 0;
        for (i, line) in text.split_inclusive('\n').enumerate() {
            let t = line.trim();
            let at = offset;
            offset += line.len();
            if t.is_empty() || (i == 0 && t.starts_with("dim")) {
                continue;
            }
            let bad = || Error::format(at, format!("bad power transform line `{t}`"));
            let parts: Vec<&str> = t.split(',').collect();
            if parts.len() < 4 || parts[0].parse::<usize>().ok() != Some(pt.dim()) {
                return Err(bad());
            }
            let num = |k: usize| parts[k].parse::<f64>().map_err(|_| bad());
            pt.lambdas.push(num(1)?);
            pt.means.push(num(2)?);
            pt.stds.push(num(3)?);
            pt.degenerate.push(parts.get(4) == Some(&"degenerate"));
        }
        Ok(pt)
    }
}

fn check_finite(m: &Matrix) -> Result<()> {
    for (i, row) in m.iter_rows().enumerate() {
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!("non-finite feature at row {i}, column {j}")));
        }
    }
    Ok(())
}

/// Feature table as CSV: `image_id,<column names>`.
pub fn features_to_csv(kind: FeatureKind, features: &Matrix) -> String {
    let r = features.cols() / kind.per_layer();
    let mut s = format!("image_id,{}\n", kind.column_names(r).join(","));
    for (i, row) in features.iter_rows().enumerate() {
        s.push_str(&i.to_string());
        for v in row {
            s.push(',');
            s.push_str(&fmt_exact(*v));
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn trace_of(layers: Vec<Vec<f32>>) -> TapTrace {
        let taps: Vec<Tensor> = layers.into_iter().map(|v| Tensor::new(vec![1, v.len()], v).unwrap()).collect();
        let logits = Tensor::new(vec![1, 2], vec![0., 0.]).unwrap();
        TapTrace { taps, probabilities: logits.clone(), logits }
    }

    /// Grid search over [-5, 5] step 0.01.
    fn grid_lambda(x: &[f64]) -> f64 {
        (0..=1000)
            .map(|i| -5.0 + i as f64 * 0.01)
            .map(|l| (l, yeo_johnson_log_likelihood(x, l)))
            .fold((0.0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best })
            .0
    }

    fn normal_sample(n: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::stream(seed, "test");
        (0..n).map(|_| r.sample(StandardNormal)).collect()
    }

    #[test]
    fn min_max_of_tap() {
        let m = extract(&trace_of(vec![vec![-1., 0., 3.]]), FeatureKind::MinMax).unwrap();
        assert_eq!(m.row(0), &[-1., 3.]);
    }

    #[test]
    fn zero_tap_statistics() {
        let t = trace_of(vec![vec![0.; 5]]);
        for kind in [FeatureKind::Positivity, FeatureKind::Sum, FeatureKind::Lp(1), FeatureKind::Lp(2), FeatureKind::Lp(3)] {
            assert_eq!(extract(&t, kind).unwrap().row(0), &[0.0], "{kind}");
        }
    }

    #[test]
    fn split_l2_hand_computed() {
        let m = extract(&trace_of(vec![vec![-3., 4.]]), FeatureKind::SplitLp(2)).unwrap();
        assert_eq!(m.row(0), &[4., 3.]);
    }

    #[test]
    fn widths_per_kind() {
        let t = trace_of(vec![vec![1., -2.], vec![0.5], vec![3., 3.]]);
        for kind in FeatureKind::ALL {
            let m = extract(&t, kind).unwrap();
            assert_eq!(m.cols(), kind.per_layer() * 3, "{kind}");
            assert_eq!(kind.column_names(3).len(), m.cols());
            assert_eq!(kind.to_string().parse::<FeatureKind>().unwrap(), kind);
        }
        assert!("l4".parse::<FeatureKind>().is_err());
        assert!(extract(&t, FeatureKind::Lp(0)).is_err());
    }

    #[test]
    fn empty_trace_rejected() {
        assert!(matches!(extract(&trace_of(vec![]), FeatureKind::MinMax), Err(Error::Contract(_))));
    }

    #[test]
    fn identity_and_log_branches() {
        for x in [-2.0, 0.0, 3.0] {
            assert!((yeo_johnson(x, 1.0) - x).abs() < 1e-12);
        }
        let e1 = std::f64::consts::E - 1.0;
        assert!((yeo_johnson(e1, 0.0) - 1.0).abs() < 1e-12);
        assert!((yeo_johnson(-e1, 2.0) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn continuous_in_lambda_at_branch_points() {
        for x in [-3.0, -0.5, 0.2, 4.0] {
            for l in [0.0, 2.0] {
                let at = yeo_johnson(x, l);
                assert!((yeo_johnson(x, l + 1e-6) - at).abs() < 1e-4);
                assert!((yeo_johnson(x, l - 1e-6) - at).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn standard_normal_lambda_near_one() {
        let x = normal_sample(2000, 1);
        let l = fit_lambda(&x);
        assert!((l - 1.0).abs() < 0.1, "{l}");
        assert!((l - grid_lambda(&x)).abs() < 0.05);
    }

    #[test]
    fn right_skew_gives_lambda_below_one() {
        let x: Vec<f64> = normal_sample(2000, 2).iter().map(|v| v.exp() - 1.0).collect();
        let l = fit_lambda(&x);
        assert!(l < 1.0 && grid_lambda(&x) < 1.0, "{l}");
    }

    #[test]
    fn fitted_transform_standardizes_its_data() {
        let rows: Vec<Vec<f64>> = normal_sample(300, 3).chunks(3).map(|c| vec![c[0].exp(), c[1] * 5.0 - 2.0, -c[2].abs()]).collect();
        let m = Matrix::from_rows(&rows).unwrap();
        let pt = PowerTransform::fit(&m).unwrap();
        let t = pt.apply(&m).unwrap();
        for j in 0..3 {
            let col = t.column(j);
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-4, "col {j}: {mean} {var}");
        }
        assert_eq!(PowerTransform::from_text(&pt.to_text()).unwrap(), pt);
    }

    #[test]
    fn constant_column_is_flagged() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, 7.0]).collect();
        let pt = PowerTransform::fit(&Matrix::from_rows(&rows).unwrap()).unwrap();
        assert_eq!(pt.degenerate, vec![false, true]);
        assert_eq!(pt.stds[1], 1.0);
        assert!(pt.apply_row(&[3.0, 7.0]).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn contract_errors() {
        let small = Matrix::from_rows(&vec![vec![1.0]; 5]).unwrap();
        assert!(PowerTransform::fit(&small).is_err());
        let rows: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64]).collect();
        let pt = PowerTransform::fit(&Matrix::from_rows(&rows).unwrap()).unwrap();
        let bad = Matrix::from_rows(&[vec![1.0], vec![f64::NAN]]).unwrap();
        let err = pt.apply(&bad).unwrap_err().to_string();
        assert!(err.contains("row 1"), "{err}");
    }

    proptest! {
        #[test]
        fn yeo_johnson_strictly_increasing(a in -50f64..50., b in -50f64..50., lambda in -2f64..4.) {
            prop_assume!((a - b).abs() > 1e-6);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(yeo_johnson(lo, lambda) < yeo_johnson(hi, lambda));
        }

        #[test]
        fn minmax_matches_flat_scan(v in prop::collection::vec(-100f32..100., 1..50)) {
            let m = extract(&trace_of(vec![v.clone()]), FeatureKind::MinMax).unwrap();
            let mut lo = v[0];
            let mut hi = v[0];
            for &x in &v { if x < lo { lo = x; } if x > hi { hi = x; } }
            prop_assert_eq!(m.row(0), &[f64::from(lo), f64::from(hi)][..]);
        }
    }
}
