//! Self-supervised detector: features split around the in-distribution mean,
//! labelled by classifier correctness on calibration and distorted images, and
//! fed to an L2-regularized logistic regression chosen by distortion-holdout
//! cross-validation.

use crate::container::{fmt_exact, Container};
use crate::data::Dataset;
use crate::distortions::{distort_dataset, DistortionKind};
use crate::error::{Error, Result};
use crate::features::{extract_images, FeatureKind, PowerTransform, STD_FLOOR};
use crate::linalg::{Cholesky, Matrix};
use crate::metrics::tpr_threshold;
use crate::model::Network;
use crate::xood_m::{parse_threshold, to_tensor, Decision};

pub const DEFAULT_GRID: [f64; 7] = [1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1000.0];
pub const MAX_NEWTON_ITERS: usize = 100;
pub const GRAD_TOL: f64 = 1e-8;

/// `(relu(m − m̄), relu(m̄ − m))` per feature, then standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitScaler {
    /// In-distribution mean `m̄_i` per raw feature.
    pub means: Vec<f64>,
    /// Standardization of the `2d` split columns, ordered `m1⁺, m1⁻, m2⁺, …`.
    pub scale_means: Vec<f64>,
    pub scale_stds: Vec<f64>,
    pub degenerate: Vec<bool>,
}

/// Unscaled split of one row around `means`.
pub fn split_row(row: &[f64], means: &[f64]) -> Vec<f64> {
    row.iter().zip(means).flat_map(|(&m, &mean)| [(m - mean).max(0.0), (mean - m).max(0.0)]).collect()
}

impl SplitScaler {
    pub fn dim(&self) -> usize {
        self.means.len()
    }

    pub fn split(&self, row: &[f64]) -> Vec<f64> {
        split_row(row, &self.means)
    }

    pub fn transform_row(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.dim() {
            return Err(Error::contract(format!("feature length {}, detector expects {}", row.len(), self.dim())));
        }
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!("non-finite feature at column {j}")));
        }
        let mut s = self.split(row);
        for (j, v) in s.iter_mut().enumerate() {
            *v = (*v - self.scale_means[j]) / self.scale_stds[j];
        }
        Ok(s)
    }

    pub fn transform(&self, features: &Matrix) -> Result<Matrix> {
        let data = features.iter_rows().map(|r| self.transform_row(r)).collect::<Result<Vec<_>>>()?;
        Matrix::new(features.rows(), 2 * self.dim(), data.concat())
    }
}

/// Fits the split means on `means_source` and the standardization on
/// `fit_features`; returns the scaler and the scaled `fit_features`.
pub fn split_and_scale(fit_features: &Matrix, means_source: &Matrix) -> Result<(SplitScaler, Matrix)> {
    if means_source.rows() == 0 || fit_features.rows() == 0 {
        return Err(Error::contract("split scaling needs nonempty feature matrices"));
    }
    if means_source.cols() != fit_features.cols() {
        return Err(Error::dim("split", format!("{} vs {} columns", fit_features.cols(), means_source.cols())));
    }
    let means = means_source.column_means();
    let n = fit_features.rows() as f64;
    let split: Vec<Vec<f64>> = fit_features.iter_rows().map(|r| split_row(r, &means)).collect();
    let width = 2 * means.len();
    let mut scaler = SplitScaler { means, scale_means: vec![0.0; width], scale_stds: vec![1.0; width], degenerate: vec![false; width] };
    for j in 0..width {
        let mean = split.iter().map(|r| r[j]).sum::<f64>() / n;
        let std = (split.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n).sqrt();
        scaler.scale_means[j] = mean;
        if std >= STD_FLOOR {
            scaler.scale_stds[j] = std;
        } else {
            scaler.degenerate[j] = true;
        }
    }
    let scaled = scaler.transform(fit_features)?;
    Ok((scaler, scaled))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `w₀ + Σ wⱼ xⱼ` with `weights = [w₀, w₁, …]`.
pub fn linear_score(weights: &[f64], x: &[f64]) -> f64 {
    weights[0] + weights[1..].iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
}

/// Mean logistic loss of `weights` on `(x, y)`, without the penalty.
pub fn log_loss(x: &Matrix, y: &[bool], weights: &[f64]) -> f64 {
    let total: f64 = x
        .iter_rows()
        .zip(y)
        .map(|(r, &label)| {
            let z = linear_score(weights, r);
            softplus(z) - if label { z } else { 0.0 }
        })
        .sum();
    total / x.rows() as f64
}

/// Mean logistic loss plus `λ·‖w‖²/2`, intercept unpenalized.
pub fn objective(x: &Matrix, y: &[bool], weights: &[f64], lambda: f64) -> f64 {
    log_loss(x, y, weights) + 0.5 * lambda * weights[1..].iter().map(|w| w * w).sum::<f64>()
}

/// Gradient of [`objective`].
pub fn gradient(x: &Matrix, y: &[bool], weights: &[f64], lambda: f64) -> Vec<f64> {
    let p = x.cols() + 1;
    let n = x.rows() as f64;
    let mut g = vec![0.0; p];
    for (r, &label) in x.iter_rows().zip(y) {
        let e = sigmoid(linear_score(weights, r)) - if label { 1.0 } else { 0.0 };
        g[0] += e;
        for (gj, v) in g[1..].iter_mut().zip(r) {
            *gj += e * v;
        }
    }
    for (j, gj) in g.iter_mut().enumerate() {
        *gj /= n;
        if j > 0 {
            *gj += lambda * weights[j];
        }
    }
    g
}

fn hessian(x: &Matrix, weights: &[f64], lambda: f64) -> Matrix {
    let p = x.cols() + 1;
    let n = x.rows() as f64;
    let mut h = vec![0.0; p * p];
    let mut row = vec![1.0; p];
    for r in x.iter_rows() {
        row[1..].copy_from_slice(r);
        let s = sigmoid(linear_score(weights, r));
        let s = s * (1.0 - s);
        for a in 0..p {
            let sa = s * row[a];
            for b in 0..=a {
                h[a * p + b] += sa * row[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..=a {
            h[a * p + b] /= n;
            h[b * p + a] = h[a * p + b];
        }
        if a > 0 {
            h[a * p + a] += lambda;
        }
    }
    Matrix::new(p, p, h).expect("square hessian")
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Minimizes [`objective`] by full-batch Newton with step halving. Returns
/// `[intercept, w₁, …, w_p]`.
pub fn fit_logreg(x: &Matrix, y: &[bool], lambda: f64) -> Result<Vec<f64>> {
    if x.rows() != y.len() {
        return Err(Error::contract(format!("{} rows for {} labels", x.rows(), y.len())));
    }
    if !y.iter().any(|&b| b) || y.iter().all(|&b| b) {
        return Err(Error::contract("logistic regression needs both labels present"));
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::Config(format!("regularization λ = {lambda} must be positive and finite")));
    }
    let mut w = vec![0.0; x.cols() + 1];
    let mut f = objective(x, y, &w, lambda);
    for _ in 0..MAX_NEWTON_ITERS {
        let g = gradient(x, y, &w, lambda);
        if inf_norm(&g) < GRAD_TOL {
            break;
        }
        let step = Cholesky::factor(&hessian(x, &w, lambda))?.solve(&g);
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = w.iter().zip(&step).map(|(a, s)| a - t * s).collect();
            let fc = objective(x, y, &cand, lambda);
            if fc <= f {
                w = cand;
                f = fc;
                break;
            }
            t /= 2.0;
            if t < 1e-10 {
                // No descent left at machine precision.
                return Ok(w);
            }
        }
    }
    Ok(w)
}

/// Raw (power-transformed, unsplit) features with correctness labels and the
/// source subset of each row: fold 0 is the calibration data, fold `i + 1`
/// the `i`-th distortion.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatureSet {
    pub features: Matrix,
    pub labels: Vec<bool>,
    pub fold_id: Vec<usize>,
}

impl LabeledFeatureSet {
    pub fn num_folds(&self) -> usize {
        self.fold_id.iter().max().map_or(0, |m| m + 1)
    }
}

/// Runs the calibration set and one distorted copy per entry of `distortions`
/// (normally [`DistortionKind::ALL`]) through the network and labels each row
/// by classifier correctness.
pub fn build_training_set(
    net: &Network,
    transform: &PowerTransform,
    kind: FeatureKind,
    calibration: &Dataset,
    distortions: &[DistortionKind],
    seed: u64,
) -> Result<LabeledFeatureSet> {
    calibration.labels()?;
    if distortions.is_empty() {
        return Err(Error::Config("XOOD-L needs at least one distortion".into()));
    }
    let mut sets = vec![calibration.clone()];
    for &d in distortions {
        sets.push(distort_dataset(calibration, d, seed)?);
    }
    let mut feats = Vec::with_capacity(sets.len());
    let mut labels = Vec::new();
    let mut fold_id = Vec::new();
    for (fold, ds) in sets.iter().enumerate() {
        let batch = extract_images(net, &ds.images, kind)?;
        feats.push(transform.apply(&batch.features)?);
        labels.extend(batch.predictions.iter().zip(ds.labels()?).map(|(p, y)| p == y));
        fold_id.extend(std::iter::repeat_n(fold, ds.len()));
    }
    let features = Matrix::vstack(&feats.iter().collect::<Vec<_>>())?;
    Ok(LabeledFeatureSet { features, labels, fold_id })
}

/// Held-out mean log-loss for every `(λ, fold)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub grid: Vec<f64>,
    /// `losses[i][f]`: λ = `grid[i]`, fold `f` held out.
    pub losses: Vec<Vec<f64>>,
    pub mean_losses: Vec<f64>,
    pub selected: f64,
}

impl CvReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lambda,fold,heldout_log_loss\n");
        for (lambda, row) in self.grid.iter().zip(&self.losses) {
            for (f, l) in row.iter().enumerate() {
                s.push_str(&format!("{lambda:?},{f},{l:?}\n"));
            }
        }
        s
    }
}

/// Leave-one-fold-out CV over already scaled features. The λ with lowest mean
/// held-out loss wins; ties go to the larger λ.
pub fn cross_validate(x: &Matrix, labels: &[bool], fold_id: &[usize], grid: &[f64]) -> Result<CvReport> {
    if grid.is_empty() {
        return Err(Error::Config("empty λ grid".into()));
    }
    if x.rows() != labels.len() || x.rows() != fold_id.len() {
        return Err(Error::contract("features, labels and fold ids differ in length"));
    }
    let k = fold_id.iter().max().map_or(0, |m| m + 1);
    if k < 2 {
        return Err(Error::contract("cross-validation needs at least two folds"));
    }
    let mut members = vec![Vec::new(); k];
    for (i, &f) in fold_id.iter().enumerate() {
        members[f].push(i);
    }
    if let Some(f) = members.iter().position(Vec::is_empty) {
        return Err(Error::contract(format!("fold {f} has no rows")));
    }
    let select = |idx: &[usize]| (x.select_rows(idx), idx.iter().map(|&i| labels[i]).collect::<Vec<_>>());
    let mut losses = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let mut row = Vec::with_capacity(k);
        for held in &members {
            let train: Vec<usize> = (0..x.rows()).filter(|&i| fold_id[i] != fold_id[held[0]]).collect();
            let (tx, ty) = select(&train);
            let w = fit_logreg(&tx, &ty, lambda)?;
            let (vx, vy) = select(held);
            row.push(log_loss(&vx, &vy, &w));
        }
        losses.push(row);
    }
    let mean_losses: Vec<f64> = losses.iter().map(|r| r.iter().sum::<f64>() / k as f64).collect();
    let mut best = 0;
    for i in 1..grid.len() {
        let (a, b) = (mean_losses[i], mean_losses[best]);
        if a < b || (a == b && grid[i] > grid[best]) {
            best = i;
        }
    }
    Ok(CvReport { grid: grid.to_vec(), losses, mean_losses, selected: grid[best] })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LDetector {
    pub scaler: SplitScaler,
    /// `[intercept, w₁, …, w_{2d}]`.
    pub weights: Vec<f64>,
    pub lambda: f64,
    /// Score cutoff: in-distribution iff `score > threshold`.
    pub threshold: Option<f64>,
}

impl LDetector {
    /// Splits around the mean of `means_source`, selects λ by cross-validation
    /// and refits on all rows.
    pub fn fit(set: &LabeledFeatureSet, means_source: &Matrix, grid: &[f64]) -> Result<(Self, CvReport)> {
        let (scaler, scaled) = split_and_scale(&set.features, means_source)?;
        let report = cross_validate(&scaled, &set.labels, &set.fold_id, grid)?;
        let weights = fit_logreg(&scaled, &set.labels, report.selected)?;
        Ok((Self { scaler, weights, lambda: report.selected, threshold: None }, report))
    }

    pub fn dim(&self) -> usize {
        self.scaler.dim()
    }

    /// `w·[1, split-scaled x]` before the sigmoid.
    pub fn linear(&self, x: &[f64]) -> Result<f64> {
        Ok(linear_score(&self.weights, &self.scaler.transform_row(x)?))
    }

    /// Probability that the classifier is right about this input; higher is
    /// more in-distribution.
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.linear(x)?))
    }

    pub fn scores(&self, features: &Matrix) -> Result<Vec<f64>> {
        features.iter_rows().map(|r| self.score(r)).collect()
    }

    pub fn calibrate(&mut self, id_features: &Matrix) -> Result<f64> {
        let t = tpr_threshold(&self.scores(id_features)?, 0.95)?;
        self.threshold = Some(t);
        Ok(t)
    }

    pub fn decide(&self, x: &[f64]) -> Result<Decision> {
        let t = self.threshold.ok_or_else(|| Error::Config("detector threshold is not calibrated".into()))?;
        Ok(if self.score(x)? > t { Decision::InDistribution } else { Decision::OutOfDistribution })
    }

    pub(crate) fn write(&self, c: &mut Container) -> Result<()> {
        let d = self.dim();
        let s = &self.scaler;
        c.manifest.set("l.dim", d);
        c.manifest.set("l.lambda", fmt_exact(self.lambda));
        c.manifest.set("l.threshold", self.threshold.map_or_else(|| "none".into(), fmt_exact));
        c.manifest.set("l.intercept", fmt_exact(self.weights[0]));
        c.manifest.set_floats("l.means", &s.means);
        c.manifest.set_floats("l.scale_means", &s.scale_means);
        c.manifest.set_floats("l.scale_stds", &s.scale_stds);
        let flagged: Vec<String> = (0..2 * d).filter(|&j| s.degenerate[j]).map(|j| j.to_string()).collect();
        c.manifest.set("l.degenerate", flagged.join(","));
        c.manifest.set_floats("l.weights", &self.weights[1..]);
        c.push("l.means", to_tensor(vec![d], &s.means)?);
        c.push("l.scales", to_tensor(vec![2, 2 * d], &[s.scale_means.as_slice(), s.scale_stds.as_slice()].concat())?);
        c.push("l.weights", to_tensor(vec![2 * d], &self.weights[1..])?);
        Ok(())
    }

    pub(crate) fn read(c: &Container) -> Result<Self> {
        let m = &c.manifest;
        let d: usize = m.parse("l.dim")?;
        let mut degenerate = vec![false; 2 * d];
        for j in m.require("l.degenerate")?.split(',').filter(|s| !s.is_empty()) {
            let j: usize = j.parse().map_err(|_| Error::format(0, format!("bad degenerate index `{j}`")))?;
            *degenerate.get_mut(j).ok_or_else(|| Error::format(0, format!("degenerate index {j} out of range")))? = true;
        }
        let scaler = SplitScaler {
            means: m.parse_floats("l.means", d)?,
            scale_means: m.parse_floats("l.scale_means", 2 * d)?,
            scale_stds: m.parse_floats("l.scale_stds", 2 * d)?,
            degenerate,
        };
        let mut weights = vec![m.parse("l.intercept")?];
        weights.extend(m.parse_floats("l.weights", 2 * d)?);
        Ok(Self { scaler, weights, lambda: m.parse("l.lambda")?, threshold: parse_threshold(c, "l.threshold")? })
    }
}
