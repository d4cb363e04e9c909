//! Unsupervised detector: regularized Mahalanobis distance of the
//! standardized extreme-value features from their training mean.

use crate::container::{fmt_exact, Container};
use crate::error::{Error, Result};
use crate::linalg::{Cholesky, Matrix};
use crate::metrics::tpr_threshold;
use crate::tensor::Tensor;

pub const DEFAULT_C: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    InDistribution,
    OutOfDistribution,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MDetector {
    pub mean: Vec<f64>,
    pub covariance: Matrix,
    pub c: f64,
    /// Cholesky factor of `covariance + c·I`.
    pub factor: Cholesky,
    /// Confidence cutoff: a point is in-distribution iff `−D_M > threshold`.
    pub threshold: Option<f64>,
}

impl MDetector {
    /// Fits mean and unbiased covariance of already transformed features and
    /// factorizes `M + C·I` once.
    pub fn fit(features: &Matrix, c: f64) -> Result<Self> {
        let (n, d) = (features.rows(), features.cols());
        if n <= d {
            return Err(Error::contract(format!("need more rows than features, got {n} rows for {d} features")));
        }
        if !(c >= 0.0) || !c.is_finite() {
            return Err(Error::Config(format!("regularization C = {c} must be finite and ≥ 0")));
        }
        let mean = features.column_means();
        let covariance = features.covariance()?;
        let factor = Cholesky::factor(&covariance.add_diagonal(c))?;
        Ok(Self { mean, covariance, c, factor, threshold: None })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `D_M(x) = sqrt((x−μ)ᵀ (M + C·I)⁻¹ (x−μ))` via a triangular solve.
    pub fn distance(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::contract(format!("feature length {}, detector expects {}", x.len(), self.dim())));
        }
        if let Some(j) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!("non-finite feature at column {j}")));
        }
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        Ok(self.factor.inverse_quadratic_form(&centered).sqrt())
    }

    /// Confidence score (higher = more in-distribution): `−D_M(x)`.
    pub fn confidence(&self, x: &[f64]) -> Result<f64> {
        Ok(-self.distance(x)?)
    }

    pub fn confidences(&self, features: &Matrix) -> Result<Vec<f64>> {
        features.iter_rows().map(|r| self.confidence(r)).collect()
    }

    /// Sets the threshold at the 95%-TPR point of held-out in-distribution features.
    pub fn calibrate(&mut self, id_features: &Matrix) -> Result<f64> {
        let t = tpr_threshold(&self.confidences(id_features)?, 0.95)?;
        self.threshold = Some(t);
        Ok(t)
    }

    pub fn decide(&self, x: &[f64]) -> Result<Decision> {
        let t = self.threshold.ok_or_else(|| Error::Config("detector threshold is not calibrated".into()))?;
        Ok(if self.confidence(x)? > t { Decision::InDistribution } else { Decision::OutOfDistribution })
    }

    /// Parameters go into the manifest as exact text; the f32 blobs are
    /// copies for external inspection.
    pub(crate) fn write(&self, c: &mut Container) -> Result<()> {
        let d = self.dim();
        c.manifest.set("m.dim", d);
        c.manifest.set("m.c", fmt_exact(self.c));
        c.manifest.set("m.threshold", self.threshold.map_or_else(|| "none".into(), fmt_exact));
        c.manifest.set_floats("m.mean", &self.mean);
        c.manifest.set_floats("m.covariance", self.covariance.data());
        c.manifest.set_floats("m.factor", self.factor.lower().data());
        c.push("m.mean", to_tensor(vec![d], &self.mean)?);
        c.push("m.covariance", to_tensor(vec![d, d], self.covariance.data())?);
        c.push("m.factor", to_tensor(vec![d, d], self.factor.lower().data())?);
        Ok(())
    }

    pub(crate) fn read(c: &Container) -> Result<Self> {
        let d: usize = c.manifest.parse("m.dim")?;
        let threshold = parse_threshold(c, "m.threshold")?;
        let mean = c.manifest.parse_floats("m.mean", d)?;
        let covariance = Matrix::new(d, d, c.manifest.parse_floats("m.covariance", d * d)?)?;
        let factor = Cholesky::from_lower(Matrix::new(d, d, c.manifest.parse_floats("m.factor", d * d)?)?)
            .map_err(|e| Error::format(0, e.to_string()))?;
        Ok(Self { mean, covariance, c: c.manifest.parse("m.c")?, factor, threshold })
    }
}

pub(crate) fn parse_threshold(c: &Container, key: &str) -> Result<Option<f64>> {
    match c.manifest.require(key)? {
        "none" => Ok(None),
        _ => Ok(Some(c.manifest.parse(key)?)),
    }
}

pub(crate) fn to_tensor(shape: Vec<usize>, v: &[f64]) -> Result<Tensor> {
    Tensor::new(shape, v.iter().map(|&x| x as f32).collect())
}
