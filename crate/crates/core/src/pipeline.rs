//! End-to-end detector fitting and scoring on top of a trained network.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::container::{Container, Manifest};
use crate::data::Dataset;
use crate::distortions::DistortionKind;
use crate::error::{Error, Result};
use crate::features::{extract_images, FeatureBatch, FeatureKind, PowerTransform};
use crate::linalg::Matrix;
use crate::model::Network;
use crate::xood_l::{build_training_set, CvReport, LDetector};
use crate::xood_m::{Decision, MDetector};

pub const DETECTOR_MAGIC: &[u8; 4] = b"XDET";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    M,
    L,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::M => "m",
            Method::L => "l",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "m" => Ok(Method::M),
            "l" => Ok(Method::L),
            _ => Err(Error::Config(format!("unknown method {s:?} (expected m or l)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    M(MDetector),
    L(LDetector),
}

/// A fitted detector with the feature kind and power transform it expects.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub kind: FeatureKind,
    pub transform: PowerTransform,
    pub model: Model,
}

/// Raw features of the training images the network classifies correctly.
pub fn correct_features(net: &Network, train: &Dataset, kind: FeatureKind) -> Result<Matrix> {
    let labels = train.labels()?;
    let batch = extract_images(net, &train.images, kind)?;
    let keep: Vec<usize> = (0..train.len()).filter(|&i| batch.predictions[i] == labels[i]).collect();
    if keep.is_empty() {
        return Err(Error::contract("the network classifies no training image correctly"));
    }
    Ok(batch.features.select_rows(&keep))
}

/// Fits XOOD-M on correctly classified training images and sets its
/// threshold on the calibration images.
pub fn fit_m(net: &Network, train: &Dataset, calibration: &Dataset, kind: FeatureKind, c: f64) -> Result<Detector> {
    let raw = correct_features(net, train, kind)?;
    let transform = PowerTransform::fit(&raw)?;
    let mut det = MDetector::fit(&transform.apply(&raw)?, c)?;
    let calib = transform.apply(&extract_images(net, &calibration.images, kind)?.features)?;
    det.calibrate(&calib)?;
    Ok(Detector { kind, transform, model: Model::M(det) })
}

/// Fits XOOD-L: power transform and split means from correctly classified
/// training images, logistic regression on calibration plus distorted copies.
pub fn fit_l(
    net: &Network,
    train: &Dataset,
    calibration: &Dataset,
    kind: FeatureKind,
    distortions: &[DistortionKind],
    grid: &[f64],
    seed: u64,
) -> Result<(Detector, CvReport)> {
    let raw = correct_features(net, train, kind)?;
    let transform = PowerTransform::fit(&raw)?;
    let set = build_training_set(net, &transform, kind, calibration, distortions, seed)?;
    let (mut det, report) = LDetector::fit(&set, &transform.apply(&raw)?, grid)?;
    let undistorted: Vec<usize> = (0..set.fold_id.len()).filter(|&i| set.fold_id[i] == 0).collect();
    det.calibrate(&set.features.select_rows(&undistorted))?;
    Ok((Detector { kind, transform, model: Model::L(det) }, report))
}

impl Detector {
    pub fn method(&self) -> Method {
        match self.model {
            Model::M(_) => Method::M,
            Model::L(_) => Method::L,
        }
    }

    pub fn threshold(&self) -> Option<f64> {
        match &self.model {
            Model::M(m) => m.threshold,
            Model::L(l) => l.threshold,
        }
    }

    /// Confidence per row of raw (untransformed) features.
    pub fn score_features(&self, raw: &Matrix) -> Result<Vec<f64>> {
        let x = self.transform.apply(raw)?;
        match &self.model {
            Model::M(m) => m.confidences(&x),
            Model::L(l) => l.scores(&x),
        }
    }

    pub fn score_batch(&self, batch: &FeatureBatch) -> Result<Vec<f64>> {
        self.score_features(&batch.features)
    }

    pub fn score_images(&self, net: &Network, ds: &Dataset) -> Result<Vec<f64>> {
        self.score_batch(&extract_images(net, &ds.images, self.kind)?)
    }

    pub fn decide(&self, raw_row: &[f64]) -> Result<Decision> {
        let x = self.transform.apply_row(raw_row);
        match &self.model {
            Model::M(m) => m.decide(&x),
            Model::L(l) => l.decide(&x),
        }
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut m = Manifest::new();
        m.set("format", "xood-detector");
        m.set("method", self.method());
        m.set("features", self.kind);
        let t = &self.transform;
        m.set("pt.dim", t.dim());
        m.set_floats("pt.lambdas", &t.lambdas);
        m.set_floats("pt.means", &t.means);
        m.set_floats("pt.stds", &t.stds);
        let flagged: Vec<String> = (0..t.dim()).filter(|&j| t.degenerate[j]).map(|j| j.to_string()).collect();
        m.set("pt.degenerate", flagged.join(","));
        let mut c = Container::new(m);
        match &self.model {
            Model::M(d) => d.write(&mut c)?,
            Model::L(d) => d.write(&mut c)?,
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let m = &c.manifest;
        if m.require("format")? != "xood-detector" {
            return Err(Error::format(0, "not a detector file"));
        }
        let kind: FeatureKind = m.require("features")?.parse().map_err(|e: Error| Error::format(0, e.to_string()))?;
        let d: usize = m.parse("pt.dim")?;
        let mut degenerate = vec![false; d];
        for j in m.require("pt.degenerate")?.split(',').filter(|s| !s.is_empty()) {
            let j: usize = j.parse().map_err(|_| Error::format(0, format!("bad degenerate index `{j}`")))?;
            *degenerate.get_mut(j).ok_or_else(|| Error::format(0, format!("degenerate index {j} out of range")))? = true;
        }
        let transform = PowerTransform {
            lambdas: m.parse_floats("pt.lambdas", d)?,
            means: m.parse_floats("pt.means", d)?,
            stds: m.parse_floats("pt.stds", d)?,
            degenerate,
        };
        let method: Method = m.require("method")?.parse().map_err(|e: Error| Error::format(0, e.to_string()))?;
        let model = match method {
            Method::M => Model::M(MDetector::read(c)?),
            Method::L => Model::L(LDetector::read(c)?),
        };
        let det = Self { kind, transform, model };
        let model_dim = match &det.model {
            Model::M(x) => x.dim(),
            Model::L(x) => x.dim(),
        };
        if model_dim != d {
            return Err(Error::format(0, format!("transform has {d} dims, detector {model_dim}")));
        }
        Ok(det)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(self.to_container()?.to_bytes(DETECTOR_MAGIC))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(&Container::from_bytes(bytes, DETECTOR_MAGIC)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path, DETECTOR_MAGIC)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path, DETECTOR_MAGIC)?)
    }
}
