//! Threshold-free OOD evaluation metrics, the max-softmax baseline score,
//! inference overhead and histogram export.
//!
//! Scores are confidences: higher means "more in-distribution". ID is the
//! positive class throughout.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scores of in-distribution and out-of-distribution items.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub is_id: Vec<bool>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, is_id: Vec<bool>) -> Result<Self> {
        if scores.len() != is_id.len() {
            return Err(Error::contract(format!("{} scores for {} labels", scores.len(), is_id.len())));
        }
        if let Some(i) = scores.iter().position(|s| s.is_nan()) {
            return Err(Error::contract(format!("score {i} is NaN")));
        }
        Ok(Self { scores, is_id })
    }

    pub fn from_parts(id: &[f64], ood: &[f64]) -> Result<Self> {
        let scores = id.iter().chain(ood).copied().collect();
        let is_id = std::iter::repeat_n(true, id.len()).chain(std::iter::repeat_n(false, ood.len())).collect();
        Self::new(scores, is_id)
    }

    pub fn id_scores(&self) -> Vec<f64> {
        self.scores.iter().zip(&self.is_id).filter(|(_, &b)| b).map(|(&s, _)| s).collect()
    }

    pub fn ood_scores(&self) -> Vec<f64> {
        self.scores.iter().zip(&self.is_id).filter(|(_, &b)| !b).map(|(&s, _)| s).collect()
    }

    fn counts(&self) -> Result<(usize, usize)> {
        let n_id = self.is_id.iter().filter(|&&b| b).count();
        let n_ood = self.is_id.len() - n_id;
        if n_id == 0 || n_ood == 0 {
            return Err(Error::contract("metrics need at least one ID and one OOD score"));
        }
        Ok((n_id, n_ood))
    }

    /// Swaps the roles of ID and OOD.
    pub fn swapped(&self) -> Self {
        Self { scores: self.scores.clone(), is_id: self.is_id.iter().map(|b| !b).collect() }
    }
}

/// Area under the ROC curve via the Mann-Whitney rank statistic with midranks
/// for ties (a tied ID/OOD pair counts ½).
pub fn auroc(s: &ScoredSet) -> Result<f64> {
    let (n_id, n_ood) = s.counts()?;
    let mut order: Vec<usize> = (0..s.scores.len()).collect();
    order.sort_by(|&a, &b| s.scores[a].total_cmp(&s.scores[b]));
    let mut id_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && s.scores[order[j + 1]] == s.scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their mean.
        let midrank = (i + j + 2) as f64 / 2.0;
        let ids = order[i..=j].iter().filter(|&&k| s.is_id[k]).count();
        id_rank_sum += midrank * ids as f64;
        i = j + 1;
    }
    let u = id_rank_sum - (n_id * (n_id + 1)) as f64 / 2.0;
    Ok(u / (n_id as f64 * n_ood as f64))
}

/// Number of lowest ID scores that fall at or below the cutoff for a target TPR:
/// `ceil((1 − tpr)·n)`, at least 1.
fn rejected_count(n: usize, tpr: f64) -> usize {
    if tpr == 0.95 {
        // Integer form avoids 0.05·n landing a hair above an integer.
        return ((5 * n).div_ceil(100)).max(1);
    }
    (((1.0 - tpr) * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
}

/// Cutoff `t` such that accepting `score > t` keeps a `tpr` fraction of `scores`
/// (lower order statistic `⌈(1−tpr)·n⌉`, 1-based).
pub fn tpr_threshold(scores: &[f64], tpr: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::contract("threshold calibration needs at least one score"));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[rejected_count(sorted.len(), tpr) - 1])
}

/// TNR at 95% TPR: `T` is the largest value with `P(score ≥ T | ID) ≥ 0.95`,
/// and an OOD item counts as detected when its score is `< T`.
pub fn tnr_at_95tpr(s: &ScoredSet) -> Result<f64> {
    let (n_id, n_ood) = s.counts()?;
    if n_id < 20 {
        return Err(Error::contract(format!("TNR@95TPR needs at least 20 ID scores, got {n_id}")));
    }
    let mut id = s.id_scores();
    id.sort_by(f64::total_cmp);
    let keep = (95 * n_id).div_ceil(100);
    let t = id[n_id - keep];
    let detected = s.ood_scores().iter().filter(|&&v| v < t).count();
    Ok(detected as f64 / n_ood as f64)
}

pub fn fpr_at_95tpr(s: &ScoredSet) -> Result<f64> {
    Ok(1.0 - tnr_at_95tpr(s)?)
}

/// `max_T (P(score > T | ID) + P(score ≤ T | OOD)) / 2` over every distinct
/// threshold position, including `T = −∞`.
pub fn detection_accuracy(s: &ScoredSet) -> Result<f64> {
    let (n_id, n_ood) = s.counts()?;
    let mut order: Vec<usize> = (0..s.scores.len()).collect();
    order.sort_by(|&a, &b| s.scores[a].total_cmp(&s.scores[b]));
    let acc = |id_above: usize, ood_below: usize| (id_above as f64 / n_id as f64 + ood_below as f64 / n_ood as f64) / 2.0;
    let mut id_above = n_id;
    let mut ood_below = 0;
    let mut best = acc(id_above, ood_below);
    let mut i = 0;
    while i < order.len() {
        let v = s.scores[order[i]];
        while i < order.len() && s.scores[order[i]] == v {
            if s.is_id[order[i]] {
                id_above -= 1;
            } else {
                ood_below += 1;
            }
            i += 1;
        }
        best = best.max(acc(id_above, ood_below));
    }
    Ok(best)
}

/// Max-softmax-probability confidence per row.
pub fn msp_baseline(probabilities: &Tensor) -> Result<Vec<f64>> {
    if probabilities.ndim() != 2 {
        return Err(Error::dim("msp", format!("expected [N, K], got {:?}", probabilities.shape())));
    }
    let k = probabilities.shape()[1];
    probabilities
        .data()
        .chunks_exact(k)
        .enumerate()
        .map(|(i, row)| {
            let total: f64 = row.iter().map(|&v| f64::from(v)).sum();
            if (total - 1.0).abs() > 1e-4 {
                return Err(Error::contract(format!("row {i} sums to {total}, not 1")));
            }
            Ok(f64::from(row.iter().copied().fold(f32::NEG_INFINITY, f32::max)))
        })
        .collect()
}

/// Relative inference cost `(T − T_B) / T_B`.
pub fn overhead(t_method: f64, t_baseline: f64) -> Result<f64> {
    if !(t_baseline > 0.0) {
        return Err(Error::contract(format!("baseline time {t_baseline} must be positive")));
    }
    Ok((t_method - t_baseline) / t_baseline)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `bins + 1` edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_left,bin_right,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            s.push_str(&format!("{:?},{:?},{c}\n", self.edges[i], self.edges[i + 1]));
        }
        s
    }
}

/// Equal-width bins over `[min, max]`; the maximum lands in the last bin.
pub fn histogram(values: &[f64], bins: usize) -> Result<Histogram> {
    histogram_in(values, bins, None)
}

/// Like [`histogram`], but over an explicit range. Values outside it are clamped into the end bins.
pub fn histogram_in(values: &[f64], bins: usize, range: Option<(f64, f64)>) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::contract("histogram needs at least one bin"));
    }
    if values.is_empty() && range.is_none() {
        return Err(Error::contract("histogram of no values needs an explicit range"));
    }
    let (lo, hi) = range.unwrap_or_else(|| {
        values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    });
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect();
    let mut counts = vec![0; bins];
    for &v in values {
        let b = if width > 0.0 { ((v - lo) / width).floor().clamp(0.0, (bins - 1) as f64) as usize } else { 0 };
        counts[b] += 1;
    }
    Ok(Histogram { edges, counts })
}

/// Wall-clock timing summary over repeated runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Timing {
    pub samples: Vec<f64>,
    pub mean: f64,
    /// Half-width of the 99% normal-approximation confidence interval of the mean.
    pub ci99: f64,
}

const Z_99: f64 = 2.575_829_303_548_901;

/// Runs `f` `warmup` times untimed, then `reps` times timed.
pub fn time_runs(warmup: usize, reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<Timing> {
    if reps == 0 {
        return Err(Error::Config("timing needs at least one repetition".into()));
    }
    for _ in 0..warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        f()?;
        samples.push(start.elapsed().as_secs_f64());
    }
    Ok(Timing::from_samples(samples))
}

impl Timing {
    /// Mean and 99% normal-approximation half-width of the given durations.
    pub fn from_samples(samples: Vec<f64>) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let sd = if samples.len() > 1 {
            (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Timing { ci99: Z_99 * sd / n.sqrt(), samples, mean }
    }
}
