//! The `xood` command-line driver.
//!
//! Each subcommand is a deterministic function of its resolved flags, which it
//! echoes to a JSON manifest next to its main output (`<out>.manifest.json`).
//! A `--config` file of `key=value` lines supplies defaults; command-line
//! flags override it.

use std::ffi::OsString;
use std::fmt::{self, Display};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;
use serde::{Serialize, Serializer};

use xood::data::{fixtures, gen_noise, split, Dataset, NoiseKind};
use xood::distortions::{distort_dataset, DistortionKind};
use xood::features::{extract_images, features_to_csv, FeatureKind, PowerTransform, EXTRACT_CHUNK};
use xood::linalg::Matrix;
use xood::metrics::{self, auroc, detection_accuracy, fpr_at_95tpr, tnr_at_95tpr, ScoredSet, Timing};
use xood::model::{train_reference_cnn, Network, TrainConfig};
use xood::pipeline::{fit_l, fit_m, Detector, Method, Model};
use xood::rng;
use xood::tensor::Tensor;
use xood::xood_l::{LDetector, SplitScaler, DEFAULT_GRID};
use xood::xood_m::{MDetector, DEFAULT_C};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] xood::Error),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 config, 3 data or format, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) | CliError::Io(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Core(e) => match e {
                xood::Error::Config(_) => 2,
                xood::Error::Singular { .. } | xood::Error::Diverged { .. } => 4,
                _ => 3,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn as_display<T: Display, S: Serializer>(v: &T, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_str(v)
}

fn as_display_list<T: Display, S: Serializer>(v: &Option<Vec<T>>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(items) => s.collect_seq(items.iter().map(|i| i.to_string())),
        None => s.serialize_none(),
    }
}

#[derive(Debug, Parser)]
#[command(name = "xood", version, about = "Extreme-value out-of-distribution detection", args_override_self = true)]
pub struct Cli {
    /// File of `key=value` lines used as default flags for the subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Write a synthetic image set (fixtures or noise).
    Gen(GenArgs),
    /// Train the reference CNN.
    Train(TrainArgs),
    /// Extract per-layer activation statistics.
    Extract(ExtractArgs),
    /// Fit the Mahalanobis detector.
    FitM(FitMArgs),
    /// Fit the logistic-regression detector.
    FitL(FitLArgs),
    /// Score a dataset with a detector or the max-softmax baseline.
    Score(ScoreArgs),
    /// Compute OOD metrics from score files.
    Eval(EvalArgs),
    /// Time baseline inference against inference plus detection.
    Bench(BenchArgs),
    /// Apply one distortion to a dataset.
    Distort(DistortArgs),
    /// Export per-layer histograms of ID and OOD statistics.
    Hist(HistArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenKind {
    Glyphs,
    Garments,
    Blobs,
    Uniform,
    Gaussian,
}

#[derive(Debug, Args, Serialize)]
pub struct GenArgs {
    #[arg(long, value_enum)]
    pub kind: GenKind,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Image side for blobs and noise.
    #[arg(long, default_value_t = 28)]
    pub side: usize,
    /// Image file; `.idx` writes IDX, anything else XTEN.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub labels_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct DataArgs {
    /// IDX or XTEN image file.
    #[arg(long)]
    pub images: PathBuf,
    /// IDX, XTEN or text label file.
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

impl DataArgs {
    fn load(&self) -> CliResult<Dataset> {
        Ok(Dataset::load(&self.images, self.labels.as_deref())?)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f32,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fraction held out for detector calibration (never trained on).
    #[arg(long, default_value_t = 0.2)]
    pub calib_fraction: f64,
    /// Fail if the final training accuracy is below this.
    #[arg(long, default_value_t = 0.0)]
    pub min_accuracy: f64,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct ExtractArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "minmax")]
    #[serde(serialize_with = "as_display")]
    pub kind: FeatureKind,
    /// `.xten` writes an `[N, d]` tensor, anything else CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Labelled training set; split into fit and calibration parts unless
    /// `--calib-images` is given.
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub calib_images: Option<PathBuf>,
    #[arg(long)]
    pub calib_labels: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    pub calib_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "minmax")]
    #[serde(serialize_with = "as_display")]
    pub kind: FeatureKind,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct FitMArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: FitArgs,
    /// Diagonal regularization added to the covariance.
    #[arg(long, default_value_t = DEFAULT_C)]
    pub c: f64,
    /// Accepted for config compatibility with fit-l; ignored.
    #[arg(long, value_delimiter = ',')]
    #[serde(serialize_with = "as_display_list")]
    pub distortions: Option<Vec<DistortionKind>>,
}

#[derive(Debug, Args, Serialize)]
pub struct FitLArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: FitArgs,
    /// Comma-separated λ grid for cross-validation.
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    /// Comma-separated distortions (default: all four).
    #[arg(long, value_delimiter = ',')]
    #[serde(serialize_with = "as_display_list")]
    pub distortions: Option<Vec<DistortionKind>>,
    /// Write the held-out loss of every (λ, fold) cell here.
    #[arg(long)]
    pub cv_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ScoreArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long, conflicts_with = "msp", required_unless_present = "msp")]
    pub detector: Option<PathBuf>,
    /// Score with the maximum softmax probability instead of a detector.
    #[arg(long)]
    pub msp: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Score file of the in-distribution test set.
    #[arg(long)]
    pub id: PathBuf,
    /// `name=path` of an OOD score file; repeatable.
    #[arg(long = "ood", required = true, action = clap::ArgAction::Append)]
    pub ood: Vec<String>,
    #[arg(long, default_value = "xood")]
    pub method: String,
    #[arg(long, default_value = "id")]
    pub in_dist: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Append rows to an existing metrics file instead of replacing it.
    #[arg(long)]
    pub append: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub detector_m: Option<PathBuf>,
    #[arg(long)]
    pub detector_l: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub reps: usize,
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    /// Synthetic feature widths for the scaling measurement.
    #[arg(long, value_delimiter = ',', default_values_t = vec![8usize, 16, 32, 64])]
    pub widths: Vec<usize>,
    /// Rows scored per repetition in the scaling measurement.
    #[arg(long, default_value_t = 20_000)]
    pub scaling_rows: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub scaling_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct DistortArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    #[serde(serialize_with = "as_display")]
    pub kind: DistortionKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub labels_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct HistArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub id_images: PathBuf,
    #[arg(long)]
    pub ood_images: PathBuf,
    #[arg(long, default_value = "minmax")]
    #[serde(serialize_with = "as_display")]
    pub kind: FeatureKind,
    #[arg(long, default_value_t = 30)]
    pub bins: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Splices the `--config` file's entries in right after the subcommand name,
/// so that flags given on the command line come later and win.
pub fn expand_config(args: Vec<OsString>) -> CliResult<Vec<OsString>> {
    let mut config = None;
    let mut sub = None;
    let mut i = 1;
    while i < args.len() {
        let a = args[i].to_string_lossy();
        if a == "--config" {
            config = args.get(i + 1).map(PathBuf::from);
            i += 2;
            continue;
        }
        if let Some(p) = a.strip_prefix("--config=") {
            config = Some(PathBuf::from(p));
        } else if sub.is_none() && !a.starts_with('-') {
            sub = Some(i);
        }
        i += 1;
    }
    let (Some(path), Some(sub)) = (config, sub) else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path).map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut extra = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("{}:{}: expected key=value", path.display(), n + 1)))?;
        let (k, v) = (k.trim().replace('_', "-"), v.trim());
        match v {
            "true" => extra.push(OsString::from(format!("--{k}"))),
            "false" => {}
            _ => {
                extra.push(OsString::from(format!("--{k}")));
                extra.push(OsString::from(v));
            }
        }
    }
    let mut out = args[..=sub].to_vec();
    out.extend(extra);
    out.extend_from_slice(&args[sub + 1..]);
    Ok(out)
}

fn log(msg: impl Display) {
    eprintln!("xood: {msg}");
}

#[derive(Serialize)]
struct RunManifest<'a> {
    tool: &'static str,
    version: &'static str,
    #[serde(flatten)]
    command: &'a Command,
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(OsString::from).unwrap_or_else(|| OsString::from("run"));
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn write_manifest(command: &Command, path: &Path) -> CliResult<()> {
    let m = RunManifest { tool: "xood", version: env!("CARGO_PKG_VERSION"), command };
    let text = serde_json::to_string_pretty(&m).map_err(|e| CliError::Data(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn create_parent(path: &Path) -> CliResult<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p)?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> CliResult<()> {
    let manifest = match &cli.command {
        Command::Hist(a) => a.out_dir.join("manifest.json"),
        Command::Gen(GenArgs { out, .. })
        | Command::Train(TrainArgs { out, .. })
        | Command::Extract(ExtractArgs { out, .. })
        | Command::FitM(FitMArgs { common: FitArgs { out, .. }, .. })
        | Command::FitL(FitLArgs { common: FitArgs { out, .. }, .. })
        | Command::Score(ScoreArgs { out, .. })
        | Command::Eval(EvalArgs { out, .. })
        | Command::Bench(BenchArgs { out, .. })
        | Command::Distort(DistortArgs { out, .. }) => manifest_path(out),
    };
    match &cli.command {
        Command::Gen(a) => cmd_gen(a)?,
        Command::Train(a) => cmd_train(a)?,
        Command::Extract(a) => cmd_extract(a)?,
        Command::FitM(a) => cmd_fit_m(a)?,
        Command::FitL(a) => cmd_fit_l(a)?,
        Command::Score(a) => cmd_score(a)?,
        Command::Eval(a) => cmd_eval(a)?,
        Command::Bench(a) => cmd_bench(a)?,
        Command::Distort(a) => cmd_distort(a)?,
        Command::Hist(a) => cmd_hist(a)?,
    }
    write_manifest(&cli.command, &manifest)
}

fn save_dataset(ds: &Dataset, out: &Path, labels_out: Option<&Path>) -> CliResult<()> {
    create_parent(out)?;
    if out.extension().is_some_and(|e| e == "idx") {
        ds.save_idx(out, labels_out)?;
    } else {
        ds.save_xten(out, labels_out)?;
    }
    Ok(())
}

pub fn cmd_gen(a: &GenArgs) -> CliResult<()> {
    if a.count == 0 {
        return Err(CliError::Config("--count must be positive".into()));
    }
    let ds = match a.kind {
        GenKind::Glyphs => fixtures::glyphs(a.count, a.seed),
        GenKind::Garments => fixtures::garments(a.count, a.seed),
        GenKind::Blobs => fixtures::blobs(a.count, a.side, a.seed),
        GenKind::Uniform => gen_noise(NoiseKind::Uniform, a.count, [1, a.side, a.side], a.seed)?,
        GenKind::Gaussian => gen_noise(NoiseKind::Gaussian, a.count, [1, a.side, a.side], a.seed)?,
    };
    save_dataset(&ds, &a.out, a.labels_out.as_deref())?;
    log(format_args!("wrote {} images to {}", ds.len(), a.out.display()));
    Ok(())
}

/// The fit part and the calibration part of a labelled dataset, split the same
/// way by `train` and the `fit-*` commands.
pub fn fit_calib_split(ds: &Dataset, fraction: f64, seed: u64) -> CliResult<(Dataset, Dataset)> {
    let (calib, fit) = split(ds, fraction, seed)?;
    Ok((fit, calib))
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    if a.out.exists() && !a.force {
        return Err(CliError::Config(format!("{} exists; pass --force to overwrite", a.out.display())));
    }
    let ds = a.data.load()?;
    let k = ds.num_classes().ok_or_else(|| CliError::Data("training needs labels".into()))?;
    let (fit, _) = fit_calib_split(&ds, a.calib_fraction, a.seed)?;
    let config = TrainConfig { epochs: a.epochs, lr: a.lr, batch_size: a.batch_size, seed: a.seed };
    let (net, report) = train_reference_cnn(&fit.images, fit.labels()?, k, &config)?;
    for (e, l) in report.epoch_losses.iter().enumerate() {
        log(format_args!("epoch {} loss {l:.5}", e + 1));
    }
    log(format_args!("training accuracy {:.4} on {} images", report.train_accuracy, fit.len()));
    if report.train_accuracy < a.min_accuracy {
        return Err(CliError::Numerical(format!(
            "training accuracy {:.4} is below the floor {}",
            report.train_accuracy, a.min_accuracy
        )));
    }
    create_parent(&a.out)?;
    net.save(&a.out)?;
    Ok(())
}

pub fn cmd_extract(a: &ExtractArgs) -> CliResult<()> {
    let net = Network::load(&a.model)?;
    let ds = a.data.load()?;
    let batch = extract_images(&net, &ds.images, a.kind)?;
    create_parent(&a.out)?;
    if a.out.extension().is_some_and(|e| e == "xten") {
        let m = &batch.features;
        Tensor::new(vec![m.rows(), m.cols()], m.data().iter().map(|&v| v as f32).collect())?.save(&a.out)?;
    } else {
        fs::write(&a.out, features_to_csv(a.kind, &batch.features))?;
    }
    log(format_args!("{} rows × {} {} features", batch.features.rows(), batch.features.cols(), a.kind));
    Ok(())
}

fn fit_inputs(a: &FitArgs) -> CliResult<(Network, Dataset, Dataset)> {
    let net = Network::load(&a.model)?;
    let ds = a.data.load()?;
    ds.labels()?;
    let (fit, calib) = match &a.calib_images {
        Some(p) => (ds, Dataset::load(p, a.calib_labels.as_deref())?),
        None => fit_calib_split(&ds, a.calib_fraction, a.seed)?,
    };
    Ok((net, fit, calib))
}

pub fn cmd_fit_m(a: &FitMArgs) -> CliResult<()> {
    if a.distortions.is_some() {
        log("warning: fit-m ignores --distortions");
    }
    let (net, fit, calib) = fit_inputs(&a.common)?;
    let det = fit_m(&net, &fit, &calib, a.common.kind, a.c)?;
    create_parent(&a.common.out)?;
    det.save(&a.common.out)?;
    log(format_args!("XOOD-M fitted, threshold {:?}", det.threshold()));
    Ok(())
}

pub fn cmd_fit_l(a: &FitLArgs) -> CliResult<()> {
    let (net, fit, calib) = fit_inputs(&a.common)?;
    calib.labels().map_err(|_| CliError::Data("calibration set needs labels".into()))?;
    let grid = a.grid.clone().unwrap_or_else(|| DEFAULT_GRID.to_vec());
    let distortions = a.distortions.clone().unwrap_or_else(|| DistortionKind::ALL.to_vec());
    let (det, report) = fit_l(&net, &fit, &calib, a.common.kind, &distortions, &grid, a.common.seed)?;
    for (lambda, loss) in report.grid.iter().zip(&report.mean_losses) {
        log(format_args!("λ {lambda:e} mean held-out loss {loss:.6}"));
    }
    log(format_args!("selected λ {:e}", report.selected));
    create_parent(&a.common.out)?;
    det.save(&a.common.out)?;
    if let Some(p) = &a.cv_out {
        create_parent(p)?;
        fs::write(p, report.to_csv())?;
    }
    Ok(())
}

pub fn cmd_score(a: &ScoreArgs) -> CliResult<()> {
    let net = Network::load(&a.model)?;
    let ds = a.data.load()?;
    let (scores, threshold) = match &a.detector {
        Some(p) => {
            let det = Detector::load(p)?;
            (det.score_images(&net, &ds)?, det.threshold())
        }
        None => (msp_scores(&net, &ds.images)?, None),
    };
    let mut csv = String::from("index,score,decision\n");
    for (i, s) in scores.iter().enumerate() {
        let decision = match threshold {
            Some(t) if *s > t => "in",
            Some(_) => "out",
            None => "",
        };
        csv.push_str(&format!("{i},{s:?},{decision}\n"));
    }
    create_parent(&a.out)?;
    fs::write(&a.out, csv)?;
    log(format_args!("scored {} images", scores.len()));
    Ok(())
}

/// Max-softmax confidences, computed in the same chunks as feature extraction.
pub fn msp_scores(net: &Network, images: &Tensor) -> CliResult<Vec<f64>> {
    let mut out = Vec::with_capacity(images.batch());
    for start in (0..images.batch()).step_by(EXTRACT_CHUNK) {
        let idx: Vec<usize> = (start..(start + EXTRACT_CHUNK).min(images.batch())).collect();
        out.extend(metrics::msp_baseline(&net.predict(&images.select(&idx)?)?.probabilities)?);
    }
    Ok(out)
}

/// Reads the `score` column of a score CSV.
pub fn read_scores(path: &Path) -> CliResult<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| CliError::Data(format!("{} is empty", path.display())))?;
    let col = header
        .split(',')
        .position(|h| h.trim() == "score")
        .ok_or_else(|| CliError::Data(format!("{} has no `score` column", path.display())))?;
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.split(',')
                .nth(col)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .ok_or_else(|| CliError::Data(format!("{}:{}: bad score", path.display(), n + 2)))
        })
        .collect()
}

pub const METRICS_HEADER: &str = "in_dist,out_dist,method,auroc,tnr95,det_acc,fpr95";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub out_dist: String,
    pub auroc: f64,
    pub tnr95: f64,
    pub det_acc: f64,
    pub fpr95: f64,
}

pub fn metric_row(out_dist: &str, id: &[f64], ood: &[f64]) -> CliResult<MetricRow> {
    let s = ScoredSet::from_parts(id, ood)?;
    Ok(MetricRow {
        out_dist: out_dist.to_string(),
        auroc: auroc(&s)?,
        tnr95: tnr_at_95tpr(&s)?,
        det_acc: detection_accuracy(&s)?,
        fpr95: fpr_at_95tpr(&s)?,
    })
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let id = read_scores(&a.id)?;
    let mut rows = Vec::new();
    for entry in &a.ood {
        let (name, path) =
            entry.split_once('=').ok_or_else(|| CliError::Config(format!("--ood expects name=path, got {entry:?}")))?;
        rows.push(metric_row(name, &id, &read_scores(Path::new(path))?)?);
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let average = MetricRow {
        out_dist: "average".into(),
        auroc: mean(|r| r.auroc),
        tnr95: mean(|r| r.tnr95),
        det_acc: mean(|r| r.det_acc),
        fpr95: mean(|r| r.fpr95),
    };
    let mut csv = String::new();
    if !(a.append && a.out.exists()) {
        csv.push_str(METRICS_HEADER);
        csv.push('\n');
    }
    for r in rows.iter().chain(std::iter::once(&average)) {
        csv.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
            a.in_dist, r.out_dist, a.method, r.auroc, r.tnr95, r.det_acc, r.fpr95
        ));
        log(format_args!("{} vs {}: AUROC {:.4} TNR@95TPR {:.4}", a.method, r.out_dist, r.auroc, r.tnr95));
    }
    create_parent(&a.out)?;
    if a.append {
        use std::io::Write;
        fs::OpenOptions::new().create(true).append(true).open(&a.out)?.write_all(csv.as_bytes())?;
    } else {
        fs::write(&a.out, csv)?;
    }
    Ok(())
}

/// A detector of raw width `width` with arbitrary but fixed parameters, for timing.
pub fn synthetic_detector(method: Method, width: usize, seed: u64) -> CliResult<Detector> {
    let mut r = rng::item_stream(rng::derive_seed(seed, "bench/synthetic"), width);
    let transform = PowerTransform {
        lambdas: (0..width).map(|_| 0.5 + r.gen::<f64>()).collect(),
        means: vec![0.0; width],
        stds: vec![1.0; width],
        degenerate: vec![false; width],
    };
    let model = match method {
        Method::M => {
            let rows: Vec<Vec<f64>> = (0..width + 8).map(|_| (0..width).map(|_| r.gen::<f64>() - 0.5).collect()).collect();
            Model::M(MDetector::fit(&Matrix::from_rows(&rows)?, DEFAULT_C)?)
        }
        Method::L => Model::L(LDetector {
            scaler: SplitScaler {
                means: (0..width).map(|_| r.gen::<f64>()).collect(),
                scale_means: (0..2 * width).map(|_| r.gen::<f64>()).collect(),
                scale_stds: (0..2 * width).map(|_| 0.5 + r.gen::<f64>()).collect(),
                degenerate: vec![false; 2 * width],
            },
            weights: (0..=2 * width).map(|_| r.gen::<f64>() - 0.5).collect(),
            lambda: 1.0,
            threshold: None,
        }),
    };
    Ok(Detector { kind: FeatureKind::MinMax, transform, model })
}

/// Coefficient of determination of the least-squares line through `(x, y)`.
pub fn r_squared(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if syy == 0.0 {
        return 1.0;
    }
    sxy * sxy / (sxx * syy)
}

/// Times several configurations with their repetitions interleaved, so slow
/// drift in machine load affects them all alike.
pub fn time_interleaved(
    warmup: usize,
    reps: usize,
    runs: &mut [&mut dyn FnMut() -> CliResult<()>],
) -> CliResult<Vec<Timing>> {
    if reps == 0 {
        return Err(CliError::Config("--reps must be positive".into()));
    }
    for _ in 0..warmup {
        for f in runs.iter_mut() {
            f()?;
        }
    }
    let mut samples = vec![Vec::with_capacity(reps); runs.len()];
    for _ in 0..reps {
        for (f, s) in runs.iter_mut().zip(&mut samples) {
            let start = Instant::now();
            f()?;
            s.push(start.elapsed().as_secs_f64());
        }
    }
    Ok(samples.into_iter().map(Timing::from_samples).collect())
}

/// Untapped forward pass over `images`, in feature-extraction chunks.
pub fn baseline_forward(net: &Network, images: &Tensor) -> CliResult<()> {
    for start in (0..images.batch()).step_by(EXTRACT_CHUNK) {
        let idx: Vec<usize> = (start..(start + EXTRACT_CHUNK).min(images.batch())).collect();
        net.predict(&images.select(&idx)?)?;
    }
    Ok(())
}

pub fn cmd_bench(a: &BenchArgs) -> CliResult<()> {
    let net = Network::load(&a.model)?;
    let images = Dataset::load(&a.images, None)?.images;
    let mut configs = vec![("baseline".to_string(), None)];
    for (name, path) in [("xood-m", &a.detector_m), ("xood-l", &a.detector_l)] {
        if let Some(p) = path {
            configs.push((name.to_string(), Some(Detector::load(p)?)));
        }
    }
    let mut closures: Vec<Box<dyn FnMut() -> CliResult<()>>> = configs
        .iter()
        .map(|(_, det)| -> Box<dyn FnMut() -> CliResult<()>> {
            match det {
                None => Box::new(|| baseline_forward(&net, &images)),
                Some(det) => Box::new(|| {
                    det.score_batch(&extract_images(&net, &images, det.kind)?)?;
                    Ok(())
                }),
            }
        })
        .collect();
    let mut runs: Vec<&mut dyn FnMut() -> CliResult<()>> = closures.iter_mut().map(|c| &mut **c as _).collect();
    let timings = time_interleaved(a.warmup, a.reps, &mut runs)?;
    let base = timings[0].mean;
    let mut csv = String::from("config,mean_s,ci99_s,overhead\n");
    for ((name, _), t) in configs.iter().zip(&timings) {
        let overhead = metrics::overhead(t.mean, base)?;
        csv += &format!("{name},{:e},{:e},{overhead:.6}\n", t.mean, t.ci99);
        log(format_args!("{name} {:.4}s ± {:.4}s, overhead {:.2}%", t.mean, t.ci99, 100.0 * overhead));
    }
    create_parent(&a.out)?;
    fs::write(&a.out, csv)?;

    if let Some(path) = &a.scaling_out {
        let mut csv = String::from("width,method,mean_s,ci99_s\n");
        for method in [Method::M, Method::L] {
            let mut means = Vec::new();
            for &w in &a.widths {
                let det = synthetic_detector(method, w, a.seed)?;
                let mut r = rng::item_stream(rng::derive_seed(a.seed, "bench/rows"), w);
                let rows = Matrix::new(a.scaling_rows, w, (0..a.scaling_rows * w).map(|_| r.gen::<f64>() * 4.0 - 2.0).collect())?;
                let t = &time_interleaved(a.warmup, a.reps, &mut [&mut || Ok(det.score_features(&rows).map(drop)?)])?[0];
                csv += &format!("{w},{method},{:e},{:e}\n", t.mean, t.ci99);
                means.push(t.mean);
            }
            let widths: Vec<f64> = a.widths.iter().map(|&w| w as f64).collect();
            log(format_args!("xood-{method} scoring time vs width: R² = {:.4}", r_squared(&widths, &means)));
        }
        create_parent(path)?;
        fs::write(path, csv)?;
    }
    Ok(())
}

pub fn cmd_distort(a: &DistortArgs) -> CliResult<()> {
    let ds = a.data.load()?;
    let out = distort_dataset(&ds, a.kind, a.seed)?;
    save_dataset(&out, &a.out, a.labels_out.as_deref())?;
    log(format_args!("{} {} images", a.kind, out.len()));
    Ok(())
}

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// Fraction of `ood` outside the `[1st, 99th]` percentile band of `id`.
pub fn outside_band(id: &[f64], ood: &[f64]) -> f64 {
    let mut s = id.to_vec();
    s.sort_by(f64::total_cmp);
    let (lo, hi) = (percentile(&s, 1.0), percentile(&s, 99.0));
    ood.iter().filter(|&&v| v < lo || v > hi).count() as f64 / ood.len() as f64
}

pub const HIST_HEADER: &str = "set,statistic,bin_left,bin_right,count";

pub fn cmd_hist(a: &HistArgs) -> CliResult<()> {
    let net = Network::load(&a.model)?;
    let id = extract_images(&net, &Dataset::load(&a.id_images, None)?.images, a.kind)?.features;
    let ood = extract_images(&net, &Dataset::load(&a.ood_images, None)?.images, a.kind)?.features;
    let per = a.kind.per_layer();
    let r = id.cols() / per;
    let names = a.kind.column_names(r);
    fs::create_dir_all(&a.out_dir)?;
    let mut summary = String::from("layer,statistic,ood_outside_id_band\n");
    for layer in 0..r {
        let mut csv = String::from(HIST_HEADER);
        csv.push('\n');
        for s in 0..per {
            let j = layer * per + s;
            let stat = names[j].split_once('_').map_or(names[j].as_str(), |(_, s)| s);
            let (ci, co) = (id.column(j), ood.column(j));
            let lo = ci.iter().chain(&co).copied().fold(f64::INFINITY, f64::min);
            let hi = ci.iter().chain(&co).copied().fold(f64::NEG_INFINITY, f64::max);
            for (set, values) in [("id", &ci), ("ood", &co)] {
                let h = metrics::histogram_in(values, a.bins, Some((lo, hi)))?;
                for (b, c) in h.counts.iter().enumerate() {
                    csv += &format!("{set},{stat},{:?},{:?},{c}\n", h.edges[b], h.edges[b + 1]);
                }
            }
            let frac = outside_band(&ci, &co);
            summary += &format!("{},{stat},{frac:.6}\n", layer + 1);
            log(format_args!("layer {} {stat}: {:.1}% of OOD outside the ID 1–99% band", layer + 1, 100.0 * frac));
        }
        fs::write(a.out_dir.join(format!("layer{}.csv", layer + 1)), csv)?;
    }
    fs::write(a.out_dir.join("summary.csv"), summary)?;
    Ok(())
}

/// Parses and runs; returns the process exit code.
pub fn main_with_args(args: Vec<OsString>) -> i32 {
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            log(&e);
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            log(format_args!("error: {e}"));
            e.exit_code()
        }
    }
}

impl fmt::Display for GenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.to_possible_value().expect("no skipped variants").get_name())
    }
}
