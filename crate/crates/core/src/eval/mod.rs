//! Downstream evaluation: linear probe, clustering indices, turning-point
//! regression and the combined report.

mod metrics;

pub use metrics::{
    average_precision, davies_bouldin, kmeans, macro_auprc, silhouette, turning_point_score,
    turning_points, KMeans,
};

use std::fmt::Write as _;
use std::io::{Read, Write};

use rand::Rng;

use crate::linalg::{cholesky, cholesky_solve};
use crate::ndtensor::{Adam, AdamConfig, Graph, Tensor, TensorError};
use crate::nets::ClassifierHead;
use crate::rng::{stream, Stream};
use crate::signals::{majority_labels, make_windows, MultivariateSeries, SignalsError, N_STATES};
use crate::stationarity::{ols, StationarityError};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("degenerate task: {0}")]
    Degenerate(String),
    #[error("undefined score: {0}")]
    Undefined(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Signals(#[from] SignalsError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Per-window representations of one series.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationSet {
    /// `N × M` local (or TNC) representations.
    pub z: Vec<Vec<f64>>,
    /// Optional `N × m` global representations.
    pub z_g: Option<Vec<Vec<f64>>>,
    pub starts: Vec<usize>,
    /// `tnc` or `dlg`.
    pub source: String,
}

impl RepresentationSet {
    pub fn new(
        z: Vec<Vec<f64>>,
        z_g: Option<Vec<Vec<f64>>>,
        starts: Vec<usize>,
        source: &str,
    ) -> Result<Self> {
        let n = z.len();
        if n == 0 || starts.len() != n || z_g.as_ref().is_some_and(|g| g.len() != n) {
            return Err(EvalError::Parameter(
                "representation rows, global rows and starts must agree".into(),
            ));
        }
        let width = z[0].len();
        if z.iter().any(|r| r.len() != width) || z.iter().flatten().any(|v| !v.is_finite()) {
            return Err(EvalError::Parameter(
                "representations must be finite with a common width".into(),
            ));
        }
        Ok(Self {
            z,
            z_g,
            starts,
            source: source.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    /// CSV with columns `window,start,z0..`, then `g0..` when global codes
    /// are present, and a leading comment line naming the source.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e: std::io::Error| EvalError::Format(e.to_string());
        writeln!(w, "# source={}", self.source).map_err(io)?;
        let mut header = vec!["window".to_string(), "start".to_string()];
        header.extend((0..self.z[0].len()).map(|i| format!("z{i}")));
        if let Some(g) = &self.z_g {
            header.extend((0..g[0].len()).map(|i| format!("g{i}")));
        }
        writeln!(w, "{}", header.join(",")).map_err(io)?;
        for i in 0..self.len() {
            let mut row = vec![i.to_string(), self.starts[i].to_string()];
            row.extend(self.z[i].iter().map(|v| format!("{v}")));
            if let Some(g) = &self.z_g {
                row.extend(g[i].iter().map(|v| format!("{v}")));
            }
            writeln!(w, "{}", row.join(",")).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(mut r: R) -> Result<Self> {
        let mut text = String::new();
        r.read_to_string(&mut text)
            .map_err(|e| EvalError::Format(e.to_string()))?;
        let mut lines = text.lines();
        let source = lines
            .next()
            .and_then(|l| l.strip_prefix("# source="))
            .ok_or_else(|| EvalError::Format("missing `# source=` line".into()))?
            .to_string();
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| EvalError::Format("missing header".into()))?
            .split(',')
            .collect();
        let nz = header.iter().filter(|h| h.starts_with('z')).count();
        let ng = header.iter().filter(|h| h.starts_with('g')).count();
        if nz == 0 || header.len() != 2 + nz + ng {
            return Err(EvalError::Format("unexpected representation header".into()));
        }
        let (mut z, mut zg, mut starts) = (Vec::new(), Vec::new(), Vec::new());
        for (i, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != header.len() {
                return Err(EvalError::Format(format!(
                    "line {}: {} cells",
                    i + 3,
                    cells.len()
                )));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| EvalError::Format(format!("line {}: `{s}`: {e}", i + 3)))
            };
            starts.push(
                cells[1]
                    .parse::<usize>()
                    .map_err(|e| EvalError::Format(format!("line {}: {e}", i + 3)))?,
            );
            z.push(
                cells[2..2 + nz]
                    .iter()
                    .map(|s| num(s))
                    .collect::<Result<Vec<_>>>()?,
            );
            if ng > 0 {
                zg.push(
                    cells[2 + nz..]
                        .iter()
                        .map(|s| num(s))
                        .collect::<Result<Vec<_>>>()?,
                );
            }
        }
        Self::new(z, (ng > 0).then_some(zg), starts, &source)
    }
}

fn standardize(train: &[Vec<f64>], all: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = train[0].len();
    let n = train.len() as f64;
    let mean: Vec<f64> = (0..d)
        .map(|j| train.iter().map(|r| r[j]).sum::<f64>() / n)
        .collect();
    let sd: Vec<f64> = (0..d)
        .map(|j| {
            let v = train.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if v > 0.0 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    all.iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .map(|(j, &v)| (v - mean[j]) / sd[j])
                .collect()
        })
        .collect()
}

/// Settings of the classification probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub train_fraction: f64,
    pub epochs: usize,
    pub lr: f64,
    pub dropout: f64,
    pub n_classes: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            epochs: 300,
            lr: 0.01,
            dropout: 0.5,
            n_classes: N_STATES,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeResult {
    /// Held-out accuracy as a fraction.
    pub accuracy: f64,
    pub auprc: f64,
    /// Share of the most frequent class among held-out labels.
    pub majority_baseline: f64,
}

/// Trains a dropout + linear head on the first `train_fraction` of the
/// (standardized) representations with full-batch Adam and scores the rest.
pub fn linear_probe(reps: &[Vec<f64>], labels: &[u8], cfg: &ProbeConfig) -> Result<ProbeResult> {
    let n = reps.len();
    if n != labels.len() || n < 2 {
        return Err(EvalError::Parameter(format!(
            "{n} representations for {} labels",
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l as usize >= cfg.n_classes) {
        return Err(EvalError::Parameter(format!(
            "label {l} outside 0..{}",
            cfg.n_classes
        )));
    }
    let n_train = ((n as f64 * cfg.train_fraction).floor() as usize).clamp(1, n - 1);
    let train_labels = &labels[..n_train];
    if train_labels.iter().all(|&l| l == train_labels[0]) {
        return Err(EvalError::Degenerate(
            "training split has a single class".into(),
        ));
    }
    let x = standardize(&reps[..n_train], reps);
    let d = x[0].len();

    let mut g = Graph::<f64>::new();
    let mut init = stream(cfg.seed, Stream::Probe);
    let head = ClassifierHead::new(&mut g, "probe", d, cfg.n_classes, cfg.dropout, &mut init)?;
    let params = head.params();
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut drop_rng = stream(cfg.seed, Stream::Dropout);
    for _ in 0..cfg.epochs {
        g.zero_grad();
        let mut nll = Vec::with_capacity(n_train);
        for (row, &y) in x[..n_train].iter().zip(train_labels) {
            let z = g.constant(Tensor::vector(row.clone()));
            let s = head.forward(&mut g, z, Some(&mut drop_rng))?;
            let lp = g.log_softmax(s)?;
            nll.push(g.slice(lp, y as usize, 1)?);
        }
        let c = g.concat(&nll)?;
        let m = g.mean(c);
        let loss = g.neg(m);
        g.backward(loss)?;
        g.reset();
        adam.step(&mut g, &params)?;
    }

    let mut probs = Vec::with_capacity(n - n_train);
    let mut correct = 0;
    let mut counts = vec![0usize; cfg.n_classes];
    for (row, &y) in x[n_train..].iter().zip(&labels[n_train..]) {
        let z = g.constant(Tensor::vector(row.clone()));
        let s = head.forward::<f64, rand_chacha::ChaCha8Rng>(&mut g, z, None)?;
        let lp = g.log_softmax(s)?;
        let p: Vec<f64> = g.value(lp).data().iter().map(|v| v.exp()).collect();
        g.reset();
        let mut pred = 0;
        for c in 1..p.len() {
            if p[c] > p[pred] {
                pred = c;
            }
        }
        if pred == y as usize {
            correct += 1;
        }
        counts[y as usize] += 1;
        probs.push(p);
    }
    let n_test = (n - n_train) as f64;
    let ys: Vec<usize> = labels[n_train..].iter().map(|&l| l as usize).collect();
    Ok(ProbeResult {
        accuracy: correct as f64 / n_test,
        auprc: macro_auprc(&probs, &ys)?,
        majority_baseline: *counts.iter().max().unwrap_or(&0) as f64 / n_test,
    })
}

/// Per-window turning-point intensity summed over features; padding is
/// excluded.
pub fn turning_point_summary(series: &MultivariateSeries, window: usize) -> Result<Vec<f64>> {
    let batch = make_windows(series, window)?;
    Ok(batch
        .windows
        .iter()
        .map(|w| {
            (0..batch.n_features)
                .map(|f| turning_point_score(&w.row(f, window)[..w.valid_len]))
                .sum()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionResult {
    /// Held-out coefficient of determination.
    pub r2: f64,
    /// Held-out mean squared error.
    pub mse: f64,
    pub train_r2: f64,
    pub ridge_fallback: bool,
}

fn design(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter()
        .flat_map(|r| std::iter::once(1.0).chain(r.iter().copied()))
        .collect()
}

fn ridge(x: &[f64], n: usize, k: usize, y: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let mut a = vec![0.0; k * k];
    let mut b = vec![0.0; k];
    for i in 0..n {
        let row = &x[i * k..(i + 1) * k];
        for p in 0..k {
            b[p] += row[p] * y[i];
            for q in 0..k {
                a[p * k + q] += row[p] * row[q];
            }
        }
    }
    for p in 0..k {
        a[p * k + p] += lambda;
    }
    let l = cholesky(&a, k)
        .ok_or_else(|| EvalError::Degenerate("ridge system not positive definite".into()))?;
    Ok(cholesky_solve(&l, k, &b))
}

fn r2_mse(x: &[f64], k: usize, y: &[f64], beta: &[f64]) -> (f64, f64) {
    let n = y.len();
    let mean = y.iter().sum::<f64>() / n as f64;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for i in 0..n {
        let fit: f64 = x[i * k..(i + 1) * k]
            .iter()
            .zip(beta)
            .map(|(a, b)| a * b)
            .sum();
        ss_res += (y[i] - fit).powi(2);
        ss_tot += (y[i] - mean).powi(2);
    }
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else {
        f64::NAN
    };
    (r2, ss_res / n as f64)
}

/// OLS of `target` on the representations with an intercept, fitted on the
/// first `train_fraction` of windows and scored on the rest. A singular
/// design falls back to ridge with `λ = 1e-6`.
pub fn linear_regression_probe(
    reps: &[Vec<f64>],
    target: &[f64],
    train_fraction: f64,
) -> Result<RegressionResult> {
    let n = reps.len();
    if n != target.len() {
        return Err(EvalError::Parameter(format!(
            "{n} representations for {} targets",
            target.len()
        )));
    }
    if n < 10 {
        return Err(EvalError::Parameter(format!(
            "regression probe needs at least 10 windows, got {n}"
        )));
    }
    let lo = target.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = target.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Err(EvalError::Degenerate("target has zero variance".into()));
    }
    let n_train = ((n as f64 * train_fraction).floor() as usize).clamp(2, n - 1);
    let k = reps[0].len() + 1;
    let x_train = design(&reps[..n_train]);
    let x_test = design(&reps[n_train..]);
    let (beta, ridge_fallback) = match ols(&x_train, n_train, k, &target[..n_train]) {
        Ok(fit) => (fit.coefficients, false),
        Err(StationarityError::Singular) | Err(StationarityError::SampleSize { .. }) => {
            log::warn!("regression probe: singular design, using ridge fallback");
            (ridge(&x_train, n_train, k, &target[..n_train], 1e-6)?, true)
        }
        Err(e) => return Err(EvalError::Degenerate(e.to_string())),
    };
    let (train_r2, _) = r2_mse(&x_train, k, &target[..n_train], &beta);
    let (r2, mse) = r2_mse(&x_test, k, &target[n_train..], &beta);
    Ok(RegressionResult {
        r2,
        mse,
        train_r2,
        ridge_fallback,
    })
}

/// Column names of the report, in order.
pub const REPORT_HEADER: [&str; 8] = [
    "Model",
    "W_t",
    "AUPRC",
    "Accuracy",
    "Silhouette",
    "DBI",
    "R2",
    "Loss",
];

/// One report row; `None` marks a failed cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub window: usize,
    pub auprc: Option<f64>,
    /// Percent, as in the published table.
    pub accuracy: Option<f64>,
    pub silhouette: Option<f64>,
    pub dbi: Option<f64>,
    pub r2: Option<f64>,
    pub loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v}"))
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut s = REPORT_HEADER.join(",");
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.model,
                r.window,
                cell(r.auprc),
                cell(r.accuracy),
                cell(r.silhouette),
                cell(r.dbi),
                cell(r.r2),
                cell(r.loss)
            );
        }
        s
    }

    /// Parses [`Report::to_csv`] output; `NA` cells become `None`.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines
            .next()
            .map(|l| l.split(',').collect())
            .unwrap_or_default();
        if header != REPORT_HEADER {
            return Err(EvalError::Format(format!(
                "report header {header:?}, expected {REPORT_HEADER:?}"
            )));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let c: Vec<&str> = line.split(',').collect();
            if c.len() != REPORT_HEADER.len() {
                return Err(EvalError::Format(format!(
                    "report line {}: {} cells",
                    i + 2,
                    c.len()
                )));
            }
            let num = |s: &str| -> Result<Option<f64>> {
                if s == "NA" {
                    return Ok(None);
                }
                s.parse()
                    .map(Some)
                    .map_err(|e| EvalError::Format(format!("report line {}: `{s}`: {e}", i + 2)))
            };
            rows.push(ReportRow {
                model: c[0].to_string(),
                window: c[1]
                    .parse()
                    .map_err(|e| EvalError::Format(format!("report line {}: {e}", i + 2)))?,
                auprc: num(c[2])?,
                accuracy: num(c[3])?,
                silhouette: num(c[4])?,
                dbi: num(c[5])?,
                r2: num(c[6])?,
                loss: num(c[7])?,
            });
        }
        Ok(Self { rows })
    }

    /// Fixed-width table for terminals.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v:.3}"));
        let mut s = format!(
            "{:<20} {:>4} {:>8} {:>9} {:>10} {:>8} {:>8} {:>8}\n",
            REPORT_HEADER[0],
            REPORT_HEADER[1],
            REPORT_HEADER[2],
            REPORT_HEADER[3],
            REPORT_HEADER[4],
            REPORT_HEADER[5],
            REPORT_HEADER[6],
            REPORT_HEADER[7]
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<20} {:>4} {:>8} {:>9} {:>10} {:>8} {:>8} {:>8}",
                r.model,
                r.window,
                fmt(r.auprc),
                fmt(r.accuracy),
                fmt(r.silhouette),
                fmt(r.dbi),
                fmt(r.r2),
                fmt(r.loss)
            );
        }
        s
    }
}

/// Settings shared by every row of [`evaluate_all`].
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub window: usize,
    pub probe: ProbeConfig,
    pub clusters: usize,
    pub regression_split: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            window: 19,
            probe: ProbeConfig::default(),
            clusters: N_STATES,
            regression_split: 0.7,
            seed: 0,
        }
    }
}

fn ok_or_warn<V>(what: &str, model: &str, r: Result<V>) -> Option<V> {
    match r {
        Ok(v) => Some(v),
        Err(e) => {
            log::warn!("{model}: {what} failed: {e}");
            None
        }
    }
}

fn row_for(
    model: &str,
    inputs: &[Vec<f64>],
    labels: &[u8],
    x_man: &[f64],
    cfg: &EvalConfig,
) -> ReportRow {
    let probe = ok_or_warn(
        "classification",
        model,
        linear_probe(inputs, labels, &cfg.probe),
    );
    let mut rng = stream(cfg.seed, Stream::Cluster);
    let km = ok_or_warn(
        "k-means",
        model,
        kmeans(inputs, cfg.clusters, 300, &mut rng),
    );
    let (sil, dbi) = match &km {
        Some(k) => (
            ok_or_warn("silhouette", model, silhouette(inputs, &k.assignments)),
            ok_or_warn("DBI", model, davies_bouldin(inputs, &k.assignments)),
        ),
        None => (None, None),
    };
    let reg = ok_or_warn(
        "regression",
        model,
        linear_regression_probe(inputs, x_man, cfg.regression_split),
    );
    ReportRow {
        model: model.to_string(),
        window: cfg.window,
        auprc: probe.map(|p| p.auprc),
        accuracy: probe.map(|p| 100.0 * p.accuracy),
        silhouette: sil,
        dbi,
        r2: reg.map(|r| r.r2),
        loss: reg.map(|r| r.mse),
    }
}

/// Builds the report for every supplied representation set. DLG sets add a
/// row using the global codes as probe inputs and a row whose targets are
/// k-means clusters of the global codes.
pub fn evaluate_all(
    sets: &[RepresentationSet],
    series: &MultivariateSeries,
    cfg: &EvalConfig,
) -> Result<Report> {
    let labels = series
        .labels()
        .ok_or_else(|| EvalError::Parameter("series has no state labels".into()))?;
    let batch = make_windows(series, cfg.window)?;
    let window_labels = majority_labels(&batch, labels);
    let x_man = turning_point_summary(series, cfg.window)?;
    let mut rows = Vec::new();
    for set in sets {
        if set.len() != batch.len() {
            return Err(EvalError::Parameter(format!(
                "{} has {} rows, series has {} windows",
                set.source,
                set.len(),
                batch.len()
            )));
        }
        rows.push(row_for(&set.source, &set.z, &window_labels, &x_man, cfg));
        if let Some(zg) = &set.z_g {
            rows.push(row_for(
                &format!("{}-global-input", set.source),
                zg,
                &window_labels,
                &x_man,
                cfg,
            ));
            let mut rng = stream(cfg.seed, Stream::Cluster);
            let derived = kmeans(zg, cfg.clusters.min(zg.len()), 300, &mut rng)
                .map(|k| k.assignments.iter().map(|&a| a as u8).collect::<Vec<u8>>());
            match derived {
                Ok(gl) => rows.push(row_for(
                    &format!("{}-global-labels", set.source),
                    &set.z,
                    &gl,
                    &x_man,
                    cfg,
                )),
                Err(e) => log::warn!("{}: clustering global codes failed: {e}", set.source),
            }
        }
    }
    Ok(Report { rows })
}

/// Random probe inputs for smoke checks.
pub fn random_reps<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}
