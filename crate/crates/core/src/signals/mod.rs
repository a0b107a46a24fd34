//! Bivariate acceleration series: ingestion, normalization, windowing,
//! synthetic generation and stationarity-based state labels.

mod csvio;
mod labels;
mod synth;
mod windows;

pub use csvio::{load_csv, read_csv, save_csv, write_csv};
pub use labels::{label_states, state_from_flags, StationarityConvention, LABEL_WINDOW};
pub use synth::{preset, regimes_for_state, synthesize, Regime, SegmentSpec, SynthConfig, PRESETS};
pub use windows::{majority_labels, make_windows, Window, WindowBatch};

/// Column names of the two acceleration channels, in feature order.
pub const FEATURE_NAMES: [&str; 2] = ["a_lat", "a_lon"];

/// Number of maneuver states produced by [`label_states`].
pub const N_STATES: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum SignalsError {
    #[error("format error: {0}")]
    Format(String),
    #[error("parse error at line {line}, column `{column}`: {detail}")]
    Parse {
        line: usize,
        column: String,
        detail: String,
    },
    #[error("normalization error: feature {0} is all zeros")]
    Normalization(usize),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T, E = SignalsError> = std::result::Result<T, E>;

/// `F × T` signal with optional observation mask and per-step state labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MultivariateSeries {
    values: Vec<Vec<f64>>,
    mask: Option<Vec<Vec<bool>>>,
    labels: Option<Vec<u8>>,
    pub sample_rate_hint: Option<f64>,
}

impl MultivariateSeries {
    pub fn new(values: Vec<Vec<f64>>) -> Result<Self> {
        if values.is_empty() {
            return Err(SignalsError::Parameter(
                "series needs at least one feature".into(),
            ));
        }
        let t = values[0].len();
        if values.iter().any(|f| f.len() != t) {
            return Err(SignalsError::Parameter(
                "features have different lengths".into(),
            ));
        }
        Ok(Self {
            values,
            mask: None,
            labels: None,
            sample_rate_hint: None,
        })
    }

    pub fn with_mask(mut self, mask: Vec<Vec<bool>>) -> Result<Self> {
        if mask.len() != self.n_features() || mask.iter().any(|m| m.len() != self.len()) {
            return Err(SignalsError::Parameter(
                "mask shape differs from values".into(),
            ));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(SignalsError::Parameter(format!(
                "{} labels for {} time steps",
                labels.len(),
                self.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= N_STATES) {
            return Err(SignalsError::Parameter(format!(
                "state label {bad} outside 0..{N_STATES}"
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn n_features(&self) -> usize {
        self.values.len()
    }

    pub fn len(&self) -> usize {
        self.values[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn feature(&self, f: usize) -> &[f64] {
        &self.values[f]
    }

    pub fn mask(&self) -> Option<&[Vec<bool>]> {
        self.mask.as_deref()
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn is_observed(&self, f: usize, t: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[f][t])
    }

    /// Per-feature division by `max |x|`. Zeros stay zero and an already
    /// normalized series is returned unchanged.
    pub fn normalize(&self) -> Result<Self> {
        let mut out = self.clone();
        for (f, feat) in out.values.iter_mut().enumerate() {
            let max = feat.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if max == 0.0 {
                return Err(SignalsError::Normalization(f));
            }
            feat.iter_mut().for_each(|v| *v /= max);
        }
        Ok(out)
    }
}

/// Free-function form of [`MultivariateSeries::normalize`].
pub fn normalize(s: &MultivariateSeries) -> Result<MultivariateSeries> {
    s.normalize()
}
