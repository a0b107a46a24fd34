use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{MultivariateSeries, Result, SignalsError, FEATURE_NAMES};
use crate::rng::{stream, Stream};

/// Generating process for one feature over one segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regime {
    /// `x_t = φ x_{t-1} + σ ε_t`, stationary for `|φ| < 1`.
    Ar1 { phi: f64 },
    /// Gaussian random walk; `step` of `None` uses the config noise scale.
    RandomWalk { step: Option<f64> },
    /// `sin(2πt/period) + drift·t + σ ε_t`.
    Sine { period: f64, drift: f64 },
}

impl Regime {
    /// Whether the process has no unit root and no trend.
    pub fn is_stationary(&self) -> bool {
        match *self {
            Regime::Ar1 { .. } => true,
            Regime::RandomWalk { .. } => false,
            Regime::Sine { drift, .. } => drift == 0.0,
        }
    }
}

impl FromStr for Regime {
    type Err = SignalsError;

    /// Parses `ar1:φ`, `rw`, `rw:step` or `sine:period:drift`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || SignalsError::Config(format!("invalid regime `{s}`"));
        let num = |v: &str| v.trim().parse::<f64>().map_err(|_| bad());
        let parts: Vec<&str> = s.trim().split(':').collect();
        let r = match parts.as_slice() {
            ["ar1", phi] => {
                let phi = num(phi)?;
                if phi.is_nan() || phi.abs() >= 1.0 {
                    return Err(SignalsError::Config(format!(
                        "AR(1) needs |φ| < 1, got {phi}"
                    )));
                }
                Regime::Ar1 { phi }
            }
            ["rw"] => Regime::RandomWalk { step: None },
            ["rw", step] => {
                let step = num(step)?;
                if step.is_nan() || step <= 0.0 {
                    return Err(bad());
                }
                Regime::RandomWalk { step: Some(step) }
            }
            ["sine", period, drift] => {
                let period = num(period)?;
                if period.is_nan() || period <= 0.0 {
                    return Err(bad());
                }
                Regime::Sine {
                    period,
                    drift: num(drift)?,
                }
            }
            _ => return Err(bad()),
        };
        Ok(r)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Regime::Ar1 { phi } => write!(f, "ar1:{phi}"),
            Regime::RandomWalk { step: None } => write!(f, "rw"),
            Regime::RandomWalk { step: Some(s) } => write!(f, "rw:{s}"),
            Regime::Sine { period, drift } => write!(f, "sine:{period}:{drift}"),
        }
    }
}

/// One piece of the synthetic signal.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSpec {
    pub len: usize,
    /// One regime per feature.
    pub regimes: Vec<Regime>,
    /// Planted state, attached as labels when every segment has one.
    pub state: Option<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub length: usize,
    pub segments: Vec<SegmentSpec>,
    pub noise_scale: f64,
    pub missing_rate: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(SignalsError::Config("no segments".into()));
        }
        let total: usize = self.segments.iter().map(|s| s.len).sum();
        if total != self.length {
            return Err(SignalsError::Config(format!(
                "segment lengths sum to {total}, expected {}",
                self.length
            )));
        }
        let f_n = FEATURE_NAMES.len();
        if let Some(s) = self
            .segments
            .iter()
            .find(|s| s.regimes.len() != f_n || s.len == 0)
        {
            return Err(SignalsError::Config(format!(
                "segment needs a positive length and {f_n} regimes, got len {} with {}",
                s.len,
                s.regimes.len()
            )));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(SignalsError::Config(format!(
                "missing rate {} outside [0,1)",
                self.missing_rate
            )));
        }
        if self.noise_scale.is_nan() || self.noise_scale <= 0.0 {
            return Err(SignalsError::Config(format!(
                "noise scale must be positive, got {}",
                self.noise_scale
            )));
        }
        Ok(())
    }
}

/// Named presets accepted by [`preset`].
pub const PRESETS: [&str; 4] = [
    "four-state",
    "four-state-long",
    "four-state-blocks",
    "two-state",
];

const STATIONARY: Regime = Regime::Ar1 { phi: 0.5 };
const UNIT_ROOT: Regime = Regime::RandomWalk { step: Some(1.0) };

/// Regimes realising a state: stationary features are AR(1), the others
/// random walks.
pub fn regimes_for_state(state: u8) -> Vec<Regime> {
    let (lat, lon) = match state {
        0 => (STATIONARY, STATIONARY),
        1 => (UNIT_ROOT, STATIONARY),
        2 => (STATIONARY, UNIT_ROOT),
        _ => (UNIT_ROOT, UNIT_ROOT),
    };
    vec![lat, lon]
}

fn cycled_states(seed: u64, n_segments: usize, states: &[u8]) -> Vec<u8> {
    let mut rng = stream(seed ^ 0x5ee_d0f5_7a7e, Stream::Synth);
    let mut out = Vec::with_capacity(n_segments);
    while out.len() < n_segments {
        let mut cycle = states.to_vec();
        cycle.shuffle(&mut rng);
        out.extend(cycle);
    }
    out.truncate(n_segments);
    out
}

/// Built-in configurations.
///
/// * `four-state`: 2000 steps, 20 segments of 100, each block of four
///   segments visits states 0-3 in a seed-dependent order.
/// * `four-state-long`: 4000 steps, 20 segments of 200.
/// * `four-state-blocks`: 4000 steps, 8 segments of 500.
/// * `two-state`: 2000 steps alternating states 0 and 3 in segments of 200.
pub fn preset(name: &str, seed: u64) -> Result<SynthConfig> {
    let (seg_len, n_seg, states): (usize, usize, &[u8]) = match name {
        "four-state" => (100, 20, &[0, 1, 2, 3]),
        "four-state-long" => (200, 20, &[0, 1, 2, 3]),
        "four-state-blocks" => (500, 8, &[0, 1, 2, 3]),
        "two-state" => (200, 10, &[0, 3]),
        _ => {
            return Err(SignalsError::Config(format!(
                "unknown preset `{name}` (expected one of {})",
                PRESETS.join(", ")
            )))
        }
    };
    let order = if states.len() == 2 {
        (0..n_seg).map(|i| states[i % 2]).collect()
    } else {
        cycled_states(seed, n_seg, states)
    };
    let segments = order
        .into_iter()
        .map(|s| SegmentSpec {
            len: seg_len,
            regimes: regimes_for_state(s),
            state: Some(s),
        })
        .collect();
    Ok(SynthConfig {
        length: seg_len * n_seg,
        segments,
        noise_scale: 1.0,
        missing_rate: 0.0,
        seed,
    })
}

/// Generates the configured series and normalizes it. Random-walk segments
/// restart from zero.
pub fn synthesize(cfg: &SynthConfig) -> Result<MultivariateSeries> {
    cfg.validate()?;
    let f_n = FEATURE_NAMES.len();
    let mut rng = stream(cfg.seed, Stream::Synth);
    let mut values = vec![Vec::with_capacity(cfg.length); f_n];
    let sigma = cfg.noise_scale;
    for seg in &cfg.segments {
        for (f, regime) in seg.regimes.iter().enumerate() {
            let out = &mut values[f];
            let mut level = 0.0;
            for t in 0..seg.len {
                let eps: f64 = StandardNormal.sample(&mut rng);
                let v = match *regime {
                    Regime::Ar1 { phi } => {
                        level = phi * level + sigma * eps;
                        level
                    }
                    Regime::RandomWalk { step } => {
                        level += step.unwrap_or(sigma) * eps;
                        level
                    }
                    Regime::Sine { period, drift } => {
                        (TAU * t as f64 / period).sin() + drift * t as f64 + sigma * eps
                    }
                };
                out.push(v);
            }
        }
    }
    let mut s = MultivariateSeries::new(values)?.normalize()?;
    if cfg.missing_rate > 0.0 {
        let mut mask = vec![vec![true; cfg.length]; f_n];
        let mut vals = s.values().to_vec();
        for f in 0..f_n {
            for t in 0..cfg.length {
                if rng.random::<f64>() < cfg.missing_rate {
                    mask[f][t] = false;
                    vals[f][t] = 0.0;
                }
            }
        }
        s = MultivariateSeries::new(vals)?.with_mask(mask)?;
    } else {
        s = s.with_mask(vec![vec![true; cfg.length]; f_n])?;
    }
    if cfg.segments.iter().all(|seg| seg.state.is_some()) {
        let labels = cfg
            .segments
            .iter()
            .flat_map(|seg| std::iter::repeat_n(seg.state.unwrap_or(0), seg.len))
            .collect();
        s = s.with_labels(labels)?;
    }
    Ok(s)
}
