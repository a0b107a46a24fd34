//! Training hyperparameters and their plain-text `key=value` form.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::dlg::Kernel;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("unknown key `{key}` (valid keys: {valid})")]
    UnknownKey { key: String, valid: String },
    #[error("line {line}: expected key=value, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("invalid value for `{key}`: {detail}")]
    Invalid { key: String, detail: String },
}

type Result<T, E = ConfigError> = std::result::Result<T, E>;

/// All hyperparameters of both learners.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Window size δ.
    pub window: usize,
    /// Local / TNC representation size M.
    pub repr_size: usize,
    /// Global representation size m.
    pub global_size: usize,
    pub lr: f64,
    /// Batch size κ.
    pub batch_size: usize,
    pub epochs: usize,
    /// PU weight `w_t`.
    pub pu_weight: f64,
    /// Counterfactual weight λ.
    pub lambda: f64,
    /// KL weight B.
    pub beta: f64,
    pub adf_threshold: f64,
    pub priors: Vec<Kernel>,
    pub prior_scales: Vec<f64>,
    pub seed: u64,
    /// Maximum neighborhood growth per side, in windows.
    pub neighborhood_cap: usize,
    pub train_fraction: f64,
    pub decoder_hidden: usize,
    pub disc_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            window: 19,
            repr_size: 16,
            global_size: 2,
            lr: 0.001,
            batch_size: 5,
            epochs: 30,
            pu_weight: 0.05,
            lambda: 0.8,
            beta: 0.01,
            adf_threshold: 0.01,
            priors: vec![Kernel::Rbf, Kernel::Matern32],
            prior_scales: vec![2.0, 1.0, 0.5, 0.25],
            seed: 0,
            neighborhood_cap: 5,
            train_fraction: 0.8,
            decoder_hidden: 32,
            disc_hidden: 32,
        }
    }
}

/// Recognized keys, in the order [`TrainConfig::to_text`] writes them.
pub const KEYS: [&str; 17] = [
    "W_t",
    "M",
    "m",
    "lr",
    "kappa",
    "epochs",
    "w_t",
    "lambda",
    "B",
    "adf",
    "priors",
    "prior_scales",
    "seed",
    "neighborhood_cap",
    "train_fraction",
    "decoder_hidden",
    "disc_hidden",
];

fn parse<V: FromStr>(key: &str, v: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    v.trim().parse().map_err(|e: V::Err| ConfigError::Invalid {
        key: key.into(),
        detail: format!("`{v}`: {e}"),
    })
}

fn list<V: FromStr>(key: &str, v: &str) -> Result<Vec<V>>
where
    V::Err: std::fmt::Display,
{
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s))
        .collect()
}

impl TrainConfig {
    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        match key {
            "W_t" => self.window = parse(key, value)?,
            "M" => self.repr_size = parse(key, value)?,
            "m" => self.global_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "kappa" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "w_t" => self.pu_weight = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "B" => self.beta = parse(key, value)?,
            "adf" => self.adf_threshold = parse(key, value)?,
            "priors" => self.priors = list(key, value)?,
            "prior_scales" => self.prior_scales = list(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "neighborhood_cap" => self.neighborhood_cap = parse(key, value)?,
            "train_fraction" => self.train_fraction = parse(key, value)?,
            "decoder_hidden" => self.decoder_hidden = parse(key, value)?,
            "disc_hidden" => self.disc_hidden = parse(key, value)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    key: key.into(),
                    valid: KEYS.join(", "),
                })
            }
        }
        Ok(())
    }

    /// Parses `key=value` lines over the defaults. Blank lines and `#`
    /// comments are skipped. The result is validated.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies assignments without validating.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Canonical text form; parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        let join = |v: Vec<String>| v.join(",");
        let mut s = String::new();
        let values = [
            self.window.to_string(),
            self.repr_size.to_string(),
            self.global_size.to_string(),
            self.lr.to_string(),
            self.batch_size.to_string(),
            self.epochs.to_string(),
            self.pu_weight.to_string(),
            self.lambda.to_string(),
            self.beta.to_string(),
            self.adf_threshold.to_string(),
            join(self.priors.iter().map(|k| k.to_string()).collect()),
            join(self.prior_scales.iter().map(|v| v.to_string()).collect()),
            self.seed.to_string(),
            self.neighborhood_cap.to_string(),
            self.train_fraction.to_string(),
            self.decoder_hidden.to_string(),
            self.disc_hidden.to_string(),
        ];
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, detail: String| {
            Err(ConfigError::Invalid {
                key: key.into(),
                detail,
            })
        };
        if self.window == 0 {
            return bad("W_t", "must be at least 1".into());
        }
        if self.repr_size == 0 {
            return bad("M", "must be at least 1".into());
        }
        if self.global_size == 0 || self.global_size > self.repr_size {
            return bad(
                "m",
                format!(
                    "need 1 <= m <= M = {}, got {}",
                    self.repr_size, self.global_size
                ),
            );
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("must be positive, got {}", self.lr));
        }
        if self.batch_size < 2 {
            return bad(
                "kappa",
                format!("must be at least 2, got {}", self.batch_size),
            );
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.pu_weight) {
            return bad("w_t", format!("must lie in [0,1], got {}", self.pu_weight));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad("B", format!("must lie in [0,1], got {}", self.beta));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(
                "lambda",
                format!("must be non-negative, got {}", self.lambda),
            );
        }
        if !(self.adf_threshold > 0.0 && self.adf_threshold < 1.0) {
            return bad(
                "adf",
                format!("must lie in (0,1), got {}", self.adf_threshold),
            );
        }
        if self.priors.is_empty() || self.prior_scales.is_empty() {
            return bad("priors", "need at least one kernel and one scale".into());
        }
        if let Some(s) = self
            .prior_scales
            .iter()
            .find(|&&s| !(s > 0.0 && s.is_finite()))
        {
            return bad(
                "prior_scales",
                format!("length scales must be positive, got {s}"),
            );
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(
                "train_fraction",
                format!("must lie in (0,1), got {}", self.train_fraction),
            );
        }
        if self.decoder_hidden == 0 || self.disc_hidden == 0 {
            return bad("decoder_hidden", "hidden sizes must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_table_defaults() {
        let c = TrainConfig::from_text("").unwrap();
        assert_eq!(c, TrainConfig::default());
        assert_eq!(
            (c.window, c.repr_size, c.global_size, c.batch_size, c.epochs),
            (19, 16, 2, 5, 30)
        );
        assert_eq!(
            (c.lr, c.pu_weight, c.lambda, c.beta, c.adf_threshold),
            (0.001, 0.05, 0.8, 0.01, 0.01)
        );
        assert_eq!(c.priors, vec![Kernel::Rbf, Kernel::Matern32]);
        assert_eq!(c.prior_scales, vec![2.0, 1.0, 0.5, 0.25]);
    }

    #[test]
    fn overrides_and_validation() {
        let c = TrainConfig::from_text("# comment\nB=0\nlambda = 0\n\nseed=9").unwrap();
        assert_eq!((c.beta, c.lambda, c.seed), (0.0, 0.0, 9));
        assert!(
            matches!(TrainConfig::from_text("m=32"), Err(ConfigError::Invalid { ref key, .. }) if key == "m")
        );
        let err = TrainConfig::from_text("bogus=1").unwrap_err();
        assert!(err.to_string().contains("W_t"));
        assert!(matches!(
            TrainConfig::from_text("lr"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(TrainConfig::from_text("priors=rbf,cosine").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::default();
        c.set("priors", "matern32").unwrap();
        c.set("lr", "0.0003").unwrap();
        assert_eq!(TrainConfig::from_text(&c.to_text()).unwrap(), c);
    }
}
