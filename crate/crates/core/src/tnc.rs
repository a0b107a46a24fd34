//! Temporal neighborhood coding: ADF-grown neighborhoods, tuple sampling and
//! the PU-weighted contrastive objective.

use std::collections::HashMap;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::TrainConfig;
use crate::ndtensor::{Adam, AdamConfig, Checkpoint, Graph, Tensor, TensorError, Var};
use crate::nets::{Discriminator, DiscriminatorSpec, Encoder, EncoderSpec};
use crate::rng::{stream, Stream};
use crate::scalar::Scalar;
use crate::signals::{
    make_windows, MultivariateSeries, SignalsError, StationarityConvention, WindowBatch,
};
use crate::stationarity::adf_test;

/// Clamp applied to discriminator outputs before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, thiserror::Error)]
pub enum TncError {
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Signals(#[from] SignalsError),
}

pub type Result<T, E = TncError> = std::result::Result<T, E>;

/// Grows and caches stationary neighborhoods over the windows of a series.
#[derive(Debug, Clone)]
pub struct NeighborhoodSampler<'a> {
    series: &'a MultivariateSeries,
    window: usize,
    n_windows: usize,
    pub adf_threshold: f64,
    pub cap: usize,
    pub convention: StationarityConvention,
    range: Range<usize>,
    cache: HashMap<usize, (usize, usize)>,
}

impl<'a> NeighborhoodSampler<'a> {
    pub fn new(
        series: &'a MultivariateSeries,
        window: usize,
        adf_threshold: f64,
        cap: usize,
    ) -> Result<Self> {
        if window == 0 || window > series.len() {
            return Err(TncError::Parameter(format!(
                "window {window} for series of length {}",
                series.len()
            )));
        }
        let n_windows = series.len().div_ceil(window);
        Ok(Self {
            series,
            window,
            n_windows,
            adf_threshold,
            cap,
            convention: StationarityConvention::default(),
            range: 0..n_windows,
            cache: HashMap::new(),
        })
    }

    /// Confines neighborhoods and negatives to a contiguous block of windows.
    pub fn with_range(mut self, range: Range<usize>) -> Result<Self> {
        if range.is_empty() || range.end > self.n_windows {
            return Err(TncError::Parameter(format!(
                "window range {range:?} outside 0..{}",
                self.n_windows
            )));
        }
        self.range = range;
        self.cache.clear();
        Ok(self)
    }

    pub fn n_windows(&self) -> usize {
        self.n_windows
    }

    pub fn range(&self) -> Range<usize> {
        self.range.clone()
    }

    fn region_is_stationary(&self, lo: usize, hi: usize) -> bool {
        let start = lo * self.window;
        let end = ((hi + 1) * self.window).min(self.series.len());
        (0..self.series.n_features().min(2)).all(|f| {
            let obs: Vec<f64> = (start..end)
                .filter(|&t| self.series.is_observed(f, t))
                .map(|t| self.series.feature(f)[t])
                .collect();
            match adf_test(&obs, None) {
                Ok(r) => self.convention.is_stationary(r.p_value, self.adf_threshold),
                Err(_) => false,
            }
        })
    }

    /// Inclusive window range `(lo, hi)` around anchor `t`, grown one window
    /// per side while the ADF test on the whole region keeps rejecting a unit
    /// root for every feature, up to `cap` steps.
    pub fn find_neighborhood(&mut self, t: usize) -> Result<(usize, usize)> {
        if !self.range.contains(&t) {
            return Err(TncError::Parameter(format!(
                "anchor {t} outside windows {:?}",
                self.range
            )));
        }
        if let Some(&n) = self.cache.get(&t) {
            return Ok(n);
        }
        let (mut lo, mut hi) = (t, t);
        for _ in 0..self.cap {
            let nlo = lo.saturating_sub(1).max(self.range.start);
            let nhi = (hi + 1).min(self.range.end - 1);
            if (nlo, nhi) == (lo, hi) || !self.region_is_stationary(nlo, nhi) {
                break;
            }
            (lo, hi) = (nlo, nhi);
        }
        self.cache.insert(t, (lo, hi));
        Ok((lo, hi))
    }

    /// `(anchor, positive, negative)` window indices. The positive is uniform
    /// over the neighborhood minus the anchor (the anchor itself when the
    /// neighborhood is a single window); the negative is uniform over the
    /// rest of the range.
    pub fn sample_tuple<R: Rng + ?Sized>(
        &mut self,
        t: usize,
        rng: &mut R,
    ) -> Result<(usize, usize, usize)> {
        let (lo, hi) = self.find_neighborhood(t)?;
        let n_out = self.range.len() - (hi - lo + 1);
        if n_out == 0 {
            return Err(TncError::Sampling(format!(
                "neighborhood of window {t} covers every window in {:?}",
                self.range
            )));
        }
        let pos = if hi == lo {
            t
        } else {
            let i = rng.random_range(0..hi - lo);
            let p = lo + i;
            if p >= t {
                p + 1
            } else {
                p
            }
        };
        let mut k = self.range.start + rng.random_range(0..n_out);
        if k >= lo {
            k += hi - lo + 1;
        }
        Ok((t, pos, k))
    }
}

/// Batch means of the two halves of the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TncLossTerms {
    /// Mean of `log D(Z_t, Z_l)`.
    pub pos_term: f64,
    /// Mean of `w log D(Z_t, Z_k) + (1 − w) log(1 − D(Z_t, Z_k))`.
    pub neg_term: f64,
    pub loss: f64,
}

/// Encoder and discriminator sharing one graph.
#[derive(Debug, Clone)]
pub struct TncModel {
    pub encoder: Encoder,
    pub disc: Discriminator,
}

impl TncModel {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        g: &mut Graph<T>,
        enc_spec: EncoderSpec,
        disc_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let repr = enc_spec.out;
        let encoder = Encoder::new(g, "enc", enc_spec, rng)?;
        let disc = Discriminator::new(
            g,
            "disc",
            DiscriminatorSpec {
                repr,
                hidden: disc_hidden,
            },
            rng,
        )?;
        Ok(Self { encoder, disc })
    }

    pub fn params(&self) -> Vec<Var> {
        let mut p = self.encoder.params();
        p.extend(self.disc.params());
        p
    }

    /// Discriminator probabilities `(D(a, p), D(a, n))` for each tuple.
    pub fn pair_probs<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        tuples: &[[Tensor<T>; 3]],
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        let mut pos = Vec::with_capacity(tuples.len());
        let mut neg = Vec::with_capacity(tuples.len());
        for [a, p, n] in tuples {
            let wa = g.constant(a.clone());
            let wp = g.constant(p.clone());
            let wn = g.constant(n.clone());
            let za = self.encoder.forward(g, wa)?;
            let zp = self.encoder.forward(g, wp)?;
            let zn = self.encoder.forward(g, wn)?;
            pos.push(self.disc.forward(g, za, zp)?);
            neg.push(self.disc.forward(g, za, zn)?);
        }
        Ok((pos, neg))
    }
}

/// `−mean[log D(Z_t,Z_l) + w log D(Z_t,Z_k) + (1−w) log(1−D(Z_t,Z_k))]` with
/// `D` clamped to `[ε, 1−ε]`.
pub fn tnc_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &TncModel,
    tuples: &[[Tensor<T>; 3]],
    pu_weight: f64,
) -> Result<(Var, TncLossTerms)> {
    if tuples.is_empty() {
        return Err(TncError::Parameter("empty batch".into()));
    }
    let (pos, neg) = model.pair_probs(g, tuples)?;
    pu_loss(g, &pos, &neg, pu_weight)
}

/// The objective applied to precomputed discriminator outputs.
pub fn pu_loss<T: Scalar>(
    g: &mut Graph<T>,
    pos: &[Var],
    neg: &[Var],
    pu_weight: f64,
) -> Result<(Var, TncLossTerms)> {
    if pos.is_empty() || pos.len() != neg.len() {
        return Err(TncError::Parameter(format!(
            "{} positive and {} negative pairs",
            pos.len(),
            neg.len()
        )));
    }
    let lo = T::lit(PROB_EPS);
    let hi = T::lit(1.0 - PROB_EPS);
    let w = T::lit(pu_weight);
    let mut pos_terms = Vec::new();
    let mut neg_terms = Vec::new();
    for (&p, &n) in pos.iter().zip(neg) {
        let p = g.clamp(p, lo, hi);
        pos_terms.push(g.log(p));
        let n = g.clamp(n, lo, hi);
        let ln = g.log(n);
        let one_minus = g.affine(n, -T::one(), T::one());
        let l1 = g.log(one_minus);
        let a = g.scale(ln, w);
        let b = g.scale(l1, T::one() - w);
        neg_terms.push(g.add(a, b)?);
    }
    let bsz = T::lit(pos.len() as f64);
    let pc = g.concat(&pos_terms)?;
    let ps = g.sum(pc);
    let nc = g.concat(&neg_terms)?;
    let ns = g.sum(nc);
    let total = g.add(ps, ns)?;
    let loss = g.scale(total, -T::one() / bsz);
    let terms = TncLossTerms {
        pos_term: g.item(ps).as_f64() / pos.len() as f64,
        neg_term: g.item(ns).as_f64() / pos.len() as f64,
        loss: g.item(loss).as_f64(),
    };
    Ok((loss, terms))
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TncEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub heldout_loss: f64,
    /// Fraction of held-out pairs judged correctly (`D > 0.5` on positives,
    /// `D < 0.5` on negatives).
    pub disc_accuracy: f64,
}

pub const TNC_LOG_HEADER: [&str; 4] = ["epoch", "train_loss", "heldout_loss", "disc_accuracy"];

/// Trained model with its graph and log.
#[derive(Debug, Clone)]
pub struct TncRun<T> {
    pub graph: Graph<T>,
    pub model: TncModel,
    pub log: Vec<TncEpoch>,
    pub n_train_windows: usize,
}

pub(crate) fn window_tensor<T: Scalar>(batch: &WindowBatch, i: usize) -> Tensor<T> {
    let w = &batch.windows[i];
    let data = w.values.iter().map(|&v| T::lit(v)).collect();
    Tensor {
        shape: vec![batch.n_features, batch.window_size],
        data,
    }
}

/// Number of training windows under a temporal split.
pub fn split_point(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).floor() as usize).clamp(1, n.saturating_sub(1).max(1))
}

/// Options beyond the shared config.
#[derive(Debug, Clone, PartialEq)]
pub struct TncOptions {
    pub convention: StationarityConvention,
    pub first_layer_bias: bool,
}

impl Default for TncOptions {
    fn default() -> Self {
        Self {
            convention: StationarityConvention::default(),
            first_layer_bias: true,
        }
    }
}

fn tuples_for<T: Scalar>(
    batch: &WindowBatch,
    idx: &[(usize, usize, usize)],
) -> Vec<[Tensor<T>; 3]> {
    idx.iter()
        .map(|&(a, p, n)| {
            [
                window_tensor(batch, a),
                window_tensor(batch, p),
                window_tensor(batch, n),
            ]
        })
        .collect()
}

/// Trains encoder and discriminator with Adam on the first
/// `train_fraction` of windows and reports held-out loss and pair accuracy
/// on a fixed set of tuples from the remaining windows.
pub fn train_tnc<T: Scalar>(
    cfg: &TrainConfig,
    series: &MultivariateSeries,
    opts: &TncOptions,
) -> Result<TncRun<T>> {
    cfg.validate()
        .map_err(|e| TncError::Parameter(e.to_string()))?;
    let batch = make_windows(series, cfg.window)?;
    let n = batch.len();
    if n < 2 {
        return Err(TncError::Data(format!(
            "need at least 2 windows, series gives {n}"
        )));
    }
    let n_train = split_point(n, cfg.train_fraction);

    let mut g = Graph::<T>::new();
    let mut init = stream(cfg.seed, Stream::Init);
    let mut spec = EncoderSpec::standard(series.n_features(), cfg.window, cfg.repr_size, false);
    spec.first_layer_bias = opts.first_layer_bias;
    let model = TncModel::new(&mut g, spec, cfg.disc_hidden, &mut init)?;
    let params = model.params();
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));

    let mut train_s =
        NeighborhoodSampler::new(series, cfg.window, cfg.adf_threshold, cfg.neighborhood_cap)?
            .with_range(0..n_train)?;
    train_s.convention = opts.convention;
    let mut held_s =
        NeighborhoodSampler::new(series, cfg.window, cfg.adf_threshold, cfg.neighborhood_cap)?
            .with_range(n_train..n)?;
    held_s.convention = opts.convention;

    let mut held_rng = stream(cfg.seed, Stream::Heldout);
    let mut held_idx = Vec::new();
    for t in n_train..n {
        match held_s.sample_tuple(t, &mut held_rng) {
            Ok(tu) => held_idx.push(tu),
            Err(e) => log::warn!("no held-out tuple for window {t}: {e}"),
        }
    }
    let held_tuples: Vec<[Tensor<T>; 3]> = tuples_for(&batch, &held_idx);

    let mut rng = stream(cfg.seed, Stream::Sampling);
    let mut anchors: Vec<usize> = (0..n_train).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        anchors.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        for chunk in anchors.chunks(cfg.batch_size) {
            let mut idx = Vec::with_capacity(chunk.len());
            for &t in chunk {
                idx.push(train_s.sample_tuple(t, &mut rng)?);
            }
            let tuples = tuples_for(&batch, &idx);
            g.zero_grad();
            let (loss, terms) = tnc_loss(&mut g, &model, &tuples, cfg.pu_weight)?;
            g.backward(loss)?;
            g.reset();
            adam.step(&mut g, &params)?;
            loss_sum += terms.loss * chunk.len() as f64;
            count += chunk.len();
        }
        let (heldout_loss, disc_accuracy) =
            evaluate_pairs(&mut g, &model, &held_tuples, cfg.pu_weight)?;
        let row = TncEpoch {
            epoch,
            train_loss: loss_sum / count as f64,
            heldout_loss,
            disc_accuracy,
        };
        log::info!(
            "tnc epoch {epoch}: train {:.5} heldout {:.5} acc {:.3}",
            row.train_loss,
            row.heldout_loss,
            row.disc_accuracy
        );
        log.push(row);
    }
    g.zero_grad();
    Ok(TncRun {
        graph: g,
        model,
        log,
        n_train_windows: n_train,
    })
}

/// Loss and pair accuracy on fixed tuples; NaN when there are none.
pub fn evaluate_pairs<T: Scalar>(
    g: &mut Graph<T>,
    model: &TncModel,
    tuples: &[[Tensor<T>; 3]],
    pu_weight: f64,
) -> Result<(f64, f64)> {
    if tuples.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let (pos, neg) = model.pair_probs(g, tuples)?;
    let correct = pos.iter().filter(|&&p| g.item(p).as_f64() > 0.5).count()
        + neg.iter().filter(|&&q| g.item(q).as_f64() < 0.5).count();
    let (_, terms) = pu_loss(g, &pos, &neg, pu_weight)?;
    g.reset();
    Ok((terms.loss, correct as f64 / (2 * tuples.len()) as f64))
}

impl<T: Scalar> TncRun<T> {
    /// Representation of every window of `series`.
    pub fn encode(&mut self, series: &MultivariateSeries) -> Result<Vec<Vec<f64>>> {
        encode_windows(&mut self.graph, &self.model.encoder, series)
    }

    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let mut ckpt = self.graph.to_checkpoint();
        ckpt.meta.insert("model".into(), "tnc".into());
        ckpt.meta.insert("config".into(), cfg.to_text().into());
        ckpt.meta.insert(
            "encoder".into(),
            serde_json::to_value(&self.model.encoder.spec).unwrap_or_default(),
        );
        ckpt.meta.insert(
            "discriminator".into(),
            serde_json::to_value(&self.model.disc.spec).unwrap_or_default(),
        );
        ckpt
    }

    /// Rebuilds a model from [`TncRun::checkpoint`] output.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta.get("model").and_then(|v| v.as_str()) != Some("tnc") {
            return Err(TncError::Parameter("checkpoint is not a TNC model".into()));
        }
        let spec: EncoderSpec = meta_field(ckpt, "encoder")?;
        let dspec: DiscriminatorSpec = meta_field(ckpt, "discriminator")?;
        let mut g = Graph::new();
        let mut rng = stream(0, Stream::Init);
        let model = TncModel::new(&mut g, spec, dspec.hidden, &mut rng)?;
        g.load_checkpoint(ckpt)?;
        Ok(Self {
            graph: g,
            model,
            log: Vec::new(),
            n_train_windows: 0,
        })
    }
}

pub(crate) fn meta_field<V: serde::de::DeserializeOwned>(
    ckpt: &Checkpoint,
    key: &str,
) -> Result<V> {
    let v = ckpt
        .meta
        .get(key)
        .ok_or_else(|| TncError::Parameter(format!("checkpoint metadata lacks `{key}`")))?;
    serde_json::from_value(v.clone())
        .map_err(|e| TncError::Parameter(format!("checkpoint `{key}`: {e}")))
}

/// Encoder output for every window of `series`, as `f64`.
pub fn encode_windows<T: Scalar>(
    g: &mut Graph<T>,
    encoder: &Encoder,
    series: &MultivariateSeries,
) -> Result<Vec<Vec<f64>>> {
    let batch = make_windows(series, encoder.spec.window)?;
    let mut out = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let z = encoder.encode_values(g, window_tensor(&batch, i))?;
        out.push(z.iter().map(|v| v.as_f64()).collect());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn const_probs(g: &mut Graph<f64>, p: f64, q: f64, n: usize) -> (Vec<Var>, Vec<Var>) {
        let pos = (0..n)
            .map(|_| g.variable(Tensor::vector(vec![p])))
            .collect();
        let neg = (0..n)
            .map(|_| g.variable(Tensor::vector(vec![q])))
            .collect();
        (pos, neg)
    }

    #[test]
    fn half_probabilities_give_two_log_two() {
        let mut g = Graph::new();
        let (p, n) = const_probs(&mut g, 0.5, 0.5, 3);
        let (loss, terms) = pu_loss(&mut g, &p, &n, 0.05).unwrap();
        assert!((g.item(loss) - 2.0 * 2f64.ln()).abs() < 1e-15);
        assert!((terms.pos_term - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn perfect_discriminator_hits_clamp() {
        let mut g = Graph::new();
        let (p, n) = const_probs(&mut g, 1.0, 0.0, 2);
        let (loss, _) = pu_loss(&mut g, &p, &n, 0.05).unwrap();
        let eps = PROB_EPS;
        let expect = -((1.0 - eps).ln() + 0.05 * eps.ln() + 0.95 * (1.0 - eps).ln());
        assert!((g.item(loss) - expect).abs() < 1e-12);
        assert!((g.item(loss) - 0.05 * 16.118).abs() < 1e-3);
    }

    #[test]
    fn weight_limits() {
        let (dp, dn) = (0.7f64, 0.2f64);
        for (w, expect) in [
            (1.0, -(dp.ln() + dn.ln())),
            (0.0, -(dp.ln() + (1.0 - dn).ln())),
        ] {
            let mut g = Graph::new();
            let (p, n) = const_probs(&mut g, dp, dn, 1);
            let (loss, _) = pu_loss(&mut g, &p, &n, w).unwrap();
            assert!((g.item(loss) - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn empty_batch_rejected() {
        let mut g = Graph::<f64>::new();
        assert!(matches!(
            pu_loss(&mut g, &[], &[], 0.05),
            Err(TncError::Parameter(_))
        ));
    }

    #[test]
    fn single_window_neighborhood_is_anchor() {
        let s = MultivariateSeries::new(vec![vec![0.1; 19], vec![0.2; 19]]).unwrap();
        let mut smp = NeighborhoodSampler::new(&s, 19, 0.01, 5).unwrap();
        assert_eq!(smp.find_neighborhood(0).unwrap(), (0, 0));
        let mut rng = stream(0, Stream::Sampling);
        assert!(matches!(
            smp.sample_tuple(0, &mut rng),
            Err(TncError::Sampling(_))
        ));
        assert!(smp.find_neighborhood(1).is_err());
    }

    #[test]
    fn split_points() {
        assert_eq!(split_point(106, 0.8), 84);
        assert_eq!(split_point(2, 0.8), 1);
        assert_eq!(split_point(5, 0.8), 4);
    }
}
