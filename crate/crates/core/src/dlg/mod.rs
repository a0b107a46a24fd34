//! Decoupled local/global generative learner: variational encoders, GP
//! priors over local codes, B-weighted ELBO and counterfactual
//! regularization.

mod gp;

pub use gp::{
    assign_dims, kl_diag_node, kl_gaussian_diag, kl_gaussian_gp, kl_gp_node, log_normal_node,
    prior_grid, GpPrior, GramFactor, Kernel, JITTER,
};

use std::collections::hash_map::Entry;
use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::TrainConfig;
use crate::ndtensor::{Adam, AdamConfig, Checkpoint, Graph, Tensor, TensorError, Var};
use crate::nets::{Decoder, DecoderSpec, Encoder, EncoderSpec};
use crate::rng::{stream, Stream};
use crate::scalar::Scalar;
use crate::signals::{make_windows, MultivariateSeries, SignalsError, WindowBatch};
use crate::tnc::{meta_field, split_point, window_tensor, TncError};

/// Posterior log-variances are clamped to `[-LOGVAR_LIMIT, LOGVAR_LIMIT]`.
pub const LOGVAR_LIMIT: f64 = 6.0;

#[derive(Debug, thiserror::Error)]
pub enum DlgError {
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("state error: {0}")]
    State(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Signals(#[from] SignalsError),
}

impl From<TncError> for DlgError {
    fn from(e: TncError) -> Self {
        match e {
            TncError::Tensor(t) => DlgError::Tensor(t),
            TncError::Signals(s) => DlgError::Signals(s),
            other => DlgError::Parameter(other.to_string()),
        }
    }
}

pub type Result<T, E = DlgError> = std::result::Result<T, E>;

/// Logged components of the objective for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ElboTerms {
    pub mse: f64,
    pub kl_local: f64,
    pub kl_global: f64,
    pub l_reg: f64,
    pub total: f64,
}

impl ElboTerms {
    /// `(1−B)·mse + B·(kl_local + kl_global) + λ·l_reg`.
    pub fn recombine(&self, beta: f64, lambda: f64) -> f64 {
        (1.0 - beta) * self.mse + beta * (self.kl_local + self.kl_global) + lambda * self.l_reg
    }
}

/// One window with its observation mask, as graph-ready tensors.
#[derive(Debug, Clone)]
pub struct MaskedWindow<T> {
    pub values: Tensor<T>,
    pub mask: Tensor<T>,
}

impl<T: Scalar> MaskedWindow<T> {
    pub fn from_batch(batch: &WindowBatch, i: usize) -> Self {
        let w = &batch.windows[i];
        let shape = vec![batch.n_features, batch.window_size];
        let mask = w
            .mask
            .iter()
            .map(|&m| if m { T::one() } else { T::zero() })
            .collect();
        Self {
            values: window_tensor(batch, i),
            mask: Tensor { shape, data: mask },
        }
    }

    pub fn observed(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m != T::zero()).count()
    }
}

/// Local encoder, global encoder, decoder and prior layout.
#[derive(Debug, Clone)]
pub struct DlgModel {
    pub enc_l: Encoder,
    pub enc_g: Encoder,
    pub dec: Decoder,
    pub priors: Vec<GpPrior>,
    /// Prior index of each local dimension.
    pub dim_prior: Vec<usize>,
}

/// Sizes defining a [`DlgModel`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DlgSpec {
    pub features: usize,
    pub window: usize,
    pub local: usize,
    pub global: usize,
    pub hidden: usize,
    pub kernels: Vec<String>,
    pub scales: Vec<f64>,
    /// Identity activations in every network.
    #[serde(default)]
    pub linear: bool,
}

impl DlgSpec {
    pub fn from_config(cfg: &TrainConfig, features: usize) -> Self {
        Self {
            features,
            window: cfg.window,
            local: cfg.repr_size,
            global: cfg.global_size,
            hidden: cfg.decoder_hidden,
            kernels: cfg.priors.iter().map(|k| k.to_string()).collect(),
            scales: cfg.prior_scales.clone(),
            linear: false,
        }
    }
}

impl DlgModel {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        g: &mut Graph<T>,
        spec: &DlgSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let kernels = spec
            .kernels
            .iter()
            .map(|k| k.parse::<Kernel>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(DlgError::Parameter)?;
        let priors = prior_grid(&kernels, &spec.scales)?;
        if priors.is_empty() {
            return Err(DlgError::Parameter("no GP priors configured".into()));
        }
        let enc_spec = |out| EncoderSpec {
            linear: spec.linear,
            ..EncoderSpec::standard(spec.features, spec.window, out, true)
        };
        let enc_l = Encoder::new(g, "enc_l", enc_spec(spec.local), rng)?;
        let enc_g = Encoder::new(g, "enc_g", enc_spec(spec.global), rng)?;
        let dec_spec = DecoderSpec {
            local: spec.local,
            global: spec.global,
            hidden: spec.hidden,
            features: spec.features,
            steps: spec.window,
            linear: spec.linear,
        };
        let dec = Decoder::new(g, "dec", dec_spec, rng)?;
        let dim_prior = assign_dims(spec.local, priors.len());
        Ok(Self {
            enc_l,
            enc_g,
            dec,
            priors,
            dim_prior,
        })
    }

    pub fn params(&self) -> Vec<Var> {
        let mut p = self.enc_l.params();
        p.extend(self.enc_g.params());
        p.extend(self.dec.params());
        p
    }

    /// `(μ, log σ²)` from a variational encoder, with the log-variance clamped.
    pub fn posterior<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        enc: &Encoder,
        x: Var,
    ) -> Result<(Var, Var)> {
        let out = enc.forward(g, x)?;
        let (mu, lv) = enc.split(g, out)?;
        let lim = T::lit(LOGVAR_LIMIT);
        Ok((mu, g.clamp(lv, -lim, lim)))
    }

    /// GP factors over a unit-spaced grid of `n` consecutive windows.
    pub fn factors<T: Scalar>(&self, n: usize) -> Result<Vec<GramFactor<T>>> {
        let times: Vec<f64> = (0..n).map(|i| i as f64).collect();
        self.priors.iter().map(|p| p.factor(&times)).collect()
    }
}

/// `z = μ + exp(½ log σ²)·ε` with `ε ~ N(0, I)` drawn from `rng`.
pub fn reparameterize<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    mu: Var,
    lv: Var,
    rng: &mut R,
) -> Result<Var> {
    let n = g.value(mu).numel();
    let eps: Vec<T> = (0..n).map(|_| T::lit(StandardNormal.sample(rng))).collect();
    let e = g.constant(Tensor::vector(eps));
    let half = g.scale(lv, T::lit(0.5));
    let sd = g.exp(half);
    let noise = g.mul(sd, e)?;
    Ok(g.add(mu, noise)?)
}

/// Masked squared error summed over a batch of reconstructions.
fn masked_sse<T: Scalar>(g: &mut Graph<T>, recon: Var, w: &MaskedWindow<T>) -> Result<Var> {
    let target = g.constant(w.values.clone());
    let mask = g.constant(w.mask.clone());
    let d = g.sub(recon, target)?;
    let d2 = g.square(d);
    let m = g.mul(d2, mask)?;
    Ok(g.sum(m))
}

/// Largest log-ratio magnitude passed to the softplus.
pub const LOG_RATIO_LIMIT: f64 = 30.0;

/// `log((1 + e^r) / 2)`: zero at `r = 0`, tends to `−ln 2` as `r → −∞` and
/// to `r − ln 2` as `r → ∞`.
fn bounded_log_ratio<T: Scalar>(g: &mut Graph<T>, r: Var) -> Var {
    let lim = T::lit(LOG_RATIO_LIMIT);
    let r = g.clamp(r, -lim, lim);
    let e = g.exp(r);
    let e = g.affine(e, T::lit(0.5), T::lit(0.5));
    g.log(e)
}

/// Mean over the batch of `log((1 + ρ_i) / 2)` where
/// `ρ_i = q(z_g^(i) | W*) / q(z_g^(j) | W*)`, `W* = Dec(Z_l^(i), z_g^(j))`
/// and `j ≠ i` drawn uniformly.
pub fn counterfactual_reg<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    model: &DlgModel,
    z_l: &[Var],
    z_g: &[Var],
    rng: &mut R,
) -> Result<Var> {
    let k = z_l.len();
    if k < 2 || z_g.len() != k {
        return Err(DlgError::Parameter(format!(
            "counterfactual term needs a batch of at least 2, got {k}"
        )));
    }
    let mut terms = Vec::with_capacity(k);
    for i in 0..k {
        let mut j = rng.random_range(0..k - 1);
        if j >= i {
            j += 1;
        }
        let w_star = model.dec.forward(g, z_l[i], Some(z_g[j]))?;
        let (mu, lv) = model.posterior(g, &model.enc_g, w_star)?;
        let own = log_normal_node(g, z_g[i], mu, lv)?;
        let swapped = log_normal_node(g, z_g[j], mu, lv)?;
        let r = g.sub(own, swapped)?;
        terms.push(bounded_log_ratio(g, r));
    }
    let c = g.concat(&terms)?;
    Ok(g.mean(c))
}

/// The full objective on κ consecutive windows. `factors` are the GP factors
/// for a grid of `batch.len()` points, one per prior.
pub fn elbo_loss<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    model: &DlgModel,
    batch: &[MaskedWindow<T>],
    factors: &[GramFactor<T>],
    beta: f64,
    lambda: f64,
    rng: &mut R,
) -> Result<(Var, ElboTerms)> {
    let k = batch.len();
    if k == 0 {
        return Err(DlgError::Parameter("empty batch".into()));
    }
    if factors.len() != model.priors.len() || factors.iter().any(|f| f.n != k) {
        return Err(DlgError::Parameter(format!(
            "GP factors do not match a batch of {k}"
        )));
    }
    let m_local = model.enc_l.spec.out;
    let mut mus = Vec::with_capacity(k);
    let mut lvs = Vec::with_capacity(k);
    let mut z_l = Vec::with_capacity(k);
    let mut z_g = Vec::with_capacity(k);
    let mut kl_g_terms = Vec::with_capacity(k);
    let mut sse = Vec::with_capacity(k);
    let mut observed = 0usize;
    for w in batch {
        let x = g.constant(w.values.clone());
        let (mu_l, lv_l) = model.posterior(g, &model.enc_l, x)?;
        let (mu_g, lv_g) = model.posterior(g, &model.enc_g, x)?;
        let zl = reparameterize(g, mu_l, lv_l, rng)?;
        let zg = reparameterize(g, mu_g, lv_g, rng)?;
        let recon = model.dec.forward(g, zl, Some(zg))?;
        sse.push(masked_sse(g, recon, w)?);
        observed += w.observed();
        kl_g_terms.push(kl_diag_node(g, mu_g, lv_g)?);
        mus.push(mu_l);
        lvs.push(lv_l);
        z_l.push(zl);
        z_g.push(zg);
    }
    if observed == 0 {
        return Err(DlgError::Data("batch has no observed values".into()));
    }
    let kf = T::lit(k as f64);

    let sse = g.concat(&sse)?;
    let sse = g.sum(sse);
    let mse = g.scale(sse, T::one() / T::lit(observed as f64));

    // Local codes arranged dimension-major: row j is dimension j over the grid.
    let mu_all = g.concat(&mus)?;
    let mu_all = g.reshape(mu_all, vec![k, m_local])?;
    let mu_all = g.transpose(mu_all)?;
    let lv_all = g.concat(&lvs)?;
    let lv_all = g.reshape(lv_all, vec![k, m_local])?;
    let lv_all = g.transpose(lv_all)?;
    let mut kl_l_terms = Vec::with_capacity(m_local);
    for (j, &p) in model.dim_prior.iter().enumerate() {
        let mu_j = g.slice(mu_all, j * k, k)?;
        let lv_j = g.slice(lv_all, j * k, k)?;
        kl_l_terms.push(kl_gp_node(g, mu_j, lv_j, &factors[p])?);
    }
    let kl_l = g.concat(&kl_l_terms)?;
    let kl_l = g.sum(kl_l);
    let kl_l = g.scale(kl_l, T::one() / kf);
    let kl_g = g.concat(&kl_g_terms)?;
    let kl_g = g.sum(kl_g);
    let kl_g = g.scale(kl_g, T::one() / kf);

    let mut total = g.scale(mse, T::lit(1.0 - beta));
    if beta != 0.0 {
        let kl = g.add(kl_l, kl_g)?;
        let kl = g.scale(kl, T::lit(beta));
        total = g.add(total, kl)?;
    }
    let mut l_reg_val = 0.0;
    if lambda != 0.0 {
        let l_reg = counterfactual_reg(g, model, &z_l, &z_g, rng)?;
        l_reg_val = g.item(l_reg).as_f64();
        let r = g.scale(l_reg, T::lit(lambda));
        total = g.add(total, r)?;
    }
    let terms = ElboTerms {
        mse: g.item(mse).as_f64(),
        kl_local: g.item(kl_l).as_f64(),
        kl_global: g.item(kl_g).as_f64(),
        l_reg: l_reg_val,
        total: g.item(total).as_f64(),
    };
    Ok((total, terms))
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DlgEpoch {
    pub epoch: usize,
    pub train: ElboTerms,
    pub heldout: ElboTerms,
    /// Held-out MSE decoding from posterior means.
    pub heldout_recon_mse: f64,
}

pub const DLG_LOG_HEADER: [&str; 12] = [
    "epoch",
    "train_loss",
    "train_mse",
    "train_kl_local",
    "train_kl_global",
    "train_l_reg",
    "heldout_loss",
    "heldout_mse",
    "heldout_kl_local",
    "heldout_kl_global",
    "heldout_l_reg",
    "heldout_recon_mse",
];

impl DlgEpoch {
    pub fn row(&self) -> [f64; 12] {
        let (a, b) = (&self.train, &self.heldout);
        [
            self.epoch as f64,
            a.total,
            a.mse,
            a.kl_local,
            a.kl_global,
            a.l_reg,
            b.total,
            b.mse,
            b.kl_local,
            b.kl_global,
            b.l_reg,
            self.heldout_recon_mse,
        ]
    }
}

#[derive(Debug, Clone)]
pub struct DlgRun<T> {
    pub graph: Graph<T>,
    pub model: DlgModel,
    pub spec: DlgSpec,
    pub log: Vec<DlgEpoch>,
    pub n_train_windows: usize,
}

/// Consecutive runs of `batch_size` indices from `range`; a trailing single
/// index joins the previous run.
pub fn consecutive_batches(range: std::ops::Range<usize>, batch_size: usize) -> Vec<Vec<usize>> {
    let idx: Vec<usize> = range.collect();
    let mut out: Vec<Vec<usize>> = idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().is_some_and(|c| c.len() == 1) {
        let tail = out.pop().unwrap_or_default();
        if let Some(prev) = out.last_mut() {
            prev.extend(tail);
        }
    }
    out
}

struct FactorCache<T> {
    by_len: HashMap<usize, Vec<GramFactor<T>>>,
}

impl<T: Scalar> FactorCache<T> {
    fn get(&mut self, model: &DlgModel, n: usize) -> Result<&[GramFactor<T>]> {
        if let Entry::Vacant(e) = self.by_len.entry(n) {
            e.insert(model.factors(n)?);
        }
        Ok(&self.by_len[&n])
    }
}

fn mean_terms(acc: &[(ElboTerms, usize)]) -> ElboTerms {
    let n: usize = acc.iter().map(|a| a.1).sum();
    let w = |f: fn(&ElboTerms) -> f64| {
        acc.iter().map(|(t, c)| f(t) * *c as f64).sum::<f64>() / n.max(1) as f64
    };
    ElboTerms {
        mse: w(|t| t.mse),
        kl_local: w(|t| t.kl_local),
        kl_global: w(|t| t.kl_global),
        l_reg: w(|t| t.l_reg),
        total: w(|t| t.total),
    }
}

/// Trains with Adam on the first `train_fraction` of windows in batches of
/// κ consecutive windows (shuffled batch order), logging the objective on the
/// held-out windows after each epoch.
pub fn train_dlg<T: Scalar>(cfg: &TrainConfig, series: &MultivariateSeries) -> Result<DlgRun<T>> {
    train_dlg_with_spec(cfg, DlgSpec::from_config(cfg, series.n_features()), series)
}

/// [`train_dlg`] with explicit architecture sizes.
pub fn train_dlg_with_spec<T: Scalar>(
    cfg: &TrainConfig,
    spec: DlgSpec,
    series: &MultivariateSeries,
) -> Result<DlgRun<T>> {
    cfg.validate()
        .map_err(|e| DlgError::Parameter(e.to_string()))?;
    if spec.window != cfg.window || spec.features != series.n_features() {
        return Err(DlgError::Parameter(format!(
            "spec expects {} features and window {}, got {} and {}",
            spec.features,
            spec.window,
            series.n_features(),
            cfg.window
        )));
    }
    let batch = make_windows(series, cfg.window)?;
    let n = batch.len();
    if n < 2 {
        return Err(DlgError::Data(format!(
            "need at least 2 windows, series gives {n}"
        )));
    }
    let n_train = split_point(n, cfg.train_fraction);
    let windows: Vec<MaskedWindow<T>> = (0..n)
        .map(|i| MaskedWindow::from_batch(&batch, i))
        .collect();

    let mut g = Graph::<T>::new();
    let mut init = stream(cfg.seed, Stream::Init);
    let model = DlgModel::new(&mut g, &spec, &mut init)?;
    let params = model.params();
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut cache = FactorCache {
        by_len: HashMap::new(),
    };

    let mut train_batches = consecutive_batches(0..n_train, cfg.batch_size);
    let held_batches = consecutive_batches(n_train..n, cfg.batch_size);
    let mut order_rng = stream(cfg.seed, Stream::Sampling);
    let mut noise_rng = stream(cfg.seed, Stream::Reparam);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        train_batches.shuffle(&mut order_rng);
        let mut acc = Vec::with_capacity(train_batches.len());
        for b in &train_batches {
            let items: Vec<MaskedWindow<T>> = b.iter().map(|&i| windows[i].clone()).collect();
            let factors = cache.get(&model, items.len())?.to_vec();
            g.zero_grad();
            let (loss, terms) = elbo_loss(
                &mut g,
                &model,
                &items,
                &factors,
                cfg.beta,
                cfg.lambda,
                &mut noise_rng,
            )?;
            if !terms.total.is_finite() {
                return Err(DlgError::Numerical(format!(
                    "non-finite loss at epoch {epoch}"
                )));
            }
            g.backward(loss)?;
            g.reset();
            adam.step(&mut g, &params)?;
            acc.push((terms, items.len()));
        }
        let mut held_rng = stream(cfg.seed, Stream::Heldout);
        let mut held_acc = Vec::new();
        for b in &held_batches {
            if b.len() < 2 && cfg.lambda != 0.0 {
                continue;
            }
            let items: Vec<MaskedWindow<T>> = b.iter().map(|&i| windows[i].clone()).collect();
            let factors = cache.get(&model, items.len())?.to_vec();
            let (_, terms) = elbo_loss(
                &mut g,
                &model,
                &items,
                &factors,
                cfg.beta,
                cfg.lambda,
                &mut held_rng,
            )?;
            g.reset();
            held_acc.push((terms, items.len()));
        }
        let heldout_recon_mse = recon_mse(&mut g, &model, &windows[n_train..])?;
        let row = DlgEpoch {
            epoch,
            train: mean_terms(&acc),
            heldout: mean_terms(&held_acc),
            heldout_recon_mse,
        };
        log::info!(
            "dlg epoch {epoch}: train {:.5} (mse {:.5}) heldout recon mse {:.5}",
            row.train.total,
            row.train.mse,
            heldout_recon_mse
        );
        log.push(row);
    }
    g.zero_grad();
    Ok(DlgRun {
        graph: g,
        model,
        spec,
        log,
        n_train_windows: n_train,
    })
}

/// Decodes one window from posterior means.
fn decode_mean<T: Scalar>(
    g: &mut Graph<T>,
    model: &DlgModel,
    w: &Tensor<T>,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let x = g.constant(w.clone());
    let (mu_l, _) = model.posterior(g, &model.enc_l, x)?;
    let (mu_g, _) = model.posterior(g, &model.enc_g, x)?;
    let out = model.dec.forward(g, mu_l, Some(mu_g))?;
    let r = (
        g.value(out).data().to_vec(),
        g.value(mu_l).data().to_vec(),
        g.value(mu_g).data().to_vec(),
    );
    g.reset();
    Ok(r)
}

/// Pooled MSE over observed entries, decoding from posterior means.
pub fn recon_mse<T: Scalar>(
    g: &mut Graph<T>,
    model: &DlgModel,
    windows: &[MaskedWindow<T>],
) -> Result<f64> {
    let mut sse = 0.0;
    let mut n = 0usize;
    for w in windows {
        let (r, _, _) = decode_mean(g, model, &w.values)?;
        for ((&a, &b), &m) in r.iter().zip(w.values.data()).zip(w.mask.data()) {
            if m != T::zero() {
                sse += (a - b).as_f64().powi(2);
                n += 1;
            }
        }
    }
    Ok(if n == 0 { f64::NAN } else { sse / n as f64 })
}

/// Stitched reconstruction of a series.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    /// `F × T`.
    pub values: Vec<Vec<f64>>,
    /// Per-feature residual standard deviation on the training windows.
    pub sigma: Vec<f64>,
}

pub const RECON_HEADER: [&str; 7] = [
    "t",
    "a_lat",
    "a_lon",
    "a_lat_hat",
    "a_lon_hat",
    "sigma_lat",
    "sigma_lon",
];

impl<T: Scalar> DlgRun<T> {
    /// Posterior means `(Z_l, z_g)` for every window.
    #[allow(clippy::type_complexity)]
    pub fn encode(
        &mut self,
        series: &MultivariateSeries,
    ) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let batch = make_windows(series, self.spec.window)?;
        let mut zl = Vec::with_capacity(batch.len());
        let mut zg = Vec::with_capacity(batch.len());
        for i in 0..batch.len() {
            let (_, l, gl) = decode_mean(&mut self.graph, &self.model, &window_tensor(&batch, i))?;
            zl.push(l.iter().map(|v| v.as_f64()).collect());
            zg.push(gl.iter().map(|v| v.as_f64()).collect());
        }
        Ok((zl, zg))
    }

    /// Decodes every window from posterior means and stitches the result.
    /// `n_train_windows` of `None` uses the split stored with the run.
    pub fn reconstruct(
        &mut self,
        series: &MultivariateSeries,
        n_train_windows: Option<usize>,
    ) -> Result<Reconstruction> {
        let batch = make_windows(series, self.spec.window)?;
        let n_train = n_train_windows.unwrap_or(self.n_train_windows);
        if n_train == 0 {
            return Err(DlgError::State(
                "no training split recorded for the residual band".into(),
            ));
        }
        let f_n = series.n_features();
        let mut values = vec![Vec::with_capacity(series.len()); f_n];
        let mut sse = vec![0.0; f_n];
        let mut cnt = vec![0usize; f_n];
        for (i, w) in batch.windows.iter().enumerate() {
            let (r, _, _) = decode_mean(&mut self.graph, &self.model, &window_tensor(&batch, i))?;
            for f in 0..f_n {
                for s in 0..w.valid_len {
                    let idx = f * batch.window_size + s;
                    let v = r[idx].as_f64();
                    values[f].push(v);
                    if i < n_train && w.mask[idx] {
                        sse[f] += (v - w.values[idx]).powi(2);
                        cnt[f] += 1;
                    }
                }
            }
        }
        let sigma = sse
            .iter()
            .zip(&cnt)
            .map(|(&s, &c)| {
                if c == 0 {
                    f64::NAN
                } else {
                    (s / c as f64).sqrt()
                }
            })
            .collect();
        Ok(Reconstruction { values, sigma })
    }

    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let mut ckpt = self.graph.to_checkpoint();
        ckpt.meta.insert("model".into(), "dlg".into());
        ckpt.meta.insert("config".into(), cfg.to_text().into());
        ckpt.meta.insert(
            "spec".into(),
            serde_json::to_value(&self.spec).unwrap_or_default(),
        );
        ckpt.meta
            .insert("n_train_windows".into(), self.n_train_windows.into());
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta.get("model").and_then(|v| v.as_str()) != Some("dlg") {
            return Err(DlgError::State("checkpoint is not a DLG model".into()));
        }
        let spec: DlgSpec = meta_field(ckpt, "spec")?;
        let n_train = ckpt
            .meta
            .get("n_train_windows")
            .and_then(|v| v.as_u64())
            .unwrap_or(0) as usize;
        let mut g = Graph::new();
        let mut rng = stream(0, Stream::Init);
        let model = DlgModel::new(&mut g, &spec, &mut rng)?;
        g.load_checkpoint(ckpt)?;
        Ok(Self {
            graph: g,
            model,
            spec,
            log: Vec::new(),
            n_train_windows: n_train,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> DlgSpec {
        DlgSpec {
            features: 2,
            window: 8,
            local: 4,
            global: 2,
            hidden: 4,
            kernels: vec!["rbf".into(), "matern32".into()],
            scales: vec![1.0, 0.5],
            linear: false,
        }
    }

    fn tiny_batch(k: usize) -> Vec<MaskedWindow<f64>> {
        (0..k)
            .map(|i| {
                let v: Vec<f64> = (0..16).map(|t| ((t + 3 * i) as f64 * 0.7).sin()).collect();
                let mut m = vec![1.0; 16];
                m[5] = 0.0;
                MaskedWindow {
                    values: Tensor::matrix(2, 8, v).unwrap(),
                    mask: Tensor::matrix(2, 8, m).unwrap(),
                }
            })
            .collect()
    }

    #[test]
    fn batching_merges_single_tail() {
        assert_eq!(
            consecutive_batches(0..11, 5),
            vec![(0..5).collect::<Vec<_>>(), (5..11).collect()]
        );
        assert_eq!(consecutive_batches(0..12, 5).len(), 3);
        assert_eq!(consecutive_batches(0..1, 5), vec![vec![0]]);
    }

    #[test]
    fn zero_weights_reduce_to_mse() {
        let mut g = Graph::<f64>::new();
        let mut rng = stream(1, Stream::Init);
        let model = DlgModel::new(&mut g, &tiny_spec(), &mut rng).unwrap();
        let batch = tiny_batch(3);
        let f = model.factors::<f64>(3).unwrap();
        let mut r = stream(1, Stream::Reparam);
        let (loss, terms) = elbo_loss(&mut g, &model, &batch, &f, 0.0, 0.0, &mut r).unwrap();
        assert_eq!(g.item(loss), terms.mse);
        assert!(terms.kl_local >= 0.0 && terms.kl_global >= 0.0);
    }

    #[test]
    fn terms_recombine() {
        let mut g = Graph::<f64>::new();
        let mut rng = stream(2, Stream::Init);
        let model = DlgModel::new(&mut g, &tiny_spec(), &mut rng).unwrap();
        let batch = tiny_batch(4);
        let f = model.factors::<f64>(4).unwrap();
        let mut r = stream(2, Stream::Reparam);
        let (loss, terms) = elbo_loss(&mut g, &model, &batch, &f, 0.01, 0.8, &mut r).unwrap();
        assert!((g.item(loss) - terms.recombine(0.01, 0.8)).abs() < 1e-12);
        assert_eq!(g.item(loss), terms.total);
    }

    #[test]
    fn counterfactual_needs_two() {
        let mut g = Graph::<f64>::new();
        let mut rng = stream(3, Stream::Init);
        let model = DlgModel::new(&mut g, &tiny_spec(), &mut rng).unwrap();
        let zl = g.constant(Tensor::vector(vec![0.0; 4]));
        let zg = g.constant(Tensor::vector(vec![0.0; 2]));
        assert!(matches!(
            counterfactual_reg(&mut g, &model, &[zl], &[zg], &mut rng),
            Err(DlgError::Parameter(_))
        ));
        // identical global codes give exactly zero
        let reg = counterfactual_reg(&mut g, &model, &[zl, zl], &[zg, zg], &mut rng).unwrap();
        assert_eq!(g.item(reg), 0.0);
    }
}
