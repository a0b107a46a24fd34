//! Fixed architectures: dilated causal CNN encoder, pair discriminator,
//! recurrent decoder and linear classifier head.
//!
//! Every network registers its parameters on a shared [`Graph`] under a name
//! prefix and keeps only [`Var`] handles, so several networks can be trained
//! jointly by one optimizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ndtensor::{Graph, Result, Tensor, TensorError, Var};
use crate::scalar::Scalar;

fn uniform_init<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    shape: Vec<usize>,
    fan_in: usize,
) -> Tensor<T> {
    scaled_uniform_init(rng, shape, fan_in, 1.0)
}

/// He-uniform bound `√(6 / fan_in)` for weights feeding a ReLU.
fn relu_init<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    shape: Vec<usize>,
    fan_in: usize,
) -> Tensor<T> {
    scaled_uniform_init(rng, shape, fan_in, 6f64.sqrt())
}

fn scaled_uniform_init<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    shape: Vec<usize>,
    fan_in: usize,
    gain: f64,
) -> Tensor<T> {
    let bound = gain / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::lit(rng.random_range(-bound..=bound)))
        .collect();
    Tensor { shape, data }
}

fn check_len<T: Scalar>(g: &Graph<T>, op: &'static str, x: Var, want: usize) -> Result<()> {
    let got = g.value(x).numel();
    if got != want {
        return Err(TensorError::Dimension {
            op,
            detail: format!("expected {want} values, got {got}"),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub in_features: usize,
    pub window: usize,
    pub kernel: usize,
    pub channels: Vec<usize>,
    pub dilations: Vec<usize>,
    pub out: usize,
    /// Emit `(μ, log σ²)`, doubling the output width.
    pub variational: bool,
    pub first_layer_bias: bool,
    /// Identity activations instead of ReLU.
    #[serde(default)]
    pub linear: bool,
}

impl EncoderSpec {
    /// Three layers, `k = 3`, widths 8/16/16, dilations 1/2/4.
    pub fn standard(in_features: usize, window: usize, out: usize, variational: bool) -> Self {
        Self {
            in_features,
            window,
            kernel: 3,
            channels: vec![8, 16, 16],
            dilations: vec![1, 2, 4],
            out,
            variational,
            first_layer_bias: true,
            linear: false,
        }
    }

    pub fn receptive_field(&self) -> usize {
        1 + (self.kernel - 1) * self.dilations.iter().sum::<usize>()
    }

    pub fn output_len(&self) -> usize {
        if self.variational {
            2 * self.out
        } else {
            self.out
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TensorError::Parameter(m));
        if self.in_features == 0 || self.window == 0 || self.out == 0 {
            return bad("encoder sizes must be positive".into());
        }
        if self.kernel == 0 || self.dilations.contains(&0) {
            return bad("kernel size and dilations must be at least 1".into());
        }
        if self.channels.len() != self.dilations.len() || self.channels.is_empty() {
            return bad(format!(
                "{} channel widths for {} dilations",
                self.channels.len(),
                self.dilations.len()
            ));
        }
        Ok(())
    }
}

/// Dilated causal CNN followed by global max pooling and a linear layer.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub spec: EncoderSpec,
    conv_w: Vec<Var>,
    conv_b: Vec<Option<Var>>,
    lin_w: Var,
    lin_b: Var,
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        g: &mut Graph<T>,
        prefix: &str,
        spec: EncoderSpec,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let mut conv_w = Vec::new();
        let mut conv_b = Vec::new();
        let mut c_in = spec.in_features;
        for (i, &c_out) in spec.channels.iter().enumerate() {
            let fan_in = c_in * spec.kernel;
            conv_w.push(g.param(
                &format!("{prefix}.conv{i}.w"),
                relu_init(rng, vec![c_out, c_in, spec.kernel], fan_in),
            )?);
            let b = if i > 0 || spec.first_layer_bias {
                Some(g.param(
                    &format!("{prefix}.conv{i}.b"),
                    uniform_init(rng, vec![c_out], fan_in),
                )?)
            } else {
                None
            };
            conv_b.push(b);
            c_in = c_out;
        }
        let n_out = spec.output_len();
        let lin_w = g.param(
            &format!("{prefix}.lin.w"),
            uniform_init(rng, vec![n_out, c_in], c_in),
        )?;
        let lin_b = g.param(
            &format!("{prefix}.lin.b"),
            uniform_init(rng, vec![n_out], c_in),
        )?;
        Ok(Self {
            spec,
            conv_w,
            conv_b,
            lin_w,
            lin_b,
        })
    }

    pub fn params(&self) -> Vec<Var> {
        let mut p = self.conv_w.clone();
        p.extend(self.conv_b.iter().flatten());
        p.push(self.lin_w);
        p.push(self.lin_b);
        p
    }

    pub fn first_conv_weight(&self) -> Var {
        self.conv_w[0]
    }

    /// Activations of the last conv layer, `C × δ`, before pooling.
    pub fn features<T: Scalar>(&self, g: &mut Graph<T>, window: Var) -> Result<Var> {
        let s = &self.spec;
        if g.shape(window) != [s.in_features, s.window] {
            return Err(TensorError::Dimension {
                op: "encode",
                detail: format!(
                    "window {:?}, expected [{}, {}]",
                    g.shape(window),
                    s.in_features,
                    s.window
                ),
            });
        }
        let mut h = window;
        for ((&w, b), &d) in self.conv_w.iter().zip(&self.conv_b).zip(&s.dilations) {
            h = g.conv1d_dilated(h, w, d)?;
            if let Some(b) = b {
                h = g.add_channel_bias(h, *b)?;
            }
            if !s.linear {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// Representation of one `F × δ` window.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, window: Var) -> Result<Var> {
        let h = self.features(g, window)?;
        let pooled = g.global_max_pool(h)?;
        g.linear(self.lin_w, self.lin_b, pooled)
    }

    /// Splits a variational output into `(μ, log σ²)`.
    pub fn split<T: Scalar>(&self, g: &mut Graph<T>, out: Var) -> Result<(Var, Var)> {
        if !self.spec.variational {
            return Err(TensorError::Contract(
                "split on a deterministic encoder".into(),
            ));
        }
        let m = self.spec.out;
        Ok((g.slice(out, 0, m)?, g.slice(out, m, m)?))
    }

    /// Forward pass on frozen weights returning plain values.
    pub fn encode_values<T: Scalar>(&self, g: &mut Graph<T>, window: Tensor<T>) -> Result<Vec<T>> {
        let x = g.constant(window);
        let z = self.forward(g, x)?;
        let v = g.value(z).data().to_vec();
        g.reset();
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub repr: usize,
    pub hidden: usize,
}

/// `σ(w₂ · relu(W₁ [z_a; z_b] + b₁) + b₂)`.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub spec: DiscriminatorSpec,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl Discriminator {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        g: &mut Graph<T>,
        prefix: &str,
        spec: DiscriminatorSpec,
        rng: &mut R,
    ) -> Result<Self> {
        if spec.repr == 0 || spec.hidden == 0 {
            return Err(TensorError::Parameter(
                "discriminator sizes must be positive".into(),
            ));
        }
        let n_in = 2 * spec.repr;
        let w1 = g.param(
            &format!("{prefix}.w1"),
            relu_init(rng, vec![spec.hidden, n_in], n_in),
        )?;
        let b1 = g.param(
            &format!("{prefix}.b1"),
            uniform_init(rng, vec![spec.hidden], n_in),
        )?;
        let w2 = g.param(
            &format!("{prefix}.w2"),
            uniform_init(rng, vec![1, spec.hidden], spec.hidden),
        )?;
        let b2 = g.param(
            &format!("{prefix}.b2"),
            uniform_init(rng, vec![1], spec.hidden),
        )?;
        Ok(Self {
            spec,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn params(&self) -> Vec<Var> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }

    /// Probability that the pair shares a neighborhood, shape `[1]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, za: Var, zb: Var) -> Result<Var> {
        check_len(g, "discriminate", za, self.spec.repr)?;
        check_len(g, "discriminate", zb, self.spec.repr)?;
        let x = g.concat(&[za, zb])?;
        let h = g.linear(self.w1, self.b1, x)?;
        let h = g.relu(h);
        let o = g.linear(self.w2, self.b2, h)?;
        Ok(g.sigmoid(o))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderSpec {
    pub local: usize,
    pub global: usize,
    pub hidden: usize,
    pub features: usize,
    pub steps: usize,
    /// Identity recurrence instead of `tanh`.
    #[serde(default)]
    pub linear: bool,
}

/// Elman RNN fed the same `[z_l; z_g]` at each step, `h₀ = 0`, with a linear
/// readout per step.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub spec: DecoderSpec,
    w_in: Var,
    w_h: Var,
    b_h: Var,
    w_out: Var,
    b_out: Var,
}

impl Decoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        g: &mut Graph<T>,
        prefix: &str,
        spec: DecoderSpec,
        rng: &mut R,
    ) -> Result<Self> {
        if spec.hidden == 0
            || spec.features == 0
            || spec.steps == 0
            || spec.local + spec.global == 0
        {
            return Err(TensorError::Parameter(
                "decoder sizes must be positive".into(),
            ));
        }
        let n_in = spec.local + spec.global;
        let h = spec.hidden;
        let w_in = g.param(
            &format!("{prefix}.w_in"),
            uniform_init(rng, vec![h, n_in], n_in),
        )?;
        let w_h = g.param(&format!("{prefix}.w_h"), uniform_init(rng, vec![h, h], h))?;
        let b_h = g.param(&format!("{prefix}.b_h"), uniform_init(rng, vec![h], h))?;
        let w_out = g.param(
            &format!("{prefix}.w_out"),
            uniform_init(rng, vec![spec.features, h], h),
        )?;
        let b_out = g.param(
            &format!("{prefix}.b_out"),
            uniform_init(rng, vec![spec.features], h),
        )?;
        Ok(Self {
            spec,
            w_in,
            w_h,
            b_h,
            w_out,
            b_out,
        })
    }

    pub fn params(&self) -> Vec<Var> {
        vec![self.w_in, self.w_h, self.b_h, self.w_out, self.b_out]
    }

    /// Generated window, `F × δ`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, z_l: Var, z_g: Option<Var>) -> Result<Var> {
        let s = &self.spec;
        check_len(g, "decode", z_l, s.local)?;
        let u = match z_g {
            Some(zg) => {
                check_len(g, "decode", zg, s.global)?;
                g.concat(&[z_l, zg])?
            }
            None if s.global == 0 => g.reshape(z_l, vec![s.local])?,
            None => {
                return Err(TensorError::Dimension {
                    op: "decode",
                    detail: "missing global code".into(),
                });
            }
        };
        let drive = g.linear(self.w_in, self.b_h, u)?;
        let mut h: Option<Var> = None;
        let mut outs = Vec::with_capacity(s.steps);
        for _ in 0..s.steps {
            let pre = match h {
                None => drive,
                Some(prev) => {
                    let col = g.reshape(prev, vec![s.hidden, 1])?;
                    let rec = g.matmul(self.w_h, col)?;
                    let rec = g.reshape(rec, vec![s.hidden])?;
                    g.add(drive, rec)?
                }
            };
            let ht = if s.linear { pre } else { g.tanh(pre) };
            outs.push(g.linear(self.w_out, self.b_out, ht)?);
            h = Some(ht);
        }
        let flat = g.concat(&outs)?;
        let by_step = g.reshape(flat, vec![s.steps, s.features])?;
        g.transpose(by_step)
    }
}

/// Dropout followed by a linear map to class scores.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub n_in: usize,
    pub n_classes: usize,
    pub dropout: f64,
    w: Var,
    b: Var,
}

impl ClassifierHead {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        g: &mut Graph<T>,
        prefix: &str,
        n_in: usize,
        n_classes: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if n_in == 0 || n_classes == 0 || !(0.0..1.0).contains(&dropout) {
            return Err(TensorError::Parameter(format!(
                "classifier needs positive sizes and dropout in [0,1), got {n_in}, {n_classes}, {dropout}"
            )));
        }
        let w = g.param(
            &format!("{prefix}.w"),
            uniform_init(rng, vec![n_classes, n_in], n_in),
        )?;
        let b = g.param(
            &format!("{prefix}.b"),
            uniform_init(rng, vec![n_classes], n_in),
        )?;
        Ok(Self {
            n_in,
            n_classes,
            dropout,
            w,
            b,
        })
    }

    pub fn params(&self) -> Vec<Var> {
        vec![self.w, self.b]
    }

    /// Class scores. Passing an RNG enables inverted dropout; `None` is
    /// evaluation mode.
    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        z: Var,
        train_rng: Option<&mut R>,
    ) -> Result<Var> {
        check_len(g, "classify", z, self.n_in)?;
        let z = match train_rng {
            Some(rng) if self.dropout > 0.0 => {
                let keep = 1.0 - self.dropout;
                let mask = (0..self.n_in)
                    .map(|_| {
                        if rng.random::<f64>() < keep {
                            T::lit(1.0 / keep)
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                let m = g.constant(Tensor::vector(mask));
                let flat = g.reshape(z, vec![self.n_in])?;
                g.mul(flat, m)?
            }
            _ => z,
        };
        g.linear(self.w, self.b, z)
    }
}
