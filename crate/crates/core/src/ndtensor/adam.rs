use std::collections::HashMap;

use super::{dim_err, Graph, Result, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len()
    {
        return dim_err(
            "adam_step",
            format!(
                "params {}, grads {}, state {}",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        );
    }
    state.step += 1;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    let t = state.step as i32;
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    for k in 0..params.len() {
        let g = grads[k];
        state.m[k] = b1 * state.m[k] + (T::one() - b1) * g;
        state.v[k] = b2 * state.v[k] + (T::one() - b2) * g * g;
        let m_hat = state.m[k] / bc1;
        let v_hat = state.v[k] / bc2;
        params[k] = params[k] - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Adam over the parameters of a [`Graph`].
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    states: HashMap<Var, AdamState<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            states: HashMap::new(),
        }
    }

    /// Updates each listed parameter that requires a gradient. Parameters
    /// without an accumulated gradient are treated as having a zero gradient.
    pub fn step(&mut self, graph: &mut Graph<T>, params: &[Var]) -> Result<()> {
        for &p in params {
            if !graph.requires_grad(p) {
                continue;
            }
            let n = graph.value(p).numel();
            let state = self.states.entry(p).or_insert_with(|| AdamState::new(n));
            let (values, grad) = graph.value_and_grad_mut(p);
            match grad {
                Some(g) => {
                    let g = g.to_vec();
                    adam_step(values, &g, state, &self.cfg)?;
                }
                None => adam_step(values, &vec![T::zero(); n], state, &self.cfg)?,
            }
        }
        Ok(())
    }

    pub fn state(&self, p: Var) -> Option<&AdamState<T>> {
        self.states.get(&p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut p = vec![1.5f64, -2.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![1.5, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig::with_lr(0.001);
        let mut p = vec![0.0f64];
        let mut st = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut st, &cfg).unwrap();
        // closed form: lr * g / (sqrt(g^2) + eps)
        let expected = -0.001 * 1.0 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15, "{}", p[0]);
    }

    #[test]
    fn quadratic_converges() {
        let cfg = AdamConfig::with_lr(0.1);
        let mut x = vec![1.0f64];
        let mut st = AdamState::new(1);
        for _ in 0..100 {
            let g = [2.0 * x[0]];
            adam_step(&mut x, &g, &mut st, &cfg).unwrap();
        }
        assert!(x[0].abs() < 0.1, "{}", x[0]);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut p = vec![0.0f64; 2];
        let mut st = AdamState::new(2);
        let err = adam_step(&mut p, &[1.0], &mut st, &AdamConfig::default()).unwrap_err();
        assert!(matches!(
            err,
            crate::ndtensor::TensorError::Dimension { .. }
        ));
    }

    #[test]
    fn works_for_f32() {
        let mut p = vec![1.0f32];
        let mut st = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut st, &AdamConfig::with_lr(0.5)).unwrap();
        assert!(p[0] < 1.0);
    }
}
