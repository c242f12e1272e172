use indexmap::IndexMap;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

/// Learning rate halves every this many epochs.
pub const DECAY_PERIOD_EPOCHS: u64 = 80;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S: Scalar = f64> {
    pub lr: S,
    pub base_lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    pub step: u64,
    /// First and second moment per parameter name.
    pub moments: IndexMap<String, (Tensor<S>, Tensor<S>)>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(base_lr: S, beta1: S, beta2: S, eps: S) -> Self {
        AdamState { lr: base_lr, base_lr, beta1, beta2, eps, step: 0, moments: IndexMap::new() }
    }

    /// Base learning rate 1e-4 with betas (0.9, 0.999).
    pub fn with_defaults() -> Self {
        Self::new(lit(1e-4), lit(0.9), lit(0.999), lit(1e-8))
    }
}

/// One bias-corrected Adam update of every parameter; gradients are cleared afterwards.
pub fn adam_step<S: Scalar>(params: &mut ParamStore<S>, state: &mut AdamState<S>) -> Result<()> {
    if let Some((name, _)) = params.iter().find(|(_, p)| p.grad.is_none()) {
        return Err(Error::MissingGradient(name.to_string()));
    }
    state.step += 1;
    let t = i32::try_from(state.step).unwrap_or(i32::MAX);
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = S::one() - b1.powi(t);
    let bc2 = S::one() - b2.powi(t);
    for (name, p) in params.iter_mut() {
        let grad = p.grad.take().expect("checked above");
        let shape = p.value.shape().to_vec();
        let (m, v) = state
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (Tensor::zeros(shape.clone()), Tensor::zeros(shape.clone())));
        if m.shape() != shape.as_slice() {
            return Err(Error::shape("adam_step", format!("moment {:?} for parameter {shape:?}", m.shape())));
        }
        let (md, vd) = (m.data_mut(), v.data_mut());
        for (i, (w, &g)) in p.value.data_mut().iter_mut().zip(grad.data()).enumerate() {
            md[i] = b1 * md[i] + (S::one() - b1) * g;
            vd[i] = b2 * vd[i] + (S::one() - b2) * g * g;
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            *w -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Sets `lr = base_lr * 0.5^floor(epoch / 80)`.
pub fn decay_lr<S: Scalar>(state: &mut AdamState<S>, epoch: u64) {
    let halvings = i32::try_from(epoch / DECAY_PERIOD_EPOCHS).unwrap_or(i32::MAX);
    state.lr = state.base_lr * lit::<S>(0.5).powi(halvings);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[(&str, f64, Option<f64>)]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (name, v, g) in values {
            s.insert(*name, Tensor::scalar(*v));
            s.get_mut(name).unwrap().grad = g.map(Tensor::scalar);
        }
        s
    }

    #[test]
    fn zero_grad_is_fixed_point() {
        let mut p = store(&[("a", 0.7, Some(0.0))]);
        let mut st = AdamState::with_defaults();
        adam_step(&mut p, &mut st).unwrap();
        assert_eq!(p.get("a").unwrap().item(), 0.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = v_hat = 1 after bias correction, so the step is lr / (1 + eps).
        let mut p = store(&[("p", 1.0, Some(1.0))]);
        let mut st = AdamState::new(0.1, 0.9, 0.999, 1e-8);
        adam_step(&mut p, &mut st).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.get("p").unwrap().item() - expected).abs() < 1e-15);
        assert!((p.get("p").unwrap().item() - 0.9).abs() < 1e-8);
        assert!(p.get_mut("p").unwrap().grad.is_none());
    }

    #[test]
    fn symmetric_params_stay_identical() {
        let mut p = store(&[("a", 0.3, Some(-0.2)), ("b", 0.3, Some(-0.2))]);
        let mut st = AdamState::with_defaults();
        adam_step(&mut p, &mut st).unwrap();
        assert_eq!(p.get("a"), p.get("b"));
    }

    #[test]
    fn missing_grad_errors() {
        let mut p = store(&[("a", 0.3, None)]);
        let mut st = AdamState::with_defaults();
        assert!(matches!(adam_step(&mut p, &mut st), Err(Error::MissingGradient(n)) if n == "a"));
    }

    #[test]
    fn lr_halves_every_80_epochs() {
        let mut st = AdamState::<f64>::with_defaults();
        decay_lr(&mut st, 0);
        assert_eq!(st.lr, 1e-4);
        decay_lr(&mut st, 79);
        assert_eq!(st.lr, 1e-4);
        decay_lr(&mut st, 80);
        assert_eq!(st.lr, 5e-5);
        decay_lr(&mut st, 160);
        assert_eq!(st.lr, 2.5e-5);
    }
}
