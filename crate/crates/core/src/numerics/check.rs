use super::graph::{Graph, Var};
use crate::error::Result;
use crate::scalar::{lit, Scalar};

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Compares the reverse-mode gradient of `loss` with respect to `leaf` against
/// central differences and returns
/// `max |analytic - numeric| / max(1, |analytic|, |numeric|)` over elements.
///
/// The graph is left evaluated at the original leaf value.
pub fn gradient_check<S: Scalar>(graph: &mut Graph<S>, loss: Var, leaf: Var, epsilon: S) -> Result<S> {
    graph.backward(loss)?;
    let analytic = match graph.grad(leaf) {
        Some(g) => g.clone(),
        None => super::Tensor::zeros(graph.value(leaf).shape().to_vec()),
    };
    let original = graph.value(leaf).clone();
    let two_eps = epsilon + epsilon;
    let mut worst = S::zero();
    for i in 0..original.len() {
        let mut probe = original.clone();
        probe.data_mut()[i] = original.data()[i] + epsilon;
        graph.set_leaf(leaf, probe.clone())?;
        graph.recompute()?;
        let plus = graph.value(loss).item();
        probe.data_mut()[i] = original.data()[i] - epsilon;
        graph.set_leaf(leaf, probe)?;
        graph.recompute()?;
        let minus = graph.value(loss).item();
        let numeric = (plus - minus) / two_eps;
        let a = analytic.data()[i];
        let denom = S::one().max(a.abs()).max(numeric.abs());
        worst = worst.max((a - numeric).abs() / denom);
    }
    graph.set_leaf(leaf, original)?;
    graph.recompute()?;
    Ok(worst)
}

/// Runs [`gradient_check`] on every trainable leaf and returns `(name, error)` pairs.
pub fn gradient_check_all<S: Scalar>(graph: &mut Graph<S>, loss: Var, epsilon: S) -> Result<Vec<(String, S)>> {
    let params: Vec<(String, Var)> = graph.params().map(|(n, v)| (n.to_string(), v)).collect();
    params.into_iter().map(|(name, v)| gradient_check(graph, loss, v, epsilon).map(|e| (name, e))).collect()
}

pub fn default_epsilon<S: Scalar>() -> S {
    lit(DEFAULT_EPSILON)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn linear_loss_is_exact() {
        let mut g = Graph::<f64>::new();
        let w = g.param("w", &Tensor::from_vec(vec![3], vec![0.5, -0.25, 2.0]).unwrap());
        let c = g.input("c", Tensor::from_vec(vec![3], vec![3.0, -1.0, 0.5]).unwrap());
        let p = g.mul(w, c).unwrap();
        let l = g.sum(p).unwrap();
        assert!(gradient_check(&mut g, l, w, 1e-5).unwrap() <= 1e-9);
    }

    #[test]
    fn constant_loss_has_zero_error() {
        let mut g = Graph::<f64>::new();
        let w = g.param("w", &Tensor::ones(vec![2]));
        let c = g.input("c", Tensor::ones(vec![2]));
        let l = g.sum(c).unwrap();
        assert_eq!(gradient_check(&mut g, l, w, 1e-5).unwrap(), 0.0);
    }
}
