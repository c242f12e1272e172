//! Layers expressed over [`Graph`] with parameters held in a [`ParamStore`].

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::scalar::{lit, Scalar};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Affine map `x W + b` on row vectors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn register<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let weight = format!("{name}.w");
        store.insert_uniform(rng, weight.clone(), &[in_dim, out_dim], in_dim);
        let bias = bias.then(|| {
            let b = format!("{name}.b");
            store.insert_uniform(rng, b.clone(), &[1, out_dim], in_dim);
            b
        });
        Linear { weight, bias, in_dim, out_dim }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let cols = g.value(x).shape().last().copied();
        if cols != Some(self.in_dim) {
            return Err(Error::shape(
                "linear",
                format!("`{}` expects {} input features, got {:?}", self.weight, self.in_dim, g.value(x).shape()),
            ));
        }
        let w = store.bind(g, &self.weight)?;
        let y = g.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = store.bind(g, b)?;
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Layer normalization over the feature axis with learned gain and shift.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: String,
    pub shift: String,
}

impl LayerNorm {
    pub fn register<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Self {
        let gain = format!("{name}.gain");
        let shift = format!("{name}.shift");
        store.insert(gain.clone(), Tensor::ones(vec![1, dim]));
        store.insert(shift.clone(), Tensor::zeros(vec![1, dim]));
        LayerNorm { gain, shift }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, lit(LAYER_NORM_EPS))?;
        let gain = store.bind(g, &self.gain)?;
        let shift = store.bind(g, &self.shift)?;
        let scaled = g.mul(n, gain)?;
        g.add(scaled, shift)
    }
}

/// Two-layer position-wise network with a tanh hidden layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn register<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        FeedForward {
            inner: Linear::register(store, rng, &format!("{name}.in"), dim, hidden, true),
            outer: Linear::register(store, rng, &format!("{name}.out"), hidden, dim, true),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let h = self.inner.forward(g, store, x)?;
        let h = g.tanh(h)?;
        self.outer.forward(g, store, h)
    }
}

/// Scaled dot-product attention split across heads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

/// Output of an attention call together with the per-head probability matrices.
pub struct Attended {
    pub output: Var,
    pub probs: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn register<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument(format!("{heads} heads do not divide width {dim}")));
        }
        Ok(MultiHeadAttention {
            query: Linear::register(store, rng, &format!("{name}.q"), dim, dim, true),
            key: Linear::register(store, rng, &format!("{name}.k"), dim, dim, true),
            value: Linear::register(store, rng, &format!("{name}.v"), dim, dim, true),
            output: Linear::register(store, rng, &format!("{name}.o"), dim, dim, true),
            heads,
        })
    }

    /// `query_in`: Tq×d, `memory`: Tk×d. `mask`, when given, is a Tq×Tk row-major
    /// table of allowed positions.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        query_in: Var,
        memory: Var,
        mask: Option<Arc<Vec<bool>>>,
    ) -> Result<Attended> {
        let q = self.query.forward(g, store, query_in)?;
        let k = self.key.forward(g, store, memory)?;
        let v = self.value.forward(g, store, memory)?;
        let dim = self.query.out_dim;
        let dh = dim / self.heads;
        let scale = S::one() / lit::<S>(dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(q, 1, h * dh, dh)?;
            let kh = g.slice(k, 1, h * dh, dh)?;
            let vh = g.slice(v, 1, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale)?;
            let p = match &mask {
                Some(m) => g.masked_softmax(scores, 1, Arc::clone(m))?,
                None => g.softmax(scores, 1)?,
            };
            outs.push(g.matmul(p, vh)?);
            probs.push(p);
        }
        let joined = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
        let output = self.output.forward(g, store, joined)?;
        Ok(Attended { output, probs })
    }
}

/// Allows key `j` for query `i` when `|i - j| <= half_width`.
pub fn band_mask(queries: usize, keys: usize, half_width: usize) -> Arc<Vec<bool>> {
    Arc::new((0..queries).flat_map(|i| (0..keys).map(move |j| i.abs_diff(j) <= half_width)).collect())
}

/// Allows key `j` for query `i` when `j <= i`.
pub fn causal_mask(queries: usize, keys: usize) -> Arc<Vec<bool>> {
    Arc::new((0..queries).flat_map(|i| (0..keys).map(move |j| j <= i)).collect())
}

/// Sinusoidal position table, rows = positions.
pub fn sinusoidal_positions<S: Scalar>(len: usize, dim: usize) -> Tensor<S> {
    let mut data = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            data.push(S::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::from_vec(vec![len, dim], data).expect("shape")
}
