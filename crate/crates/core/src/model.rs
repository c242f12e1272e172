//! Full model: encoder, branch decoders and mask, with a teacher-forced graph
//! forward for training and an autoregressive decode for inference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoder::{
    decode_sequence, BranchDecoder, BranchMask, DecodedSequence, DecoderConfig, StyleVector, MASK_PARAM,
};
use crate::encoder::{encode, Branch, DurationConfig, EncodedVars, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::losses::{total_loss_var, LossVars};
use crate::mesh_motion::{MotionSequence, NeutralGeometry};
use crate::numerics::{sigmoid, Graph, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

pub const ENCODER_HEADS: usize = 2;
pub const DECODER_HEADS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d0: usize,
    pub d: usize,
    pub d1: usize,
    pub encoder_heads: usize,
    pub decoder_heads: usize,
    pub fps: f64,
    pub durations: DurationConfig,
    pub n_vertices: usize,
    pub n_subjects: usize,
    pub single_branch: bool,
    pub disable_hierarchy: bool,
}

impl ModelConfig {
    pub fn branches(&self) -> Vec<Branch> {
        if self.single_branch {
            vec![Branch::Strong]
        } else {
            vec![Branch::Strong, Branch::Weak]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.d0, self.d, self.d1, self.encoder_heads, self.decoder_heads, self.n_vertices, self.n_subjects];
        if dims.contains(&0) {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        if self.d0 % self.encoder_heads != 0 || self.d % self.decoder_heads != 0 {
            return Err(Error::Config("attention heads must divide the widths they split".into()));
        }
        if !(self.fps > 0.0) {
            return Err(Error::Config(format!("fps must be positive, got {}", self.fps)));
        }
        self.durations.validate()
    }

    fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            d0: self.d0,
            d: self.d,
            d1: self.d1,
            heads: self.encoder_heads,
            fps: self.fps,
            durations: self.durations,
            hierarchy: !self.disable_hierarchy,
            branches: self.branches(),
        }
    }

    fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig { d: self.d, heads: self.decoder_heads, n_vertices: self.n_vertices, n_subjects: self.n_subjects }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub decoders: Vec<BranchDecoder>,
}

/// Graph handles of a teacher-forced pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub encoded: EncodedVars,
    /// Combined prediction, `T x V x 3`.
    pub pred: Var,
    /// Absolute per-branch predictions, `T x V x 3`.
    pub branch_outputs: Vec<(Branch, Var)>,
    /// Strong-branch mask `V x 1`; absent for a single branch.
    pub mask: Option<Var>,
}

impl Model {
    /// Registers every parameter the configuration uses. `mask` gives the
    /// initial logits and is required exactly when two branches are used.
    pub fn register<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        config: &ModelConfig,
        mask: Option<BranchMask<S>>,
    ) -> Result<Self> {
        config.validate()?;
        // Separate streams keep each component's draws fixed when another is ablated away.
        let mut enc_rng = ChaCha8Rng::from_rng(rng);
        let mut branch_rngs = [ChaCha8Rng::from_rng(rng), ChaCha8Rng::from_rng(rng)];
        let enc_config = EncoderConfig { branches: Vec::new(), ..config.encoder_config() };
        let mut encoder = Encoder::register(store, &mut enc_rng, &enc_config)?;
        let dc = config.decoder_config();
        let mut decoders = Vec::new();
        for b in config.branches() {
            let r = &mut branch_rngs[b as usize];
            encoder.add_generator(store, r, b, &config.encoder_config());
            decoders.push(BranchDecoder::register(store, r, b, &dc)?);
        }
        match (config.single_branch, mask) {
            (true, None) => {}
            (false, Some(m)) if m.num_vertices() == config.n_vertices => {
                store.insert(MASK_PARAM, m.logits.reshape(vec![config.n_vertices, 1])?);
            }
            (false, Some(m)) => {
                return Err(Error::shape(
                    "mask",
                    format!("{} logits for {} vertices", m.num_vertices(), config.n_vertices),
                ))
            }
            (true, Some(_)) => return Err(Error::Config("single-branch models have no learnable mask".into())),
            (false, None) => return Err(Error::Config("dual-branch models need a mask initialization".into())),
        }
        Ok(Model { config: config.clone(), encoder, decoders })
    }

    /// Current strong-branch mask values; `None` for a single branch.
    pub fn mask_values<S: Scalar>(&self, store: &ParamStore<S>) -> Option<Vec<S>> {
        store.get(MASK_PARAM).map(|t| t.data().iter().map(|&x| sigmoid(x)).collect())
    }

    /// Teacher-forced forward: frame `t` is decoded from the masked offsets of
    /// `history` frames `< t`.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        acoustic: &Tensor<S>,
        history: &MotionSequence<S>,
        neutral: &NeutralGeometry<S>,
        style: StyleVector,
    ) -> Result<ForwardVars> {
        let t = history.frames();
        let v = self.config.n_vertices;
        if acoustic.shape()[0] != t {
            return Err(Error::shape("model", format!("{} feature frames for {t} motion frames", acoustic.shape()[0])));
        }
        if history.num_vertices() != v || neutral.num_vertices() != v {
            return Err(Error::shape("model", format!("model expects {v} vertices")));
        }
        let a = g.input("acoustic", acoustic.clone());
        let branches = self.config.branches();
        let encoded = self.encoder.forward(g, store, a, &branches)?;

        let mask = match store.get(MASK_PARAM) {
            Some(_) => {
                let logits = store.bind(g, MASK_PARAM)?;
                Some(g.sigmoid(logits)?)
            }
            None => None,
        };
        let h = neutral.vertices().data();
        let offsets = (t > 1)
            .then(|| {
                let n = 3 * v;
                let data: Vec<S> =
                    history.vertices().data()[..(t - 1) * n].iter().enumerate().map(|(i, &y)| y - h[i % n]).collect();
                Tensor::from_vec(vec![t - 1, v, 3], data)
            })
            .transpose()?;
        let offsets = offsets.map(|o| g.constant(o));
        let neutral_var = g.constant(neutral.vertices().clone());
        let style_var = g.input("style", style.one_hot());

        let mut branch_outputs = Vec::with_capacity(self.decoders.len());
        for dec in &self.decoders {
            let side = match (dec.branch, mask) {
                (_, None) => None,
                (Branch::Strong, Some(m)) => Some(m),
                (Branch::Weak, Some(m)) => Some(g.one_minus(m)?),
            };
            let history = match offsets {
                Some(o) => {
                    let masked = match side {
                        Some(s) => g.mul(o, s)?,
                        None => o,
                    };
                    let flat = g.reshape(masked, &[t - 1, 3 * v])?;
                    Some(dec.embed_history(g, store, flat)?)
                }
                None => None,
            };
            let features = encoded
                .features_for(dec.branch)
                .ok_or_else(|| Error::InvalidArgument(format!("no features for branch {:?}", dec.branch)))?;
            let out = dec.decode(g, store, history, features, style_var)?;
            let out = g.reshape(out, &[t, v, 3])?;
            let abs = g.add(out, neutral_var)?;
            branch_outputs.push((dec.branch, abs));
        }
        let pred = match (mask, branch_outputs.as_slice()) {
            (None, [(_, y)]) => *y,
            (Some(m), [(_, ys), (_, yw)]) => {
                let diff = g.sub(*ys, *yw)?;
                let gated = g.mul(diff, m)?;
                g.add(*yw, gated)?
            }
            _ => return Err(Error::InvalidArgument("inconsistent branch layout".into())),
        };
        Ok(ForwardVars { encoded, pred, branch_outputs, mask })
    }

    /// Teacher-forced forward plus the training loss against `gt`.
    pub fn loss<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        acoustic: &Tensor<S>,
        history: &MotionSequence<S>,
        gt: &MotionSequence<S>,
        neutral: &NeutralGeometry<S>,
        style: StyleVector,
    ) -> Result<(ForwardVars, LossVars)> {
        let fwd = self.forward(g, store, acoustic, history, neutral, style)?;
        let y = g.input("gt", gt.vertices().clone());
        let losses = total_loss_var(g, fwd.pred, y, fwd.mask)?;
        Ok((fwd, losses))
    }

    /// Autoregressive inference from acoustic features `T x d0`.
    pub fn synthesize<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        acoustic: &Tensor<S>,
        neutral: &NeutralGeometry<S>,
        style: StyleVector,
        fps: f32,
    ) -> Result<DecodedSequence<S>> {
        let branches = self.config.branches();
        let encoded = encode(&self.encoder, store, acoustic, &branches)?;
        let features: Vec<Tensor<S>> = self
            .decoders
            .iter()
            .map(|d| {
                encoded
                    .features
                    .iter()
                    .find(|(b, _)| *b == d.branch)
                    .map(|(_, f)| f.clone())
                    .ok_or_else(|| Error::InvalidArgument(format!("no features for branch {:?}", d.branch)))
            })
            .collect::<Result<_>>()?;
        let mask = self.mask_values(store);
        decode_sequence(&self.decoders, store, &features, style, mask.as_deref(), neutral, fps)
    }
}
