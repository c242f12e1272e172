//! Dual-branch autoregressive motion decoder.
//!
//! Each branch embeds its masked view of the past motion (offsets from the
//! neutral face), adds a style embedding and sinusoidal positions, runs one
//! post-norm transformer decoder layer (causal self-attention, then
//! cross-attention to its speech features restricted to frames up to the
//! current one) and maps back to per-vertex offsets. The two branch outputs
//! are blended per vertex by the learnable mask.

use rand::Rng;

use crate::encoder::Branch;
use crate::error::{Error, Result};
use crate::fai::MaskInit;
use crate::mesh_motion::{MotionSequence, NeutralGeometry};
use crate::nn::{causal_mask, sinusoidal_positions, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::numerics::{sigmoid, Graph, ParamStore, Tensor, Var};
use crate::scalar::{lit, Scalar};

pub const MASK_CLIP: f64 = 1e-4;
pub const MASK_PARAM: &str = "mask.logits";

/// One-hot subject identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StyleVector {
    pub subject: usize,
    pub n_subjects: usize,
}

impl StyleVector {
    pub fn new(subject: usize, n_subjects: usize) -> Result<Self> {
        if subject >= n_subjects {
            return Err(Error::InvalidArgument(format!("style {subject} out of range for {n_subjects} subjects")));
        }
        Ok(StyleVector { subject, n_subjects })
    }

    pub fn one_hot<S: Scalar>(&self) -> Tensor<S> {
        let mut t = Tensor::zeros(vec![1, self.n_subjects]);
        t.data_mut()[self.subject] = S::one();
        t
    }
}

/// Per-vertex mask logits, `V x 1`; the mask is their sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchMask<S: Scalar = f64> {
    pub logits: Tensor<S>,
}

impl<S: Scalar> BranchMask<S> {
    pub fn values(&self) -> Vec<S> {
        self.logits.data().iter().map(|&x| sigmoid(x)).collect()
    }

    pub fn num_vertices(&self) -> usize {
        self.logits.len()
    }
}

/// `logit(clip(m0, 1e-4, 1 - 1e-4))`.
pub fn mask_from_init<S: Scalar>(init: &MaskInit<S>) -> BranchMask<S> {
    let lo = lit::<S>(MASK_CLIP);
    let hi = S::one() - lo;
    let logits = init
        .m0
        .iter()
        .map(|&m| {
            let x = m.max(lo).min(hi);
            (x / (S::one() - x)).ln()
        })
        .collect();
    BranchMask { logits: Tensor::from_vec(vec![init.m0.len(), 1], logits).expect("mask shape") }
}

/// `y_w + m (y_s - y_w)` per vertex, on flattened `3V` frames.
pub fn combine<S: Scalar>(strong: &[S], weak: &[S], mask: &[S]) -> Result<Vec<S>> {
    if strong.len() != weak.len() || strong.len() != 3 * mask.len() {
        return Err(Error::shape(
            "combine",
            format!("strong {}, weak {}, mask {}", strong.len(), weak.len(), mask.len()),
        ));
    }
    Ok(strong.iter().zip(weak).enumerate().map(|(i, (&s, &w))| w + mask[i / 3] * (s - w)).collect())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub d: usize,
    pub heads: usize,
    pub n_vertices: usize,
    pub n_subjects: usize,
}

/// Embedding layer, one decoder layer and the motion projection of one branch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BranchDecoder {
    pub branch: Branch,
    pub start: String,
    pub embed: Linear,
    pub style: Linear,
    pub self_attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attention: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
    pub motion: Linear,
    pub d: usize,
}

impl BranchDecoder {
    pub fn register<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        branch: Branch,
        config: &DecoderConfig,
    ) -> Result<Self> {
        let p = format!("dec.{}", branch.tag());
        let d = config.d;
        let start = format!("{p}.start");
        store.insert_uniform(rng, start.clone(), &[1, d], d);
        Ok(BranchDecoder {
            branch,
            start,
            embed: Linear::register(store, rng, &format!("{p}.embed"), 3 * config.n_vertices, d, true),
            style: Linear::register(store, rng, &format!("{p}.style"), config.n_subjects, d, false),
            self_attention: MultiHeadAttention::register(store, rng, &format!("{p}.self"), d, config.heads)?,
            norm1: LayerNorm::register(store, &format!("{p}.ln1"), d),
            cross_attention: MultiHeadAttention::register(store, rng, &format!("{p}.cross"), d, config.heads)?,
            norm2: LayerNorm::register(store, &format!("{p}.ln2"), d),
            ffn: FeedForward::register(store, rng, &format!("{p}.ffn"), d, 2 * d),
            norm3: LayerNorm::register(store, &format!("{p}.ln3"), d),
            motion: Linear::register(store, rng, &format!("{p}.motion"), d, 3 * config.n_vertices, true),
            d,
        })
    }

    /// Embeds masked history offsets, `n x 3V -> n x d`.
    pub fn embed_history<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, masked: Var) -> Result<Var> {
        self.embed.forward(g, store, masked)
    }

    /// Decoder layer over `tokens` (`n x d` history embeddings, excluding the
    /// start token) against `features` (at least `n + 1` rows). Returns
    /// offsets for positions `0..=n`, `(n + 1) x 3V`, and discards rows of
    /// `features` beyond `n + 1`.
    pub fn decode<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        history: Option<Var>,
        features: Var,
        style: Var,
    ) -> Result<Var> {
        let start = store.bind(g, &self.start)?;
        let tokens = match history {
            Some(h) => g.concat(&[start, h], 0)?,
            None => start,
        };
        let n = g.value(tokens).shape()[0];
        let f_rows = g.value(features).shape()[0];
        if f_rows < n {
            return Err(Error::shape(
                "branch_step",
                format!("{n} decoding positions but only {f_rows} feature frames"),
            ));
        }
        let feats = if f_rows == n { features } else { g.slice(features, 0, 0, n)? };
        let style_emb = self.style.forward(g, store, style)?;
        let pos = g.constant(sinusoidal_positions(n, self.d));
        let x = g.add(tokens, style_emb)?;
        let x = g.add(x, pos)?;

        let mask = causal_mask(n, n);
        let sa = self.self_attention.forward(g, store, x, x, Some(mask.clone()))?;
        let r = g.add(x, sa.output)?;
        let x = self.norm1.forward(g, store, r)?;
        let ca = self.cross_attention.forward(g, store, x, feats, Some(mask))?;
        let r = g.add(x, ca.output)?;
        let x = self.norm2.forward(g, store, r)?;
        let f = self.ffn.forward(g, store, x)?;
        let r = g.add(x, f)?;
        let x = self.norm3.forward(g, store, r)?;
        self.motion.forward(g, store, x)
    }
}

/// Past predictions plus each branch's cached history embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState<S: Scalar = f64> {
    /// Absolute positions of decoded frames, each `3V`.
    pub past: Vec<Vec<S>>,
    /// Per-branch embeddings of the masked past frames, each `1 x d`.
    pub embeddings: Vec<(Branch, Vec<Tensor<S>>)>,
}

impl<S: Scalar> DecoderState<S> {
    pub fn new(branches: &[Branch]) -> Self {
        DecoderState { past: Vec::new(), embeddings: branches.iter().map(|&b| (b, Vec::new())).collect() }
    }

    pub fn frames(&self) -> usize {
        self.past.len()
    }
}

/// Stacks `1 x d` rows into an `n x d` tensor.
fn stack_rows<S: Scalar>(rows: &[Tensor<S>], d: usize) -> Result<Tensor<S>> {
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in rows {
        data.extend_from_slice(r.data());
    }
    Tensor::from_vec(vec![rows.len(), d], data)
}

/// Absolute prediction of one branch for the next frame, `3V` flattened.
///
/// `features` must cover at least `embeddings.len() + 1` frames; rows beyond
/// that are never read.
pub fn branch_step<S: Scalar>(
    decoder: &BranchDecoder,
    store: &ParamStore<S>,
    features: &Tensor<S>,
    embeddings: &[Tensor<S>],
    style: StyleVector,
    neutral: &[S],
) -> Result<Vec<S>> {
    let n = embeddings.len() + 1;
    let f_rows = features.shape()[0];
    if f_rows < n {
        return Err(Error::shape(
            "branch_step",
            format!("state holds {} past frames but features cover only {f_rows}", n - 1),
        ));
    }
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let history = if embeddings.is_empty() { None } else { Some(g.constant(stack_rows(embeddings, decoder.d)?)) };
    let s = g.constant(style.one_hot());
    let out = decoder.decode(&mut g, store, history, f, s)?;
    let last = g.value(out).row(n - 1);
    if last.len() != neutral.len() {
        return Err(Error::shape("branch_step", format!("{} offsets for {} coordinates", last.len(), neutral.len())));
    }
    Ok(last.iter().zip(neutral).map(|(&o, &h)| h + o).collect())
}

/// Embeds `side ⊙ (frame - neutral)` for one branch, returning `1 x d`.
fn embed_frame<S: Scalar>(
    decoder: &BranchDecoder,
    store: &ParamStore<S>,
    frame: &[S],
    neutral: &[S],
    side: &[S],
) -> Result<Tensor<S>> {
    let masked: Vec<S> = frame.iter().zip(neutral).enumerate().map(|(i, (&y, &h))| (y - h) * side[i / 3]).collect();
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(vec![1, masked.len()], masked)?);
    let e = decoder.embed_history(&mut g, store, x)?;
    Ok(g.value(e).clone())
}

/// Combined and per-branch outputs of an autoregressive decode.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedSequence<S: Scalar = f64> {
    pub motion: MotionSequence<S>,
    pub branches: Vec<(Branch, MotionSequence<S>)>,
}

/// Autoregressive decode over every frame of `features`.
///
/// With two decoders, `mask` holds the per-vertex strong-branch weights; with
/// a single decoder it must be `None` and the mask is taken as all ones.
pub fn decode_sequence<S: Scalar>(
    decoders: &[BranchDecoder],
    store: &ParamStore<S>,
    features: &[Tensor<S>],
    style: StyleVector,
    mask: Option<&[S]>,
    neutral: &NeutralGeometry<S>,
    fps: f32,
) -> Result<DecodedSequence<S>> {
    if decoders.is_empty() || decoders.len() != features.len() || decoders.len() > 2 {
        return Err(Error::InvalidArgument(format!(
            "{} decoders for {} feature streams",
            decoders.len(),
            features.len()
        )));
    }
    let t = features[0].shape()[0];
    if features.iter().any(|f| f.shape()[0] != t) || t == 0 {
        return Err(Error::shape("decode_sequence", "branch features differ in length or are empty".to_string()));
    }
    let v = neutral.num_vertices();
    let ones = vec![S::one(); v];
    let mask: Vec<S> = match (decoders.len(), mask) {
        (2, Some(m)) if m.len() == v => m.to_vec(),
        (1, None) => ones.clone(),
        _ => return Err(Error::InvalidArgument("mask must be given exactly when decoding two branches".into())),
    };
    let sides: Vec<Vec<S>> = decoders
        .iter()
        .map(|d| match d.branch {
            Branch::Strong => mask.clone(),
            Branch::Weak => mask.iter().map(|&m| S::one() - m).collect(),
        })
        .collect();
    let h = neutral.vertices().data();
    let branches: Vec<Branch> = decoders.iter().map(|d| d.branch).collect();
    let mut state = DecoderState::new(&branches);
    let mut per_branch: Vec<Vec<S>> = vec![Vec::with_capacity(t * 3 * v); decoders.len()];
    for _ in 0..t {
        let mut outs = Vec::with_capacity(decoders.len());
        for (k, dec) in decoders.iter().enumerate() {
            let y = branch_step(dec, store, &features[k], &state.embeddings[k].1, style, h)?;
            per_branch[k].extend_from_slice(&y);
            outs.push(y);
        }
        let frame = if outs.len() == 2 {
            let (s, w) = match decoders[0].branch {
                Branch::Strong => (&outs[0], &outs[1]),
                Branch::Weak => (&outs[1], &outs[0]),
            };
            combine(s, w, &mask)?
        } else {
            outs.pop().expect("one branch")
        };
        for (k, dec) in decoders.iter().enumerate() {
            let e = embed_frame(dec, store, &frame, h, &sides[k])?;
            state.embeddings[k].1.push(e);
        }
        state.past.push(frame);
    }
    let subject = style.subject as u32;
    let to_seq = |data: Vec<S>| MotionSequence::new(Tensor::from_vec(vec![t, v, 3], data)?, fps, subject);
    let motion = to_seq(state.past.concat())?;
    let branches = branches.into_iter().zip(per_branch).map(|(b, d)| Ok((b, to_seq(d)?))).collect::<Result<_>>()?;
    Ok(DecodedSequence { motion, branches })
}
