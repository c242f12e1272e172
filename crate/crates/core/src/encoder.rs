//! Weighted hierarchical speech feature encoder.
//!
//! Frame-level features are a linear projection of the acoustic features.
//! Phoneme-, word- and utterance-level features come from a chain of local
//! self-attention blocks whose span is bounded by the typical duration of the
//! unit, each followed by a linear projection to the model width. Two
//! independent weight generators (strong and weak branch) score the four
//! levels per frame and mix them into the branch features.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{band_mask, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

pub const LEVELS: usize = 4;

/// Statistical duration ranges of pronunciation units, in milliseconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DurationConfig {
    pub phoneme_ms: (f64, f64),
    pub word_ms: (f64, f64),
}

impl Default for DurationConfig {
    fn default() -> Self {
        DurationConfig { phoneme_ms: (50.0, 200.0), word_ms: (250.0, 1000.0) }
    }
}

impl DurationConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |r: (f64, f64)| r.0 > 0.0 && r.1 >= r.0;
        if !ok(self.phoneme_ms) || !ok(self.word_ms) || self.phoneme_ms.1 >= self.word_ms.1 {
            return Err(Error::Config(format!("invalid duration ranges {self:?}")));
        }
        Ok(())
    }

    /// Attention spans of the phoneme, word and utterance blocks at `fps`.
    pub fn windows(&self, fps: f64) -> [AttentionSpan; 3] {
        let frames =
            |r: (f64, f64)| AttentionSpan::Frames((((r.0 + r.1) / 2.0) * fps / 1000.0).round().max(1.0) as usize);
        [frames(self.phoneme_ms), frames(self.word_ms), AttentionSpan::Full]
    }
}

/// Window length of a local attention block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionSpan {
    /// Token `t` attends to tokens within `±floor(n/2)`.
    Frames(usize),
    /// Whole sequence.
    Full,
}

/// Local self-attention block: attention, residual + norm, feed-forward, residual + norm.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpeechFormerBlock {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

pub struct BlockOutput {
    pub output: Var,
    pub attention: Vec<Var>,
}

impl SpeechFormerBlock {
    pub fn register<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(SpeechFormerBlock {
            attention: MultiHeadAttention::register(store, rng, &format!("{name}.att"), dim, heads)?,
            norm1: LayerNorm::register(store, &format!("{name}.ln1"), dim),
            ffn: FeedForward::register(store, rng, &format!("{name}.ffn"), dim, 2 * dim),
            norm2: LayerNorm::register(store, &format!("{name}.ln2"), dim),
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x: Var,
        span: AttentionSpan,
    ) -> Result<BlockOutput> {
        let t = g.value(x).shape()[0];
        let mask = match span {
            AttentionSpan::Frames(0) => {
                return Err(Error::InvalidArgument("attention window must be at least one frame".into()))
            }
            AttentionSpan::Frames(n) => Some(band_mask(t, t, n / 2)),
            AttentionSpan::Full => None,
        };
        let att = self.attention.forward(g, store, x, x, mask)?;
        let r1 = g.add(x, att.output)?;
        let h = self.norm1.forward(g, store, r1)?;
        let f = self.ffn.forward(g, store, h)?;
        let r2 = g.add(h, f)?;
        let output = self.norm2.forward(g, store, r2)?;
        Ok(BlockOutput { output, attention: att.probs })
    }
}

/// Scores one level's features: `theta(tanh(phi(H) + psi(H)))`, `T x 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelScorer {
    pub phi: Linear,
    pub psi: Linear,
    pub theta: Linear,
}

impl LevelScorer {
    fn register<S: Scalar, R: Rng>(store: &mut ParamStore<S>, rng: &mut R, name: &str, d: usize, d1: usize) -> Self {
        LevelScorer {
            phi: Linear::register(store, rng, &format!("{name}.phi"), d, d1, true),
            psi: Linear::register(store, rng, &format!("{name}.psi"), d, d1, true),
            theta: Linear::register(store, rng, &format!("{name}.theta"), d1, 1, true),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, h: Var) -> Result<Var> {
        let q = self.phi.forward(g, store, h)?;
        let k = self.psi.forward(g, store, h)?;
        let s = g.add(q, k)?;
        let z = g.tanh(s)?;
        self.theta.forward(g, store, z)
    }
}

/// Per-branch generator: one scorer per level, softmax across levels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WeightGenerator {
    pub levels: Vec<LevelScorer>,
}

impl WeightGenerator {
    pub fn register<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        d: usize,
        d1: usize,
    ) -> Self {
        WeightGenerator {
            levels: (1..=LEVELS).map(|l| LevelScorer::register(store, rng, &format!("{name}.l{l}"), d, d1)).collect(),
        }
    }

    /// Level weights `T x 4` (columns alpha, beta, gamma, delta).
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, levels: &[Var; LEVELS]) -> Result<Var> {
        let logits = self
            .levels
            .iter()
            .zip(levels)
            .map(|(scorer, &h)| scorer.forward(g, store, h))
            .collect::<Result<Vec<_>>>()?;
        let joined = g.concat(&logits, 1)?;
        g.softmax(joined, 1)
    }
}

/// `F[t] = sum_l w[t, l] * H_l[t]`.
pub fn weighted_combine<S: Scalar>(g: &mut Graph<S>, levels: &[Var; LEVELS], weights: Var) -> Result<Var> {
    let (t, n) = g.value(weights).dims2()?;
    if n != LEVELS || levels.iter().any(|&h| g.value(h).shape()[0] != t) {
        return Err(Error::shape(
            "weighted_combine",
            format!("weights {:?} for levels of {:?}", g.value(weights).shape(), g.value(levels[0]).shape()),
        ));
    }
    let mut acc: Option<Var> = None;
    for (l, &h) in levels.iter().enumerate() {
        let w = g.slice(weights, 1, l, 1)?;
        let term = g.mul(w, h)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("four levels"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    Strong,
    Weak,
}

impl Branch {
    pub fn tag(self) -> &'static str {
        match self {
            Branch::Strong => "s",
            Branch::Weak => "w",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub d0: usize,
    pub d: usize,
    pub d1: usize,
    pub heads: usize,
    pub fps: f64,
    pub durations: DurationConfig,
    pub hierarchy: bool,
    pub branches: Vec<Branch>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoder {
    pub frame: Linear,
    pub blocks: Vec<SpeechFormerBlock>,
    pub projections: Vec<Linear>,
    pub generators: Vec<(Branch, WeightGenerator)>,
    pub spans: [AttentionSpan; 3],
}

/// Graph handles of one encoder pass.
#[derive(Clone, Debug)]
pub struct EncodedVars {
    /// H1..H4, each `T x d`; with the hierarchy disabled all four alias H1.
    pub levels: [Var; LEVELS],
    /// Block outputs feeding H2..H4, each `T x d0`.
    pub block_outputs: Vec<Var>,
    pub weights: Vec<(Branch, Var)>,
    pub features: Vec<(Branch, Var)>,
}

impl EncodedVars {
    pub fn features_for(&self, branch: Branch) -> Option<Var> {
        self.features.iter().find(|(b, _)| *b == branch).map(|(_, v)| *v)
    }

    pub fn weights_for(&self, branch: Branch) -> Option<Var> {
        self.weights.iter().find(|(b, _)| *b == branch).map(|(_, v)| *v)
    }
}

impl Encoder {
    pub fn register<S: Scalar, R: Rng>(store: &mut ParamStore<S>, rng: &mut R, config: &EncoderConfig) -> Result<Self> {
        config.durations.validate()?;
        let frame = Linear::register(store, rng, "enc.frame", config.d0, config.d, true);
        let (mut blocks, mut projections, generators) = (Vec::new(), Vec::new(), Vec::new());
        if config.hierarchy {
            for l in 2..=LEVELS {
                blocks.push(SpeechFormerBlock::register(
                    store,
                    rng,
                    &format!("enc.block{l}"),
                    config.d0,
                    config.heads,
                )?);
                projections.push(Linear::register(store, rng, &format!("enc.level{l}"), config.d0, config.d, true));
            }
        }
        let mut encoder =
            Encoder { frame, blocks, projections, generators, spans: config.durations.windows(config.fps) };
        for &b in &config.branches {
            encoder.add_generator(store, rng, b, config);
        }
        Ok(encoder)
    }

    /// Registers the weight generator of `branch`; a no-op without the hierarchy.
    pub fn add_generator<S: Scalar, R: Rng>(
        &mut self,
        store: &mut ParamStore<S>,
        rng: &mut R,
        branch: Branch,
        config: &EncoderConfig,
    ) {
        if config.hierarchy {
            let name = format!("enc.wg.{}", branch.tag());
            self.generators.push((branch, WeightGenerator::register(store, rng, &name, config.d, config.d1)));
        }
    }

    /// Runs the encoder on `acoustic` (`T x d0`). The utterance block always spans the full input.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        acoustic: Var,
        branches: &[Branch],
    ) -> Result<EncodedVars> {
        let h1 = self.frame.forward(g, store, acoustic)?;
        if self.blocks.is_empty() {
            return Ok(EncodedVars {
                levels: [h1; LEVELS],
                block_outputs: vec![],
                weights: vec![],
                features: branches.iter().map(|&b| (b, h1)).collect(),
            });
        }
        let mut levels = [h1; LEVELS];
        let mut block_outputs = Vec::with_capacity(3);
        let mut stream = acoustic;
        for (i, (block, proj)) in self.blocks.iter().zip(&self.projections).enumerate() {
            stream = block.forward(g, store, stream, self.spans[i])?.output;
            block_outputs.push(stream);
            levels[i + 1] = proj.forward(g, store, stream)?;
        }
        let mut weights = Vec::new();
        let mut features = Vec::new();
        for &b in branches {
            let gen = self
                .generators
                .iter()
                .find(|(gb, _)| *gb == b)
                .map(|(_, gen)| gen)
                .ok_or_else(|| Error::InvalidArgument(format!("no weight generator for branch {b:?}")))?;
            let w = gen.forward(g, store, &levels)?;
            features.push((b, weighted_combine(g, &levels, w)?));
            weights.push((b, w));
        }
        Ok(EncodedVars { levels, block_outputs, weights, features })
    }
}

/// Tensor-valued encoder outputs for inspection and export.
#[derive(Clone, Debug, PartialEq)]
pub struct HierarchicalFeatures<S: Scalar = f64> {
    pub levels: Vec<Tensor<S>>,
    pub block_outputs: Vec<Tensor<S>>,
    pub weights: Vec<(Branch, Tensor<S>)>,
    pub features: Vec<(Branch, Tensor<S>)>,
}

pub fn encode<S: Scalar>(
    encoder: &Encoder,
    store: &ParamStore<S>,
    acoustic: &Tensor<S>,
    branches: &[Branch],
) -> Result<HierarchicalFeatures<S>> {
    let mut g = Graph::new();
    let a = g.input("acoustic", acoustic.clone());
    let vars = encoder.forward(&mut g, store, a, branches)?;
    Ok(HierarchicalFeatures {
        levels: vars.levels.iter().map(|&v| g.value(v).clone()).collect(),
        block_outputs: vars.block_outputs.iter().map(|&v| g.value(v).clone()).collect(),
        weights: vars.weights.iter().map(|&(b, v)| (b, g.value(v).clone())).collect(),
        features: vars.features.iter().map(|&(b, v)| (b, g.value(v).clone())).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(hierarchy: bool) -> EncoderConfig {
        EncoderConfig {
            d0: 6,
            d: 4,
            d1: 3,
            heads: 2,
            fps: 30.0,
            durations: DurationConfig::default(),
            hierarchy,
            branches: vec![Branch::Strong, Branch::Weak],
        }
    }

    fn acoustic(t: usize, d0: usize) -> Tensor<f64> {
        Tensor::from_vec(vec![t, d0], (0..t * d0).map(|i| (i as f64 * 0.71).sin()).collect()).unwrap()
    }

    #[test]
    fn windows_from_duration_midpoints() {
        let w = DurationConfig::default().windows(30.0);
        assert_eq!(w, [AttentionSpan::Frames(4), AttentionSpan::Frames(19), AttentionSpan::Full]);
        assert!(DurationConfig { phoneme_ms: (300.0, 1200.0), ..Default::default() }.validate().is_err());
    }

    #[test]
    fn all_levels_keep_token_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let enc = Encoder::register(&mut store, &mut rng, &config(true)).unwrap();
        for t in [1, 7] {
            let out = encode(&enc, &store, &acoustic(t, 6), &[Branch::Strong, Branch::Weak]).unwrap();
            for h in &out.levels {
                assert_eq!(h.shape(), &[t, 4]);
            }
            for h in &out.block_outputs {
                assert_eq!(h.shape(), &[t, 6]);
            }
            for (_, w) in &out.weights {
                for r in 0..t {
                    assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn disabled_hierarchy_uses_frame_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let enc = Encoder::register(&mut store, &mut rng, &config(false)).unwrap();
        assert_eq!(store.len(), 2);
        let out = encode(&enc, &store, &acoustic(5, 6), &[Branch::Strong, Branch::Weak]).unwrap();
        assert_eq!(out.features[0].1, out.levels[0]);
        assert_eq!(out.features[1].1, out.levels[0]);
    }

    #[test]
    fn zero_window_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let block = SpeechFormerBlock::register(&mut store, &mut rng, "b", 4, 2).unwrap();
        let mut g = Graph::new();
        let x = g.input("x", acoustic(3, 4));
        assert!(block.forward(&mut g, &store, x, AttentionSpan::Frames(0)).is_err());
    }
}
