//! Speech-driven 3D facial animation with activity-intensity guided
//! dual-branch decoding.
//!
//! The core is generic over the floating-point type through [`Scalar`]; the
//! `*64` aliases below fix it to `f64`, which is what training and the CLI use.

pub mod decoder;
pub mod encoder;
pub mod error;
pub mod fai;
pub mod frontend;
pub mod losses;
pub mod mesh_motion;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod scalar;
pub mod train;

pub use decoder::{
    branch_step, combine, decode_sequence, mask_from_init, BranchDecoder, BranchMask, DecodedSequence, DecoderConfig,
    DecoderState, StyleVector,
};
pub use encoder::{encode, AttentionSpan, Branch, DurationConfig, Encoder, EncoderConfig, HierarchicalFeatures};
pub use error::{Error, Result};
pub use fai::{
    analyze, classify_intensity, compute_displacements, compute_intensity, init_mask, normalize_min_max, stft,
    DisplacementField, IntensityMap, IntensityPartition, MaskInit, StftConfig, Window,
};
pub use frontend::{
    features_for_motion, interpolate_features, load_wav, melspectrogram, write_wav, AcousticFeatures, AudioClip,
    FrontendConfig, FrontendVariant,
};
pub use losses::{
    evaluate_metrics, fdd, lip_vertex_error, reconstruction_loss, total_loss, velocity_loss, LossReport, MetricReport,
};
pub use mesh_motion::{
    generate_synthetic_dataset, read_neutral, read_regions, read_sequence, write_neutral, write_regions,
    write_sequence, MotionSequence, NeutralGeometry, RegionMask, SyntheticConfig, SyntheticPair,
};
pub use model::{Model, ModelConfig};
pub use numerics::{adam_step, gradient_check, AdamState, Graph, ParamStore, Tensor, Var};
pub use scalar::Scalar;

pub type Tensor64 = Tensor<f64>;
pub type Graph64 = Graph<f64>;
pub type ParamStore64 = ParamStore<f64>;
pub type MotionSequence64 = MotionSequence<f64>;
pub type NeutralGeometry64 = NeutralGeometry<f64>;
pub type AudioClip64 = AudioClip<f64>;
pub type IntensityMap64 = IntensityMap<f64>;
pub type MaskInit64 = MaskInit<f64>;
