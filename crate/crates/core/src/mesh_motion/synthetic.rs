//! Deterministic stand-in for a paired audio / 3D face corpus.
//!
//! A fixed subset of "mouth" vertices is displaced in proportion to the
//! audio's syllabic envelope with an added faster oscillation, and every other
//! vertex drifts slowly with a small amplitude, so mouth vertices always
//! carry the strongest fundamental-band activity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{MotionSequence, NeutralGeometry, RegionMask};
use crate::error::{Error, Result};
use crate::frontend::AudioClip;
use crate::numerics::Tensor;
use crate::scalar::Scalar;

const FACE_RADIUS_MM: f64 = 80.0;
const MOUTH_GAIN_MM: f64 = 6.0;
const MOUTH_RIPPLE_MM: f64 = 1.5;
const DRIFT_MM: f64 = 0.3;
const DEFAULT_AUDIO_AMPLITUDE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_sequences: usize,
    pub frames: usize,
    pub vertices: usize,
    pub fps: f32,
    pub sample_rate: u32,
    pub n_subjects: usize,
    /// Peak audio amplitude; motion amplitude scales with it, so zero yields a still face.
    pub audio_amplitude: f64,
    /// Fraction of vertices (lowest on the face) driven as the mouth.
    pub mouth_fraction: f64,
    /// Fraction of vertices (highest on the face) labelled upper face.
    pub upper_fraction: f64,
}

impl SyntheticConfig {
    pub fn new(seed: u64, n_sequences: usize, frames: usize, vertices: usize, fps: f32, sample_rate: u32) -> Self {
        SyntheticConfig {
            seed,
            n_sequences,
            frames,
            vertices,
            fps,
            sample_rate,
            n_subjects: 4,
            audio_amplitude: DEFAULT_AUDIO_AMPLITUDE,
            mouth_fraction: 0.2,
            upper_fraction: 0.4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPair<S: Scalar = f64> {
    pub audio: AudioClip<S>,
    pub motion: MotionSequence<S>,
    pub neutral: NeutralGeometry<S>,
    pub regions: RegionMask,
}

/// Smooth syllable-rate envelope in [0, 1].
struct Envelope {
    parts: Vec<(f64, f64, f64)>,
}

impl Envelope {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let parts = (0..3)
            .map(|_| {
                (rng.random_range(0.5..1.0), rng.random_range(1.0..3.5), rng.random_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        Envelope { parts }
    }

    fn at(&self, t: f64) -> f64 {
        let total: f64 = self.parts.iter().map(|p| p.0).sum();
        self.parts.iter().map(|&(a, f, ph)| a * (0.5 - 0.5 * (std::f64::consts::TAU * f * t + ph).cos())).sum::<f64>()
            / total
    }
}

fn neutral_face(vertices: usize) -> Vec<[f64; 3]> {
    // Fibonacci lattice on the front hemisphere (z >= 0).
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..vertices)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / vertices as f64;
            let r = (1.0 - y * y).sqrt();
            let theta = golden * i as f64;
            let (x, z) = (r * theta.cos(), r * theta.sin().abs());
            [FACE_RADIUS_MM * x, FACE_RADIUS_MM * y, FACE_RADIUS_MM * z]
        })
        .collect()
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 0.1 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Lowest vertices form the mouth, highest the upper face.
fn regions_for(face: &[[f64; 3]], mouth_fraction: f64, upper_fraction: f64) -> RegionMask {
    let v = face.len();
    let mut order: Vec<usize> = (0..v).collect();
    order.sort_by(|&a, &b| face[a][1].total_cmp(&face[b][1]).then(a.cmp(&b)));
    let mouth = ((v as f64 * mouth_fraction).ceil() as usize).clamp(1, v);
    let upper = ((v as f64 * upper_fraction).floor() as usize).min(v - mouth);
    RegionMask::new(order[..mouth].iter().copied(), order[v - upper..].iter().copied())
}

pub fn generate_synthetic_dataset<S: Scalar>(config: &SyntheticConfig) -> Result<Vec<SyntheticPair<S>>> {
    if config.n_sequences == 0 || config.frames == 0 || config.vertices == 0 || config.n_subjects == 0 {
        return Err(Error::InvalidArgument("synthetic dataset sizes must be positive".into()));
    }
    if !(config.fps > 0.0) || config.sample_rate == 0 {
        return Err(Error::InvalidArgument("fps and sample rate must be positive".into()));
    }
    let face = neutral_face(config.vertices);
    let regions = regions_for(&face, config.mouth_fraction, config.upper_fraction);
    let neutral_data: Vec<S> = face.iter().flatten().map(|&x| S::lit(x)).collect();
    let neutral = NeutralGeometry::new(Tensor::from_vec(vec![config.vertices, 3], neutral_data)?)?;

    let mut geo_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let directions: Vec<([f64; 3], [f64; 3], f64)> = (0..config.vertices)
        .map(|_| {
            (unit_vector(&mut geo_rng), unit_vector(&mut geo_rng), geo_rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let mouth_weight: Vec<f64> = (0..config.vertices)
        .map(|v| if regions.lip_indices.contains(&v) { 0.7 + 0.3 * geo_rng.random_range(0.0..1.0) } else { 0.0 })
        .collect();

    let scale = config.audio_amplitude / DEFAULT_AUDIO_AMPLITUDE;
    let fps = config.fps as f64;
    let duration = config.frames as f64 / fps;
    let n_samples = (duration * config.sample_rate as f64).round() as usize;

    (0..config.n_sequences)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(1 + i as u64);
            let subject = (i % config.n_subjects) as u32;
            let style_gain =
                if config.n_subjects == 1 { 1.0 } else { 0.8 + 0.4 * subject as f64 / (config.n_subjects - 1) as f64 };
            let envelope = Envelope::sample(&mut rng);
            let ripple_hz = rng.random_range(4.0..7.0);
            let carriers: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| {
                    (
                        rng.random_range(0.3..1.0),
                        rng.random_range(150.0..1800.0),
                        rng.random_range(0.0..std::f64::consts::TAU),
                    )
                })
                .collect();
            let carrier_total: f64 = carriers.iter().map(|c| c.0).sum();

            let samples: Vec<S> = (0..n_samples)
                .map(|n| {
                    let t = n as f64 / config.sample_rate as f64;
                    let tone: f64 =
                        carriers.iter().map(|&(a, f, ph)| a * (std::f64::consts::TAU * f * t + ph).sin()).sum::<f64>()
                            / carrier_total;
                    S::lit(config.audio_amplitude * envelope.at(t) * tone)
                })
                .collect();
            let audio = AudioClip::new(samples, config.sample_rate)?;

            let mut verts = Vec::with_capacity(config.frames * config.vertices * 3);
            for f in 0..config.frames {
                let t = f as f64 / fps;
                let e = envelope.at(t);
                for (v, p) in face.iter().enumerate() {
                    let (dir, side, phase) = directions[v];
                    let offset: [f64; 3] = if mouth_weight[v] > 0.0 {
                        let open = MOUTH_GAIN_MM * style_gain * mouth_weight[v] * e;
                        let ripple = MOUTH_RIPPLE_MM * e * (std::f64::consts::TAU * ripple_hz * t + phase).sin();
                        std::array::from_fn(|c| scale * (open * dir[c] + ripple * side[c]))
                    } else {
                        let drift = DRIFT_MM * (std::f64::consts::TAU * 0.3 * t + phase).sin();
                        std::array::from_fn(|c| scale * drift * dir[c])
                    };
                    verts.extend((0..3).map(|c| S::lit(p[c] + offset[c])));
                }
            }
            let motion = MotionSequence::new(
                Tensor::from_vec(vec![config.frames, config.vertices, 3], verts)?,
                config.fps,
                subject,
            )?;
            Ok(SyntheticPair { audio, motion, neutral: neutral.clone(), regions: regions.clone() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_seed() {
        let cfg = SyntheticConfig::new(0, 2, 12, 10, 30.0, 16000);
        let a: Vec<SyntheticPair<f64>> = generate_synthetic_dataset(&cfg).unwrap();
        let b: Vec<SyntheticPair<f64>> = generate_synthetic_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        let c: Vec<SyntheticPair<f64>> = generate_synthetic_dataset(&SyntheticConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a[0].motion, c[0].motion);
    }

    #[test]
    fn silent_audio_leaves_face_neutral() {
        let cfg = SyntheticConfig { audio_amplitude: 0.0, ..SyntheticConfig::new(3, 1, 8, 6, 30.0, 16000) };
        let pair: SyntheticPair<f64> = generate_synthetic_dataset(&cfg).unwrap().remove(0);
        assert!(pair.audio.samples.iter().all(|&s| s == 0.0));
        let still = pair.neutral.repeated(8, 30.0, pair.motion.subject_id).unwrap();
        assert_eq!(pair.motion, still);
    }

    #[test]
    fn audio_duration_matches_frames() {
        let cfg = SyntheticConfig::new(0, 1, 45, 5, 30.0, 16000);
        let pair: SyntheticPair<f64> = generate_synthetic_dataset(&cfg).unwrap().remove(0);
        let frames = (pair.audio.duration_secs() * 30.0).round() as i64;
        assert!((frames - 45).abs() <= 1);
    }

    #[test]
    fn regions_are_disjoint_and_nonempty() {
        let cfg = SyntheticConfig::new(0, 1, 4, 100, 30.0, 16000);
        let pair: SyntheticPair<f64> = generate_synthetic_dataset(&cfg).unwrap().remove(0);
        assert_eq!(pair.regions.lip_indices.len(), 20);
        assert_eq!(pair.regions.upper_face_indices.len(), 40);
        pair.regions.validate(100).unwrap();
    }
}
