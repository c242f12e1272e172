use std::f64::consts::TAU;
use std::path::Path;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use corrtalk::decoder::{combine, mask_from_init};
use corrtalk::encoder::{encode, Branch};
use corrtalk::fai::{normalize_min_max, stft_frames, MaskInit, StftConfig, Window};
use corrtalk::frontend::{interpolate_features, AcousticFeatures};
use corrtalk::losses::{fdd, lip_vertex_error};
use corrtalk::mesh_motion::{
    decode_sequence_bytes, encode_sequence_bytes, MotionSequence, NeutralGeometry, RegionMask,
};
use corrtalk::model::{Model, ModelConfig};
use corrtalk::numerics::{ParamStore, Tensor};
use corrtalk::train::{decode_checkpoint, encode_checkpoint, Config, Dataset, Trainer};
use corrtalk::SyntheticConfig;

fn seq(t: usize, v: usize, data: Vec<f64>) -> MotionSequence<f64> {
    MotionSequence::new(Tensor::from_vec(vec![t, v, 3], data).unwrap(), 30.0, 0).unwrap()
}

/// Two sequences of the same shape plus a neutral.
fn pair() -> impl Strategy<Value = (MotionSequence<f64>, MotionSequence<f64>, NeutralGeometry<f64>)> {
    (2usize..12, 3usize..10).prop_flat_map(|(t, v)| {
        let n = t * v * 3;
        (
            prop::collection::vec(-5.0f64..5.0, n),
            prop::collection::vec(-5.0f64..5.0, n),
            prop::collection::vec(-5.0f64..5.0, v * 3),
        )
            .prop_map(move |(a, b, h)| {
                (seq(t, v, a), seq(t, v, b), NeutralGeometry::new(Tensor::from_vec(vec![v, 3], h).unwrap()).unwrap())
            })
    })
}

fn regions(v: usize) -> RegionMask {
    RegionMask::new(0..v / 2, v / 2..v)
}

fn naive_magnitudes(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n / 2 + 1)
        .map(|k| {
            let (re, im) = x.iter().enumerate().fold((0.0, 0.0), |(re, im), (i, &v)| {
                let a = -TAU * (k * i) as f64 / n as f64;
                (re + v * a.cos(), im + v * a.sin())
            });
            re.hypot(im)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalized_mask_spans_unit_interval(raw in prop::collection::vec(-1e3f64..1e3, 1..40)) {
        let m0 = normalize_min_max(&raw).m0;
        prop_assert!(m0.iter().all(|x| (0.0..=1.0).contains(x)));
        let (lo, hi) = raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
        if hi > lo {
            prop_assert!(m0.iter().any(|&x| x == 0.0) && m0.iter().any(|&x| x == 1.0));
            // Order is preserved.
            for i in 0..raw.len() {
                for j in 0..raw.len() {
                    if raw[i] < raw[j] {
                        prop_assert!(m0[i] <= m0[j]);
                    }
                }
            }
        } else {
            prop_assert!(m0.iter().all(|&x| x == 0.5));
        }
    }

    #[test]
    fn combined_frame_lies_between_branches(
        data in (1usize..12).prop_flat_map(|v| (
            prop::collection::vec(-10.0f64..10.0, 3 * v),
            prop::collection::vec(-10.0f64..10.0, 3 * v),
            prop::collection::vec(0.0f64..=1.0, v),
        ))
    ) {
        let (s, w, m) = data;
        let y = combine(&s, &w, &m).unwrap();
        for i in 0..y.len() {
            prop_assert!(y[i] >= s[i].min(w[i]) - 1e-12 && y[i] <= s[i].max(w[i]) + 1e-12);
        }
        let ones = vec![1.0; m.len()];
        let zeros = vec![0.0; m.len()];
        let near = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12);
        prop_assert!(near(&combine(&s, &w, &ones).unwrap(), &s));
        prop_assert_eq!(combine(&s, &w, &zeros).unwrap(), w.clone());
    }

    #[test]
    fn stft_matches_naive_dft_and_parseval(
        signal in prop::collection::vec(-3.0f64..3.0, 16..48),
        win in 4usize..16,
        hop in 1usize..4,
        rect in any::<bool>(),
    ) {
        let cfg = StftConfig { window: if rect { Window::Rectangular } else { Window::Hann }, ..StftConfig::hann(win, hop) };
        let frames = stft_frames(&signal, &cfg).unwrap();
        let (bins, n_frames) = frames.dims2().unwrap();
        prop_assert_eq!(bins, win / 2 + 1);
        prop_assert_eq!(n_frames, (signal.len() - win) / hop + 1);
        let window = cfg.window_values::<f64>();
        for f in 0..n_frames {
            let seg: Vec<f64> = (0..win).map(|i| signal[f * hop + i] * window[i]).collect();
            let oracle = naive_magnitudes(&seg);
            for k in 0..bins {
                let ours = frames.data()[k * n_frames + f];
                prop_assert!(ours >= 0.0);
                prop_assert!((ours - oracle[k]).abs() <= 1e-9 * oracle[k].max(1.0));
            }
            let energy: f64 = seg.iter().map(|x| x * x).sum();
            let weight = |k: usize| if k == 0 || (win % 2 == 0 && k == win / 2) { 1.0 } else { 2.0 };
            let spectral: f64 = (0..bins).map(|k| weight(k) * oracle[k] * oracle[k]).sum::<f64>() / win as f64;
            prop_assert!((energy - spectral).abs() <= 1e-9 * energy.max(1e-12));
        }
    }

    #[test]
    fn lip_error_ignores_vertices_outside_the_lips((a, b, _) in pair(), noise in -50.0f64..50.0) {
        let v = a.num_vertices();
        let r = regions(v);
        let base = lip_vertex_error(&a, &b, &r).unwrap();
        let mut moved = a.clone().into_vertices();
        for t in 0..a.frames() {
            for u in v / 2..v {
                for c in 0..3 {
                    moved.data_mut()[(t * v + u) * 3 + c] += noise;
                }
            }
        }
        let moved = MotionSequence::new(moved, 30.0, 0).unwrap();
        prop_assert_eq!(lip_vertex_error(&moved, &b, &r).unwrap(), base);
        prop_assert!(base >= 0.0);
        prop_assert_eq!(lip_vertex_error(&a, &a, &r).unwrap(), 0.0);
    }

    #[test]
    fn lip_error_is_a_pseudometric((a, b, c) in pair()) {
        let r = regions(a.num_vertices());
        let third = MotionSequence::new(
            Tensor::from_vec(a.vertices().shape().to_vec(), a.vertices().data().iter().map(|x| x * 0.5 + c.vertices().data()[0]).collect()).unwrap(),
            30.0,
            0,
        ).unwrap();
        let ab = lip_vertex_error(&a, &b, &r).unwrap();
        let ba = lip_vertex_error(&b, &a, &r).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12);
        let ac = lip_vertex_error(&a, &third, &r).unwrap();
        let cb = lip_vertex_error(&third, &b, &r).unwrap();
        prop_assert!(ab <= ac + cb + 1e-9);
    }

    #[test]
    fn fdd_is_antisymmetric_and_zero_on_identity((a, b, h) in pair()) {
        let r = regions(a.num_vertices());
        prop_assert_eq!(fdd(&a, &a, &h, &r).unwrap(), 0.0);
        let ab = fdd(&a, &b, &h, &r).unwrap();
        let ba = fdd(&b, &a, &h, &r).unwrap();
        prop_assert!((ab + ba).abs() <= 1e-12);
    }

    #[test]
    fn fdd_ignores_a_constant_time_offset((a, b, h) in pair(), shift in 0usize..5) {
        // Dynamics are per-vertex temporal spreads, so reordering frames leaves them unchanged.
        let r = regions(a.num_vertices());
        let (t, v) = (a.frames(), a.num_vertices());
        let rot = |s: &MotionSequence<f64>| {
            let mut data = Vec::with_capacity(t * v * 3);
            for f in 0..t {
                data.extend_from_slice(s.frame((f + shift) % t));
            }
            seq(t, v, data)
        };
        let base = fdd(&a, &b, &h, &r).unwrap();
        prop_assert!((fdd(&rot(&a), &rot(&b), &h, &r).unwrap() - base).abs() <= 1e-12);
    }

    #[test]
    fn interpolation_stays_within_source_range(
        data in (2usize..20, 1usize..5).prop_flat_map(|(t, d)| (Just((t, d)), prop::collection::vec(-4.0f64..4.0, t * d))),
        multiple in 1usize..4,
    ) {
        let ((t, d), values) = data;
        let feats = AcousticFeatures { values: Tensor::from_vec(vec![t, d], values.clone()).unwrap(), frame_rate: 100.0 };
        let out = interpolate_features(&feats, 30.0 * multiple as f64, 30.0).unwrap();
        for c in 0..d {
            let col = (0..t).map(|r| values[r * d + c]);
            let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| (l.min(x), h.max(x)));
            for r in 0..out.frames() {
                let x = out.values.data()[r * d + c];
                prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
            }
        }
        prop_assert_eq!(out.values.data()[..d].to_vec(), values[..d].to_vec());
    }

    #[test]
    fn fmsq_round_trip_is_bit_exact(
        data in (1usize..6, 1usize..6).prop_flat_map(|(t, v)| (Just((t, v)), prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), t * v * 3))),
        subject in 0u32..100,
    ) {
        let ((t, v), values) = data;
        let s = MotionSequence::new(Tensor::from_vec(vec![t, v, 3], values).unwrap(), 25.0, subject).unwrap();
        let bytes = encode_sequence_bytes(&s);
        let back: MotionSequence<f64> = decode_sequence_bytes(Path::new("mem.fmsq"), &bytes).unwrap();
        let bits = |m: &MotionSequence<f64>| m.vertices().data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&s));
        prop_assert_eq!(back.subject_id, subject);
        prop_assert_eq!(encode_sequence_bytes(&back), bytes);
    }

    #[test]
    fn config_text_round_trips(
        heads_multiple in 1usize..16,
        seed in any::<u64>(),
        lr in 1e-6f64..1e-1,
        epochs in 0u64..1000,
        flags in any::<(bool, bool, bool, bool)>(),
    ) {
        let d = 4 * heads_multiple;
        let c = Config {
            d,
            seed,
            base_lr: lr,
            epochs,
            single_branch: flags.0,
            random_mask_init: flags.1,
            disable_hierarchy: flags.2,
            autoregressive_training: flags.3,
            ..Config::default()
        };
        let back = Config::parse(&c.to_text(), Path::new("p.cfg")).unwrap();
        prop_assert_eq!(back.hash(), c.hash());
        prop_assert_eq!(back, c.clone());
        prop_assert_eq!(Config { epochs: epochs + 1, ..c.clone() }.hash(), c.hash());
        prop_assert_ne!(Config { d: d + 4, ..c.clone() }.hash(), c.hash());
    }

    #[test]
    fn level_weights_are_a_distribution(seed in any::<u64>(), t in 1usize..30, hierarchy in any::<bool>()) {
        let config = ModelConfig {
            d0: 6, d: 8, d1: 3, encoder_heads: 2, decoder_heads: 4, fps: 30.0,
            durations: Default::default(), n_vertices: 2, n_subjects: 1,
            single_branch: false, disable_hierarchy: !hierarchy,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mask = mask_from_init(&MaskInit { m0: vec![0.2, 0.8] });
        let model = Model::register(&mut store, &mut rng, &config, Some(mask)).unwrap();
        let acoustic = Tensor::from_vec(vec![t, 6], (0..t * 6).map(|i| ((i as f64) * 0.37 + seed as f64 % 7.0).sin()).collect()).unwrap();
        let out = encode(&model.encoder, &store, &acoustic, &[Branch::Strong, Branch::Weak]).unwrap();
        for (_, w) in &out.weights {
            for r in 0..t {
                let row = w.row(r);
                prop_assert!(row.iter().all(|&x| x > 0.0 && x < 1.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }
}

fn tiny_trainer() -> (Config, Dataset<f64>) {
    let mut syn = SyntheticConfig::new(5, 3, 32, 6, 30.0, 16000);
    syn.n_subjects = 2;
    let config = Config { d: 8, d0: 8, d1: 4, n_subjects: 2, epochs: 3, base_lr: 1e-2, ..Config::default() };
    (config, Dataset::synthetic(&syn).unwrap())
}

#[test]
fn mask_stays_inside_the_open_unit_interval_while_training() {
    let (config, data) = tiny_trainer();
    let mut t = Trainer::new(&config, &data).unwrap();
    let before = t.model.mask_values(&t.params).unwrap();
    t.train().unwrap();
    let after = t.model.mask_values(&t.params).unwrap();
    assert!(after.iter().all(|&m| m > 0.0 && m < 1.0));
    assert_ne!(before, after);
    assert_eq!(t.log.len(), 9);
    for r in &t.log {
        assert!((r.graph.l_total - r.recomputed.l_total).abs() <= 1e-9 * r.graph.l_total.abs().max(1.0));
    }
}

#[test]
fn corrupting_any_checkpoint_byte_is_detected() {
    let (config, data) = tiny_trainer();
    let mut t = Trainer::new(&config, &data).unwrap();
    t.run_steps(2).unwrap();
    let bytes = encode_checkpoint(&t.checkpoint());
    let path = Path::new("mem.ckpt");
    assert!(decode_checkpoint::<f64>(path, &bytes, Some(&config)).is_ok());
    let stride = (bytes.len() / 97).max(1);
    for i in (0..bytes.len()).step_by(stride) {
        let mut bad = bytes.clone();
        bad[i] ^= 0x40;
        assert!(decode_checkpoint::<f64>(path, &bad, Some(&config)).is_err(), "flip at byte {i} accepted");
    }
    assert!(decode_checkpoint::<f64>(path, &bytes[..bytes.len() - 1], Some(&config)).is_err());
}
