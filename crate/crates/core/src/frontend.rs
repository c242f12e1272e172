//! Acoustic features: WAV decoding, log filterbank energies and temporal
//! interpolation onto the motion frame grid.

use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::{lit, Scalar};

/// Added to filterbank energies before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip<S: Scalar = f64> {
    pub samples: Vec<S>,
    pub sample_rate: u32,
}

impl<S: Scalar> AudioClip<S> {
    pub fn new(samples: Vec<S>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite { op: "audio_clip" });
        }
        Ok(AudioClip { samples, sample_rate })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// `T_a x d0` features at `frame_rate` Hz.
#[derive(Clone, Debug, PartialEq)]
pub struct AcousticFeatures<S: Scalar = f64> {
    pub values: Tensor<S>,
    pub frame_rate: f64,
}

impl<S: Scalar> AcousticFeatures<S> {
    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Frequency spacing of the triangular filterbank.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FrontendVariant {
    #[default]
    Mel,
    /// Equal-width bands in Hz.
    Linear,
}

impl std::str::FromStr for FrontendVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mel" => Ok(FrontendVariant::Mel),
            "linear" => Ok(FrontendVariant::Linear),
            other => Err(Error::Config(format!("unknown frontend variant `{other}`"))),
        }
    }
}

impl std::fmt::Display for FrontendVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FrontendVariant::Mel => "mel",
            FrontendVariant::Linear => "linear",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrontendConfig {
    pub n_bands: usize,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub variant: FrontendVariant,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig { n_bands: 80, win_ms: 25.0, hop_ms: 10.0, variant: FrontendVariant::Mel }
    }
}

/// Reads a 16-bit PCM mono WAV, scaling samples by 1/32768.
pub fn load_wav<S: Scalar>(path: impl AsRef<Path>) -> Result<AudioClip<S>> {
    let path = path.as_ref();
    let malformed = |detail: String| Error::MalformedWav { path: path.to_path_buf(), detail };
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) if io.kind() != std::io::ErrorKind::UnexpectedEof => Error::Io(io),
        hound::Error::Unsupported => {
            Error::CompressedWav { path: path.to_path_buf(), detail: "unsupported format tag".into() }
        }
        other => malformed(other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::StereoWav { path: path.to_path_buf(), channels: spec.channels });
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::CompressedWav {
            path: path.to_path_buf(),
            detail: format!("{:?} with {} bits per sample", spec.sample_format, spec.bits_per_sample),
        });
    }
    let scale = lit::<S>(1.0 / 32768.0);
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| S::from_i16(v).unwrap() * scale))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| malformed(e.to_string()))?;
    AudioClip::new(samples, spec.sample_rate)
}

/// Writes a 16-bit PCM mono WAV; samples are clamped to [-1, 1).
pub fn write_wav<S: Scalar>(clip: &AudioClip<S>, path: impl AsRef<Path>) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_io = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::InvalidArgument(other.to_string()),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(to_io)?;
    for &s in &clip.samples {
        let v = (s.to_f64_exact() * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(to_io)?;
    }
    w.finalize().map_err(to_io)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Edge frequencies (Hz) of `n_bands` triangular filters: `n_bands + 2` points.
pub fn band_edges(n_bands: usize, sample_rate: u32, variant: FrontendVariant) -> Vec<f64> {
    let nyquist = sample_rate as f64 / 2.0;
    let (lo, hi) = match variant {
        FrontendVariant::Mel => (hz_to_mel(0.0), hz_to_mel(nyquist)),
        FrontendVariant::Linear => (0.0, nyquist),
    };
    (0..n_bands + 2)
        .map(|i| {
            let p = lo + (hi - lo) * i as f64 / (n_bands + 1) as f64;
            match variant {
                FrontendVariant::Mel => mel_to_hz(p),
                FrontendVariant::Linear => p,
            }
        })
        .collect()
}

/// `n_bands x (n_fft/2 + 1)` triangular weights.
fn filterbank(n_bands: usize, n_fft: usize, sample_rate: u32, variant: FrontendVariant) -> Vec<Vec<f64>> {
    let edges = band_edges(n_bands, sample_rate, variant);
    let bins = n_fft / 2 + 1;
    (0..n_bands)
        .map(|m| {
            let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * sample_rate as f64 / n_fft as f64;
                    if f >= lo && f <= c && c > lo {
                        (f - lo) / (c - lo)
                    } else if f > c && f <= hi {
                        (hi - f) / (hi - c)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

pub(crate) fn periodic_hann<S: Scalar>(n: usize) -> Vec<S> {
    (0..n).map(|i| lit::<S>(0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())).collect()
}

fn ms_to_samples(ms: f64, sample_rate: u32) -> usize {
    (ms * sample_rate as f64 / 1000.0).round() as usize
}

/// Number of analysis frames for `n_samples` samples.
pub fn feature_frames(n_samples: usize, sample_rate: u32, win_ms: f64, hop_ms: f64) -> Option<usize> {
    let win = ms_to_samples(win_ms, sample_rate);
    let hop = ms_to_samples(hop_ms, sample_rate).max(1);
    (win >= 1 && n_samples >= win).then(|| 1 + (n_samples - win) / hop)
}

/// `log(filterbank energy + 1e-10)` per Hann-windowed frame.
pub fn melspectrogram<S: Scalar>(clip: &AudioClip<S>, config: &FrontendConfig) -> Result<AcousticFeatures<S>> {
    let sr = clip.sample_rate;
    let win = ms_to_samples(config.win_ms, sr);
    let hop = ms_to_samples(config.hop_ms, sr).max(1);
    let frames = feature_frames(clip.samples.len(), sr, config.win_ms, config.hop_ms).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "clip of {} samples is shorter than one {win}-sample window",
            clip.samples.len()
        ))
    })?;
    if config.n_bands == 0 {
        return Err(Error::InvalidArgument("n_bands must be positive".into()));
    }
    let bank: Vec<Vec<S>> = filterbank(config.n_bands, win, sr, config.variant)
        .into_iter()
        .map(|row| row.into_iter().map(S::lit).collect())
        .collect();
    let window = periodic_hann::<S>(win);
    let fft = FftPlanner::<S>::new().plan_fft_forward(win);
    let bins = win / 2 + 1;
    let floor = lit::<S>(LOG_FLOOR);
    let mut data = Vec::with_capacity(frames * config.n_bands);
    let mut buf = vec![Complex::new(S::zero(), S::zero()); win];
    let mut power = vec![S::zero(); bins];
    for f in 0..frames {
        let start = f * hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(clip.samples[start + i] * window[i], S::zero());
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for row in &bank {
            let e: S = row.iter().zip(&power).map(|(&w, &p)| w * p).sum();
            data.push((e + floor).ln());
        }
    }
    Ok(AcousticFeatures {
        values: Tensor::from_vec(vec![frames, config.n_bands], data)?,
        frame_rate: 1000.0 / config.hop_ms,
    })
}

/// Linear interpolation along time onto `target_rate`, which must be a positive
/// integer multiple of `motion_fps`. Endpoints are clamped.
pub fn interpolate_features<S: Scalar>(
    feats: &AcousticFeatures<S>,
    target_rate: f64,
    motion_fps: f64,
) -> Result<AcousticFeatures<S>> {
    let ratio = target_rate / motion_fps;
    if !(motion_fps > 0.0) || !(ratio >= 1.0) || (ratio - ratio.round()).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "target rate {target_rate} Hz is not a positive multiple of the motion rate {motion_fps} Hz"
        )));
    }
    if target_rate == feats.frame_rate {
        return Ok(feats.clone());
    }
    let (src_len, dim) = (feats.frames(), feats.dim());
    let out_len = ((src_len as f64 * target_rate / feats.frame_rate).round() as usize).max(1);
    let step = feats.frame_rate / target_rate;
    let src = feats.values.data();
    let mut data = Vec::with_capacity(out_len * dim);
    for i in 0..out_len {
        let pos = (i as f64 * step).min((src_len - 1) as f64);
        let j = pos.floor() as usize;
        let frac = lit::<S>(pos - j as f64);
        let k = (j + 1).min(src_len - 1);
        for c in 0..dim {
            let a = src[j * dim + c];
            let b = src[k * dim + c];
            data.push(a + (b - a) * frac);
        }
    }
    Ok(AcousticFeatures { values: Tensor::from_vec(vec![out_len, dim], data)?, frame_rate: target_rate })
}

/// Averages groups of `n` consecutive frames, taking features from `n * fps` to `fps`.
pub fn pool_frames<S: Scalar>(feats: &AcousticFeatures<S>, n: usize) -> Result<AcousticFeatures<S>> {
    if n == 0 {
        return Err(Error::InvalidArgument("rate multiple must be positive".into()));
    }
    if n == 1 {
        return Ok(feats.clone());
    }
    let (len, dim) = (feats.frames(), feats.dim());
    let groups = len.div_ceil(n);
    let mut data = Vec::with_capacity(groups * dim);
    for g in 0..groups {
        let rows = g * n..((g + 1) * n).min(len);
        let count = lit::<S>(rows.len() as f64);
        for c in 0..dim {
            data.push(rows.clone().map(|r| feats.values.data()[r * dim + c]).sum::<S>() / count);
        }
    }
    Ok(AcousticFeatures { values: Tensor::from_vec(vec![groups, dim], data)?, frame_rate: feats.frame_rate / n as f64 })
}

/// Truncates or zero-pads to exactly `frames` rows.
pub fn align_frames<S: Scalar>(feats: &AcousticFeatures<S>, frames: usize) -> Result<AcousticFeatures<S>> {
    let dim = feats.dim();
    let mut data = feats.values.data()[..feats.frames().min(frames) * dim].to_vec();
    data.resize(frames * dim, S::zero());
    Ok(AcousticFeatures { values: Tensor::from_vec(vec![frames, dim], data)?, frame_rate: feats.frame_rate })
}

/// Frontend pipeline producing one `d0`-dimensional row per motion frame.
pub fn features_for_motion<S: Scalar>(
    clip: &AudioClip<S>,
    config: &FrontendConfig,
    motion_fps: f64,
    rate_multiple: usize,
    frames: usize,
) -> Result<AcousticFeatures<S>> {
    let raw = melspectrogram(clip, config)?;
    let interp = interpolate_features(&raw, motion_fps * rate_multiple as f64, motion_fps)?;
    let pooled = pool_frames(&interp, rate_multiple)?;
    align_frames(&pooled, frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(samples: Vec<f64>) -> AudioClip<f64> {
        AudioClip::new(samples, 16000).unwrap()
    }

    #[test]
    fn silence_hits_the_floor() {
        let f = melspectrogram(&clip(vec![0.0; 1600]), &FrontendConfig::default()).unwrap();
        assert_eq!(f.dim(), 80);
        assert_eq!(f.frames(), 1 + (1600 - 400) / 160);
        assert!(f.values.data().iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn too_short_clip_errors() {
        assert!(melspectrogram(&clip(vec![0.0; 399]), &FrontendConfig::default()).is_err());
        assert!(melspectrogram(&clip(vec![0.0; 400]), &FrontendConfig::default()).is_ok());
    }

    #[test]
    fn doubling_amplitude_adds_log4() {
        let s: Vec<f64> =
            (0..4000).map(|i| 0.2 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 16000.0).sin()).collect();
        let d: Vec<f64> = s.iter().map(|x| 2.0 * x).collect();
        let a = melspectrogram(&clip(s), &FrontendConfig::default()).unwrap();
        let b = melspectrogram(&clip(d), &FrontendConfig::default()).unwrap();
        for (x, y) in a.values.data().iter().zip(b.values.data()) {
            if *x > 0.0 {
                assert!((y - x - 4f64.ln()).abs() < 1e-9, "{x} {y}");
            }
        }
    }

    #[test]
    fn interpolation_identity_and_midpoint() {
        let f = AcousticFeatures { values: Tensor::from_vec(vec![2, 1], vec![0.0, 10.0]).unwrap(), frame_rate: 30.0 };
        assert_eq!(interpolate_features(&f, 30.0, 30.0).unwrap(), f);
        let up = interpolate_features(&f, 60.0, 30.0).unwrap();
        assert_eq!(up.values.data(), &[0.0, 5.0, 10.0, 10.0]);
        assert!(interpolate_features(&f, 45.0, 30.0).is_err());
        assert!(interpolate_features(&f, 15.0, 30.0).is_err());
    }

    #[test]
    fn pooling_and_alignment() {
        let f = AcousticFeatures {
            values: Tensor::from_vec(vec![5, 1], vec![1.0, 3.0, 5.0, 7.0, 9.0]).unwrap(),
            frame_rate: 60.0,
        };
        let p = pool_frames(&f, 2).unwrap();
        assert_eq!(p.values.data(), &[2.0, 6.0, 9.0]);
        assert_eq!(p.frame_rate, 30.0);
        assert_eq!(align_frames(&p, 2).unwrap().values.data(), &[2.0, 6.0]);
        assert_eq!(align_frames(&p, 4).unwrap().values.data(), &[2.0, 6.0, 9.0, 0.0]);
    }

    #[test]
    fn variant_parse() {
        assert_eq!("linear".parse::<FrontendVariant>().unwrap(), FrontendVariant::Linear);
        assert!("wavlm".parse::<FrontendVariant>().is_err());
    }
}
