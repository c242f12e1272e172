//! Facial activity intensity: vertex displacement signals, their short-time
//! spectra, the fundamental-band readout and the mask initializer derived
//! from it.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::frontend::periodic_hann;
use crate::mesh_motion::{distance, MotionSequence, NeutralGeometry};
use crate::numerics::Tensor;
use crate::scalar::{lit, Scalar};

/// Lowest non-DC bin.
pub const FUNDAMENTAL_BAND: usize = 1;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Per-frame distance of every vertex from its neutral position, `T x V`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField<S: Scalar = f64> {
    pub values: Tensor<S>,
}

impl<S: Scalar> DisplacementField<S> {
    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn num_vertices(&self) -> usize {
        self.values.shape()[1]
    }

    /// Time series of vertex `v`.
    pub fn column(&self, v: usize) -> Vec<S> {
        let n = self.num_vertices();
        (0..self.frames()).map(|t| self.values.data()[t * n + v]).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Window {
    #[default]
    Hann,
    Rectangular,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
    pub window: Window,
}

impl StftConfig {
    pub fn hann(window_len: usize, hop: usize) -> Self {
        StftConfig { window_len, hop, window: Window::Hann }
    }

    /// One second of frames with a one-frame hop.
    pub fn for_fps(fps: f32) -> Self {
        Self::hann((fps.round() as usize).max(2), 1)
    }

    pub fn bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    fn validate(&self, len: usize) -> Result<()> {
        if self.window_len == 0 || self.hop == 0 {
            return Err(Error::InvalidArgument("STFT window length and hop must be positive".into()));
        }
        if self.window_len > len {
            return Err(Error::InvalidArgument(format!(
                "STFT window of {} frames is longer than the {len}-frame signal",
                self.window_len
            )));
        }
        Ok(())
    }

    pub fn frame_count(&self, len: usize) -> usize {
        1 + (len - self.window_len) / self.hop
    }

    /// Analysis frame whose centre is nearest to sample `t`; ties go to the earlier frame.
    pub fn nearest_frame(&self, t: usize, len: usize) -> usize {
        let centre_offset = (self.window_len as f64 - 1.0) / 2.0;
        let f = ((t as f64 - centre_offset) / self.hop as f64 - 0.5).ceil();
        (f.max(0.0) as usize).min(self.frame_count(len) - 1)
    }

    pub fn window_values<S: Scalar>(&self) -> Vec<S> {
        match self.window {
            Window::Hann => periodic_hann(self.window_len),
            Window::Rectangular => vec![S::one(); self.window_len],
        }
    }
}

pub fn compute_displacements<S: Scalar>(
    seq: &MotionSequence<S>,
    neutral: &NeutralGeometry<S>,
) -> Result<DisplacementField<S>> {
    if seq.num_vertices() != neutral.num_vertices() {
        return Err(Error::shape(
            "compute_displacements",
            format!("sequence has {} vertices, neutral geometry {}", seq.num_vertices(), neutral.num_vertices()),
        ));
    }
    let (t, v) = (seq.frames(), seq.num_vertices());
    let mut data = Vec::with_capacity(t * v);
    for f in 0..t {
        for j in 0..v {
            data.push(distance(seq.point(f, j), neutral.point(j)));
        }
    }
    Ok(DisplacementField { values: Tensor::from_vec(vec![t, v], data)? })
}

/// Magnitude spectra of every analysis frame, `bins x n_frames`.
pub fn stft_frames<S: Scalar>(signal: &[S], config: &StftConfig) -> Result<Tensor<S>> {
    config.validate(signal.len())?;
    let (n, bins, frames) = (config.window_len, config.bins(), config.frame_count(signal.len()));
    let window = config.window_values::<S>();
    let fft = FftPlanner::<S>::new().plan_fft_forward(n);
    let mut out = vec![S::zero(); bins * frames];
    let mut buf = vec![Complex::new(S::zero(), S::zero()); n];
    for f in 0..frames {
        let start = f * config.hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(signal[start + i] * window[i], S::zero());
        }
        fft.process(&mut buf);
        for k in 0..bins {
            out[k * frames + f] = buf[k].norm();
        }
    }
    Tensor::from_vec(vec![bins, frames], out)
}

/// Magnitude spectra resampled onto the signal's own time axis, `bins x T`.
pub fn stft<S: Scalar>(signal: &[S], config: &StftConfig) -> Result<Tensor<S>> {
    let frames = stft_frames(signal, config)?;
    let (bins, n_frames) = frames.dims2()?;
    let len = signal.len();
    let mut out = Vec::with_capacity(bins * len);
    for k in 0..bins {
        for t in 0..len {
            out.push(frames.data()[k * n_frames + config.nearest_frame(t, len)]);
        }
    }
    Tensor::from_vec(vec![bins, len], out)
}

/// STFT amplitudes of every vertex's displacement signal, `b x T x V`.
#[derive(Clone, Debug, PartialEq)]
pub struct IntensityMap<S: Scalar = f64> {
    pub amplitudes: Tensor<S>,
    pub window_len: usize,
    pub hop: usize,
    pub fundamental_band_index: usize,
}

impl<S: Scalar> IntensityMap<S> {
    pub fn bands(&self) -> usize {
        self.amplitudes.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.amplitudes.shape()[1]
    }

    pub fn num_vertices(&self) -> usize {
        self.amplitudes.shape()[2]
    }

    /// Amplitude map of one band, `T x V`.
    pub fn band(&self, k: usize) -> Tensor<S> {
        let tv = self.frames() * self.num_vertices();
        Tensor::from_vec(
            vec![self.frames(), self.num_vertices()],
            self.amplitudes.data()[k * tv..(k + 1) * tv].to_vec(),
        )
        .expect("band shape")
    }

    pub fn fundamental(&self) -> Tensor<S> {
        self.band(self.fundamental_band_index)
    }

    /// Time-mean fundamental-band amplitude per vertex.
    pub fn mean_fundamental(&self) -> Vec<S> {
        let i0 = self.fundamental();
        let (t, v) = (self.frames(), self.num_vertices());
        let tf = lit::<S>(t as f64);
        (0..v).map(|j| (0..t).map(|f| i0.data()[f * v + j]).sum::<S>() / tf).collect()
    }
}

pub fn compute_intensity<S: Scalar>(disp: &DisplacementField<S>, config: &StftConfig) -> Result<IntensityMap<S>> {
    if config.bins() <= FUNDAMENTAL_BAND {
        return Err(Error::InvalidArgument(format!("window of {} frames has no non-DC band", config.window_len)));
    }
    let (t, v, b) = (disp.frames(), disp.num_vertices(), config.bins());
    let mut data = vec![S::zero(); b * t * v];
    for j in 0..v {
        let spec = stft(&disp.column(j), config)?;
        for k in 0..b {
            for f in 0..t {
                data[(k * t + f) * v + j] = spec.data()[k * t + f];
            }
        }
    }
    Ok(IntensityMap {
        amplitudes: Tensor::from_vec(vec![b, t, v], data)?,
        window_len: config.window_len,
        hop: config.hop,
        fundamental_band_index: FUNDAMENTAL_BAND,
    })
}

/// Normalized per-vertex activity in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct MaskInit<S: Scalar = f64> {
    pub m0: Vec<S>,
}

/// Min-max normalization across vertices; a constant input maps to 0.5 everywhere.
pub fn normalize_min_max<S: Scalar>(raw: &[S]) -> MaskInit<S> {
    let min = raw.iter().copied().fold(S::infinity(), S::min);
    let max = raw.iter().copied().fold(S::neg_infinity(), S::max);
    let range = max - min;
    let m0 = if !(range > S::zero()) {
        vec![lit(0.5); raw.len()]
    } else {
        raw.iter().map(|&x| ((x - min) / range).max(S::zero()).min(S::one())).collect()
    };
    MaskInit { m0 }
}

pub fn init_mask<S: Scalar>(intensity: &IntensityMap<S>) -> MaskInit<S> {
    normalize_min_max(&intensity.mean_fundamental())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntensityPartition {
    pub strong: Vec<usize>,
    pub weak: Vec<usize>,
}

/// Vertices with `m0 >= threshold` are strong.
pub fn classify_intensity<S: Scalar>(m0: &MaskInit<S>, threshold: S) -> IntensityPartition {
    let (strong, weak) = (0..m0.m0.len()).partition(|&v| m0.m0[v] >= threshold);
    IntensityPartition { strong, weak }
}

/// Displacements, intensity map and mask initializer of one sequence.
pub fn analyze<S: Scalar>(
    seq: &MotionSequence<S>,
    neutral: &NeutralGeometry<S>,
    config: &StftConfig,
) -> Result<(IntensityMap<S>, MaskInit<S>)> {
    let disp = compute_displacements(seq, neutral)?;
    let map = compute_intensity(&disp, config)?;
    let init = init_mask(&map);
    Ok((map, init))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn displacement_of_linear_drift() {
        let t = 4;
        let data: Vec<f64> = (0..t).flat_map(|f| [1.0 + f as f64, 2.0, 3.0, 0.0, 0.0, 0.0]).collect();
        let seq = MotionSequence::new(Tensor::from_vec(vec![t, 2, 3], data).unwrap(), 30.0, 0).unwrap();
        let neutral =
            NeutralGeometry::new(Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap()).unwrap();
        let d = compute_displacements(&seq, &neutral).unwrap();
        assert_eq!(d.column(0), vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(d.column(1), vec![0.0; 4]);
        let single = seq.prefix(1).unwrap();
        assert_eq!(compute_displacements(&single, &neutral).unwrap().values.shape(), &[1, 2]);
        let wrong = NeutralGeometry::new(Tensor::<f64>::zeros(vec![3, 3])).unwrap();
        assert!(compute_displacements(&seq, &wrong).is_err());
    }

    #[test]
    fn zero_and_constant_signals() {
        let cfg = StftConfig::hann(8, 2);
        let z = stft(&[0.0f64; 20], &cfg).unwrap();
        assert!(z.data().iter().all(|&x| x == 0.0));
        let rect = StftConfig { window: Window::Rectangular, ..cfg };
        let c = stft_frames(&[2.0f64; 20], &rect).unwrap();
        let (bins, frames) = c.dims2().unwrap();
        for k in 1..bins {
            for f in 0..frames {
                assert!(c.data()[k * frames + f] < 1e-12);
            }
        }
        assert!(close(c.data()[0], 16.0, 1e-12));
    }

    #[test]
    fn window_longer_than_signal_errors() {
        assert!(stft(&[1.0f64; 5], &StftConfig::hann(6, 1)).is_err());
    }

    #[test]
    fn nearest_frame_assignment_covers_signal() {
        let cfg = StftConfig::hann(4, 1);
        let frames: Vec<usize> = (0..8).map(|t| cfg.nearest_frame(t, 8)).collect();
        assert_eq!(frames, vec![0, 0, 0, 1, 2, 3, 4, 4]);
        assert_eq!(stft(&[1.0f64; 8], &cfg).unwrap().shape(), &[3, 8]);
    }

    #[test]
    fn min_max_examples() {
        assert_eq!(normalize_min_max(&[0.0f64, 4.0]).m0, vec![0.0, 1.0]);
        assert_eq!(normalize_min_max(&[1.0f64, 2.0, 3.0]).m0, vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize_min_max(&[7.0f64; 3]).m0, vec![0.5; 3]);
    }

    #[test]
    fn classify_boundary_inclusive() {
        let m = MaskInit { m0: vec![0.0f64, 0.5, 1.0] };
        let p = classify_intensity(&m, 0.5);
        assert_eq!(p.strong, vec![1, 2]);
        assert_eq!(p.weak, vec![0]);
        assert_eq!(classify_intensity(&m, 0.51).strong, vec![2]);
    }

    #[test]
    fn intensity_requires_a_non_dc_band() {
        let d = DisplacementField { values: Tensor::<f64>::zeros(vec![4, 2]) };
        assert!(compute_intensity(&d, &StftConfig::hann(1, 1)).is_err());
        let map = compute_intensity(&d, &StftConfig::hann(4, 1)).unwrap();
        assert_eq!(map.amplitudes.shape(), &[3, 4, 2]);
        assert!(map.amplitudes.data().iter().all(|&x| x == 0.0));
        assert_eq!(init_mask(&map).m0, vec![0.5, 0.5]);
    }
}
