//! Facial motion sequences, neutral geometry, region masks and their file
//! formats, plus the synthetic audio/motion generator.

mod io;
mod synthetic;

pub use io::{
    decode_sequence_bytes, encode_sequence_bytes, read_neutral, read_regions, read_sequence, write_neutral,
    write_regions, write_sequence, FMSQ_MAGIC, FMSQ_VERSION, FNEU_MAGIC, FNEU_VERSION,
};
pub use synthetic::{generate_synthetic_dataset, SyntheticConfig, SyntheticPair};

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// `T x V x 3` vertex positions in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence<S: Scalar = f64> {
    vertices: Tensor<S>,
    pub fps: f32,
    pub subject_id: u32,
}

impl<S: Scalar> MotionSequence<S> {
    pub fn new(vertices: Tensor<S>, fps: f32, subject_id: u32) -> Result<Self> {
        match vertices.shape() {
            [t, v, 3] if *t >= 1 && *v >= 1 => {}
            s => return Err(Error::shape("motion_sequence", format!("expected T x V x 3 with T, V >= 1, got {s:?}"))),
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::InvalidArgument(format!("fps must be positive, got {fps}")));
        }
        if !vertices.all_finite() {
            return Err(Error::NonFinite { op: "motion_sequence" });
        }
        Ok(MotionSequence { vertices, fps, subject_id })
    }

    pub fn frames(&self) -> usize {
        self.vertices.shape()[0]
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.shape()[1]
    }

    pub fn vertices(&self) -> &Tensor<S> {
        &self.vertices
    }

    pub fn into_vertices(self) -> Tensor<S> {
        self.vertices
    }

    /// Position of vertex `v` at frame `t`.
    pub fn point(&self, t: usize, v: usize) -> [S; 3] {
        let n = self.num_vertices();
        let d = self.vertices.data();
        let o = (t * n + v) * 3;
        [d[o], d[o + 1], d[o + 2]]
    }

    /// Frame `t` flattened as `3V` coordinates.
    pub fn frame(&self, t: usize) -> &[S] {
        let n = self.num_vertices() * 3;
        &self.vertices.data()[t * n..(t + 1) * n]
    }

    /// First `len` frames.
    pub fn prefix(&self, len: usize) -> Result<Self> {
        if len == 0 || len > self.frames() {
            return Err(Error::InvalidArgument(format!("prefix of {len} frames from {}", self.frames())));
        }
        let n = self.num_vertices() * 3;
        let data = self.vertices.data()[..len * n].to_vec();
        Self::new(Tensor::from_vec(vec![len, self.num_vertices(), 3], data)?, self.fps, self.subject_id)
    }

    pub fn cast<T: Scalar>(&self) -> MotionSequence<T> {
        MotionSequence { vertices: self.vertices.cast(), fps: self.fps, subject_id: self.subject_id }
    }
}

/// Rest pose `V x 3` in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct NeutralGeometry<S: Scalar = f64> {
    vertices: Tensor<S>,
}

impl<S: Scalar> NeutralGeometry<S> {
    pub fn new(vertices: Tensor<S>) -> Result<Self> {
        match vertices.shape() {
            [v, 3] if *v >= 1 => {}
            s => return Err(Error::shape("neutral_geometry", format!("expected V x 3, got {s:?}"))),
        }
        if !vertices.all_finite() {
            return Err(Error::NonFinite { op: "neutral_geometry" });
        }
        Ok(NeutralGeometry { vertices })
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.shape()[0]
    }

    pub fn vertices(&self) -> &Tensor<S> {
        &self.vertices
    }

    pub fn point(&self, v: usize) -> [S; 3] {
        let d = self.vertices.data();
        [d[3 * v], d[3 * v + 1], d[3 * v + 2]]
    }

    /// A sequence holding this geometry at every frame.
    pub fn repeated(&self, frames: usize, fps: f32, subject_id: u32) -> Result<MotionSequence<S>> {
        let mut data = Vec::with_capacity(frames * self.vertices.len());
        for _ in 0..frames {
            data.extend_from_slice(self.vertices.data());
        }
        MotionSequence::new(Tensor::from_vec(vec![frames, self.num_vertices(), 3], data)?, fps, subject_id)
    }

    pub fn cast<T: Scalar>(&self) -> NeutralGeometry<T> {
        NeutralGeometry { vertices: self.vertices.cast() }
    }
}

/// Vertex index sets used by the evaluation metrics.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RegionMask {
    pub lip_indices: BTreeSet<usize>,
    pub upper_face_indices: BTreeSet<usize>,
}

impl RegionMask {
    pub fn new(lip: impl IntoIterator<Item = usize>, upper: impl IntoIterator<Item = usize>) -> Self {
        RegionMask { lip_indices: lip.into_iter().collect(), upper_face_indices: upper.into_iter().collect() }
    }

    pub fn validate(&self, num_vertices: usize) -> Result<()> {
        if let Some(&i) = self.lip_indices.iter().chain(&self.upper_face_indices).find(|&&i| i >= num_vertices) {
            return Err(Error::InvalidArgument(format!("region index {i} out of range for {num_vertices} vertices")));
        }
        if let Some(i) = self.lip_indices.intersection(&self.upper_face_indices).next() {
            return Err(Error::InvalidArgument(format!("vertex {i} is in both lip and upper-face regions")));
        }
        Ok(())
    }
}

fn check_pair<S: Scalar>(op: &'static str, a: &MotionSequence<S>, b: &MotionSequence<S>) -> Result<()> {
    if a.vertices.shape() != b.vertices.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.vertices.shape(), b.vertices.shape())));
    }
    Ok(())
}

pub(crate) fn distance<S: Scalar>(a: [S; 3], b: [S; 3]) -> S {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Per-vertex Euclidean distance between `a` and `b`, averaged over frames.
pub fn mean_vertex_error<S: Scalar>(a: &MotionSequence<S>, b: &MotionSequence<S>) -> Result<Vec<S>> {
    check_pair("mean_vertex_error", a, b)?;
    let (t, v) = (a.frames(), a.num_vertices());
    let mut acc = vec![S::zero(); v];
    for f in 0..t {
        for (j, slot) in acc.iter_mut().enumerate() {
            *slot += distance(a.point(f, j), b.point(f, j));
        }
    }
    let tf = S::from_usize(t).unwrap();
    Ok(acc.into_iter().map(|s| s / tf).collect())
}

pub(crate) fn ensure_same_shape<S: Scalar>(
    op: &'static str,
    a: &MotionSequence<S>,
    b: &MotionSequence<S>,
) -> Result<()> {
    check_pair(op, a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(frames: usize, verts: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> MotionSequence<f64> {
        let mut data = Vec::new();
        for t in 0..frames {
            for v in 0..verts {
                data.extend_from_slice(&f(t, v));
            }
        }
        MotionSequence::new(Tensor::from_vec(vec![frames, verts, 3], data).unwrap(), 30.0, 0).unwrap()
    }

    #[test]
    fn identical_sequences_have_zero_error() {
        let a = seq(4, 3, |t, v| [t as f64, v as f64, 1.0]);
        assert_eq!(mean_vertex_error(&a, &a).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn offset_345_gives_five() {
        let a = seq(4, 3, |t, v| [t as f64, v as f64, 1.0]);
        let b = seq(4, 3, |t, v| {
            let p = [t as f64, v as f64, 1.0];
            if v == 1 {
                [p[0] + 3.0, p[1] + 4.0, p[2]]
            } else {
                p
            }
        });
        let e = mean_vertex_error(&a, &b).unwrap();
        assert_eq!(e, vec![0.0, 5.0, 0.0]);
        let half = seq(4, 3, |t, v| {
            let p = [t as f64, v as f64, 1.0];
            if v == 1 && t % 2 == 0 {
                [p[0] + 3.0, p[1] + 4.0, p[2]]
            } else {
                p
            }
        });
        assert_eq!(mean_vertex_error(&a, &half).unwrap()[1], 2.5);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let a = seq(4, 3, |_, _| [0.0; 3]);
        let b = seq(4, 2, |_, _| [0.0; 3]);
        assert!(mean_vertex_error(&a, &b).is_err());
    }

    #[test]
    fn sequence_invariants() {
        assert!(MotionSequence::new(Tensor::<f64>::zeros(vec![0, 2, 3]), 30.0, 0).is_err());
        assert!(MotionSequence::new(Tensor::<f64>::zeros(vec![1, 2, 3]), 0.0, 0).is_err());
        assert!(MotionSequence::new(Tensor::<f64>::zeros(vec![1, 2, 2]), 30.0, 0).is_err());
    }

    #[test]
    fn region_validation() {
        assert!(RegionMask::new([0, 1], [2]).validate(3).is_ok());
        assert!(RegionMask::new([0, 1], [1]).validate(3).is_err());
        assert!(RegionMask::new([5], [1]).validate(3).is_err());
    }
}
