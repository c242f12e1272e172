//! Training objectives and evaluation metrics.
//!
//! The graph builders operate on `T x V x 3` vertex tensors and a `V x 1`
//! mask; the plain functions compute the same quantities on sequences.

use crate::error::{Error, Result};
use crate::mesh_motion::{distance, ensure_same_shape, MotionSequence, NeutralGeometry, RegionMask};
use crate::numerics::{Graph, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport<S: Scalar = f64> {
    pub l_rec: S,
    pub l_vel: S,
    pub l_total: S,
}

impl<S: Scalar> LossReport<S> {
    pub fn new(l_rec: S, l_vel: S) -> Self {
        LossReport { l_rec, l_vel, l_total: l_rec + l_vel }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport<S: Scalar = f64> {
    pub lip_vertex_error: S,
    pub fdd: S,
}

/// Graph handles of the two loss terms and their sum.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_rec: Var,
    pub l_vel: Var,
    pub l_total: Var,
}

fn check_vars<S: Scalar>(g: &Graph<S>, op: &'static str, pred: Var, gt: Var) -> Result<(usize, usize)> {
    let (p, t) = (g.value(pred).shape(), g.value(gt).shape());
    match (p, t) {
        ([tp, vp, 3], [tt, vt, 3]) if tp == tt && vp == vt => Ok((*tp, *vp)),
        _ => Err(Error::shape(op, format!("{p:?} vs {t:?}"))),
    }
}

pub fn reconstruction_loss_var<S: Scalar>(g: &mut Graph<S>, pred: Var, gt: Var) -> Result<Var> {
    check_vars(g, "reconstruction_loss", pred, gt)?;
    let diff = g.sub(gt, pred)?;
    let sq = g.mul(diff, diff)?;
    g.sum(sq)
}

/// `mask` is `V x 1`; `None` means a mask of ones.
pub fn velocity_loss_var<S: Scalar>(g: &mut Graph<S>, pred: Var, gt: Var, mask: Option<Var>) -> Result<Var> {
    let (t, v) = check_vars(g, "velocity_loss", pred, gt)?;
    if t < 2 {
        return Err(Error::InvalidArgument(format!("velocity loss needs at least 2 frames, got {t}")));
    }
    if let Some(m) = mask {
        if g.value(m).shape() != [v, 1] {
            return Err(Error::shape("velocity_loss", format!("mask {:?} for {v} vertices", g.value(m).shape())));
        }
    }
    let velocity = |g: &mut Graph<S>, x: Var| -> Result<Var> {
        let next = g.slice(x, 0, 1, t - 1)?;
        let prev = g.slice(x, 0, 0, t - 1)?;
        g.sub(next, prev)
    };
    let vg = velocity(g, gt)?;
    let vp = velocity(g, pred)?;
    let mut diff = g.sub(vg, vp)?;
    if let Some(m) = mask {
        diff = g.mul(diff, m)?;
    }
    let sq = g.mul(diff, diff)?;
    g.sum(sq)
}

pub fn total_loss_var<S: Scalar>(g: &mut Graph<S>, pred: Var, gt: Var, mask: Option<Var>) -> Result<LossVars> {
    let l_rec = reconstruction_loss_var(g, pred, gt)?;
    let l_vel = velocity_loss_var(g, pred, gt, mask)?;
    let l_total = g.add(l_rec, l_vel)?;
    Ok(LossVars { l_rec, l_vel, l_total })
}

/// Sum over frames and vertices of the squared Euclidean error.
pub fn reconstruction_loss<S: Scalar>(pred: &MotionSequence<S>, gt: &MotionSequence<S>) -> Result<S> {
    ensure_same_shape("reconstruction_loss", pred, gt)?;
    Ok(pred.vertices().data().iter().zip(gt.vertices().data()).map(|(&p, &y)| (y - p) * (y - p)).sum())
}

/// Masked squared velocity error summed over frames `2..=T`.
pub fn velocity_loss<S: Scalar>(pred: &MotionSequence<S>, gt: &MotionSequence<S>, mask: &[S]) -> Result<S> {
    ensure_same_shape("velocity_loss", pred, gt)?;
    let (t, v) = (pred.frames(), pred.num_vertices());
    if t < 2 {
        return Err(Error::InvalidArgument(format!("velocity loss needs at least 2 frames, got {t}")));
    }
    if mask.len() != v {
        return Err(Error::shape("velocity_loss", format!("mask of {} for {v} vertices", mask.len())));
    }
    let mut acc = S::zero();
    for f in 1..t {
        for (j, &m) in mask.iter().enumerate() {
            let (p1, p0) = (pred.point(f, j), pred.point(f - 1, j));
            let (y1, y0) = (gt.point(f, j), gt.point(f - 1, j));
            for c in 0..3 {
                let e = (y1[c] - y0[c]) - (p1[c] - p0[c]);
                let e = e * m;
                acc += e * e;
            }
        }
    }
    Ok(acc)
}

pub fn total_loss<S: Scalar>(pred: &MotionSequence<S>, gt: &MotionSequence<S>, mask: &[S]) -> Result<LossReport<S>> {
    Ok(LossReport::new(reconstruction_loss(pred, gt)?, velocity_loss(pred, gt, mask)?))
}

/// Mean over frames of the largest lip-vertex Euclidean error.
pub fn lip_vertex_error<S: Scalar>(
    pred: &MotionSequence<S>,
    gt: &MotionSequence<S>,
    regions: &RegionMask,
) -> Result<S> {
    ensure_same_shape("lip_vertex_error", pred, gt)?;
    if regions.lip_indices.is_empty() {
        return Err(Error::InvalidArgument("lip region is empty".into()));
    }
    regions.validate(pred.num_vertices())?;
    let t = pred.frames();
    let mut acc = S::zero();
    for f in 0..t {
        acc += regions.lip_indices.iter().map(|&v| distance(pred.point(f, v), gt.point(f, v))).fold(S::zero(), S::max);
    }
    Ok(acc / S::from_usize(t).unwrap())
}

/// Population standard deviation over time of `|y_t,v - h_v|`.
fn displacement_std<S: Scalar>(seq: &MotionSequence<S>, neutral: &NeutralGeometry<S>, v: usize) -> S {
    let t = seq.frames();
    let h = neutral.point(v);
    let d: Vec<S> = (0..t).map(|f| distance(seq.point(f, v), h)).collect();
    let n = S::from_usize(t).unwrap();
    let mean = d.iter().copied().sum::<S>() / n;
    (d.iter().map(|&x| (x - mean) * (x - mean)).sum::<S>() / n).sqrt()
}

/// Mean over upper-face vertices of the predicted minus ground-truth temporal
/// standard deviation of displacement from neutral.
pub fn fdd<S: Scalar>(
    pred: &MotionSequence<S>,
    gt: &MotionSequence<S>,
    neutral: &NeutralGeometry<S>,
    regions: &RegionMask,
) -> Result<S> {
    ensure_same_shape("fdd", pred, gt)?;
    if regions.upper_face_indices.is_empty() {
        return Err(Error::InvalidArgument("upper-face region is empty".into()));
    }
    if neutral.num_vertices() != pred.num_vertices() {
        return Err(Error::shape(
            "fdd",
            format!("neutral has {} vertices, sequence {}", neutral.num_vertices(), pred.num_vertices()),
        ));
    }
    regions.validate(pred.num_vertices())?;
    let total: S = regions
        .upper_face_indices
        .iter()
        .map(|&v| displacement_std(pred, neutral, v) - displacement_std(gt, neutral, v))
        .sum();
    Ok(total / S::from_usize(regions.upper_face_indices.len()).unwrap())
}

pub fn evaluate_metrics<S: Scalar>(
    pred: &MotionSequence<S>,
    gt: &MotionSequence<S>,
    neutral: &NeutralGeometry<S>,
    regions: &RegionMask,
) -> Result<MetricReport<S>> {
    Ok(MetricReport { lip_vertex_error: lip_vertex_error(pred, gt, regions)?, fdd: fdd(pred, gt, neutral, regions)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gradient_check, Tensor};

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
    fn reconstruction_examples() {
        let gt = seq(3, 2, |t, v| [t as f64, v as f64, 1.0]);
        assert_eq!(reconstruction_loss(&gt, &gt).unwrap(), 0.0);
        let pred = seq(3, 2, |t, v| {
            let bump = if v == 1 && t < 2 { 1.0 } else { 0.0 };
            [t as f64 + bump, v as f64, 1.0]
        });
        assert_eq!(reconstruction_loss(&pred, &gt).unwrap(), 2.0);
        assert_eq!(reconstruction_loss(&gt, &pred).unwrap(), 2.0);
        assert!(reconstruction_loss(&gt, &seq(2, 2, |_, _| [0.0; 3])).is_err());
    }

    #[test]
    fn velocity_examples() {
        let gt = seq(4, 2, |t, v| [(t * t) as f64, v as f64, 0.0]);
        assert_eq!(velocity_loss(&gt, &gt, &[1.0, 1.0]).unwrap(), 0.0);
        let a = seq(4, 2, |_, v| [v as f64, 3.0, 0.0]);
        let b = seq(4, 2, |_, v| [v as f64 + 5.0, -1.0, 2.0]);
        assert_eq!(velocity_loss(&a, &b, &[1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(velocity_loss(&gt, &a, &[0.0, 0.0]).unwrap(), 0.0);
        assert!(velocity_loss(&gt.prefix(1).unwrap(), &gt.prefix(1).unwrap(), &[1.0, 1.0]).is_err());
    }

    #[test]
    fn lip_error_is_max_then_mean() {
        let gt = seq(3, 3, |_, _| [0.0; 3]);
        let pred = seq(3, 3, |_, v| [[1.0, 2.0, 9.0][v], 0.0, 0.0]);
        let regions = RegionMask::new([0, 1], [2]);
        assert!((lip_vertex_error(&pred, &gt, &regions).unwrap() - 2.0).abs() < 1e-15);
        assert!(lip_vertex_error(&pred, &gt, &RegionMask::new([], [2])).is_err());
    }

    #[test]
    fn fdd_sign_for_static_prediction() {
        let neutral = NeutralGeometry::new(Tensor::zeros(vec![2, 3])).unwrap();
        let gt = seq(8, 2, |t, _| [(t as f64).sin() + 2.0, 0.0, 0.0]);
        let pred = seq(8, 2, |_, _| [0.0; 3]);
        let regions = RegionMask::new([0], [1]);
        assert!(fdd(&pred, &gt, &neutral, &regions).unwrap() < 0.0);
        assert_eq!(fdd(&gt, &gt, &neutral, &regions).unwrap(), 0.0);
        assert!(fdd(&pred, &gt, &neutral, &RegionMask::new([0], [])).is_err());
    }

    #[test]
    fn graph_losses_match_plain_and_gradients() {
        let gt = seq(4, 3, |t, v| [(t as f64 * 0.3 + v as f64).sin(), t as f64 * 0.1, v as f64]);
        let pred = seq(4, 3, |t, v| [(t as f64 * 0.5).cos(), v as f64 * 0.2, (t + v) as f64 * 0.05]);
        let mask = [0.2, 0.7, 0.9];
        let mut g = Graph::new();
        let p = g.param("pred", pred.vertices());
        let y = g.input("gt", gt.vertices().clone());
        let m = g.param("mask", &Tensor::from_vec(vec![3, 1], mask.to_vec()).unwrap());
        let vars = total_loss_var(&mut g, p, y, Some(m)).unwrap();
        let report = total_loss(&pred, &gt, &mask).unwrap();
        assert!((g.value(vars.l_rec).item() - report.l_rec).abs() < 1e-12);
        assert!((g.value(vars.l_vel).item() - report.l_vel).abs() < 1e-12);
        assert!(gradient_check(&mut g, vars.l_total, p, 1e-5).unwrap() < 1e-6);
        assert!(gradient_check(&mut g, vars.l_vel, m, 1e-5).unwrap() < 1e-6);
    }
}
