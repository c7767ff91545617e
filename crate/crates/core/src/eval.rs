//! Depth and trajectory metrics.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::basis::sample_stack_values;
use crate::error::{Error, Result};
use crate::factors::Keyframe;
use crate::geometry::{se3_align, sim3_align, RigidPose, SimTransform};
use crate::maps::DepthMap;
use crate::scalar::Real;
use crate::simulator::GroundTruth;

/// Ratio threshold of the `delta1` accuracy.
pub const DELTA1_THRESHOLD: f64 = 1.25;
/// Cross-frame disagreement with GT beyond which a sample counts as occluded.
pub const OCCLUSION_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub rmse: f64,
    /// Percentage in `[0, 100]`.
    pub delta1: f64,
    pub valid_pixel_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryMetrics<T: Real> {
    pub ape_rmse: T,
    pub alignment: SimTransform<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMode {
    Sim3,
    Se3,
    None,
}

fn joint_pixels<'a, T: Real>(
    pred: &'a DepthMap<T>,
    gt: &'a DepthMap<T>,
) -> Result<impl Iterator<Item = (T, T)> + 'a> {
    let mask = pred.joint_mask(gt)?;
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyMask);
    }
    Ok(pred
        .values()
        .as_slice()
        .iter()
        .zip(gt.values().as_slice())
        .zip(mask)
        .filter(|(_, m)| *m)
        .map(|((p, g), _)| (*p, *g)))
}

/// Sum of squared errors of `scale * pred - gt` and the pixel count.
fn squared_errors<T: Real>(pred: &DepthMap<T>, gt: &DepthMap<T>, scale: Option<T>) -> Result<(T, usize)> {
    let s = scale.unwrap_or(T::one());
    Ok(joint_pixels(pred, gt)?.fold((T::zero(), 0), |(acc, n), (p, g)| {
        let e = s * p - g;
        (acc + e * e, n + 1)
    }))
}

fn correct_pixels<T: Real>(pred: &DepthMap<T>, gt: &DepthMap<T>, scale: Option<T>) -> Result<(usize, usize)> {
    let s = scale.unwrap_or(T::one());
    let thr = T::lit(DELTA1_THRESHOLD);
    Ok(joint_pixels(pred, gt)?.fold((0, 0), |(ok, n), (p, g)| {
        let sp = s * p;
        let r = if sp > g { sp / g } else { g / sp };
        (ok + usize::from(r < thr), n + 1)
    }))
}

/// Root-mean-square of `scale * pred - gt` over pixels valid in both maps.
pub fn depth_rmse<T: Real>(pred: &DepthMap<T>, gt: &DepthMap<T>, scale: Option<T>) -> Result<T> {
    let (sse, n) = squared_errors(pred, gt, scale)?;
    Ok((sse / T::from_count(n)).sqrt())
}

/// Percentage of jointly valid pixels whose depth ratio is below 1.25 either way.
pub fn delta1<T: Real>(pred: &DepthMap<T>, gt: &DepthMap<T>, scale: Option<T>) -> Result<T> {
    let (ok, n) = correct_pixels(pred, gt, scale)?;
    Ok(T::lit(100.0) * T::from_count(ok) / T::from_count(n))
}

pub fn depth_metrics<T: Real>(pred: &DepthMap<T>, gt: &DepthMap<T>, scale: Option<T>) -> Result<DepthMetrics> {
    let (sse, n) = squared_errors(pred, gt, scale)?;
    let (ok, _) = correct_pixels(pred, gt, scale)?;
    Ok(DepthMetrics {
        rmse: (sse.as_f64() / n as f64).sqrt(),
        delta1: 100.0 * ok as f64 / n as f64,
        valid_pixel_count: n,
    })
}

/// Metrics pooled over every pixel of every pair.
pub fn pooled_depth_metrics<T: Real>(pairs: &[(&DepthMap<T>, &DepthMap<T>)], scale: Option<T>) -> Result<DepthMetrics> {
    let (mut sse, mut ok, mut n) = (0.0, 0, 0);
    for (p, g) in pairs {
        let (s, m) = squared_errors(p, g, scale)?;
        let (c, _) = correct_pixels(p, g, scale)?;
        sse += s.as_f64();
        ok += c;
        n += m;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(DepthMetrics {
        rmse: (sse / n as f64).sqrt(),
        delta1: 100.0 * ok as f64 / n as f64,
        valid_pixel_count: n,
    })
}

/// Absolute position error between camera centres associated by id.
pub fn ape<T: Real>(
    estimated: &[(usize, RigidPose<T>)],
    reference: &[(usize, RigidPose<T>)],
    align: AlignMode,
) -> Result<TrajectoryMetrics<T>> {
    let mut est = Vec::new();
    let mut refs = Vec::new();
    for (id, pose) in estimated {
        if let Some((_, r)) = reference.iter().find(|(rid, _)| rid == id) {
            est.push(pose.center());
            refs.push(r.center());
        }
    }
    if est.is_empty() {
        return Err(Error::InvalidConfig("no keyframe ids in common".into()));
    }
    let alignment = match align {
        AlignMode::Sim3 => sim3_align(&est, &refs)?,
        AlignMode::Se3 => se3_align(&est, &refs)?,
        AlignMode::None => SimTransform::identity(),
    };
    let sse = est
        .iter()
        .zip(&refs)
        .fold(T::zero(), |acc, (e, r)| acc + (alignment.apply(e) - r).norm_squared());
    Ok(TrajectoryMetrics {
        ape_rmse: (sse / T::from_count(est.len())).sqrt(),
        alignment,
    })
}

/// Pixel stride of the stratified consistency samples.
pub const CONSISTENCY_STRIDE: usize = 4;

/// RMS cross-frame depth discrepancy of the frames' composed depths.
///
/// Samples on a regular grid of each frame are backprojected with its
/// composed depth, moved into every other frame and compared against that
/// frame's bilinearly interpolated composed depth. `occluded(i, j, pixel)`
/// excludes samples of frame index `i` seen from frame index `j`.
pub fn reprojection_consistency_with<T: Real>(
    frames: &[Keyframe<T>],
    occluded: &dyn Fn(usize, usize, &Vector2<T>) -> bool,
) -> Result<T> {
    if frames.len() < 2 {
        return Err(Error::NoOverlap);
    }
    let depths = frames
        .iter()
        .map(|f| crate::basis::compose_depth(&f.stack, &f.weights))
        .collect::<Result<Vec<_>>>()?;
    let (mut sse, mut n) = (T::zero(), 0usize);
    for (i, fi) in frames.iter().enumerate() {
        for y in (0..fi.camera.height).step_by(CONSISTENCY_STRIDE) {
            for x in (0..fi.camera.width).step_by(CONSISTENCY_STRIDE) {
                if !depths[i].is_valid(x, y) {
                    continue;
                }
                let px = Vector2::new(T::from_count(x), T::from_count(y));
                let xw = fi.pose.inverse_transform_point(&(fi.camera.ray(&px) * depths[i].get(x, y)));
                for (j, fj) in frames.iter().enumerate() {
                    if i == j {
                        continue;
                    }
                    let xj = fj.pose.transform_point(&xw);
                    let Ok(q) = fj.camera.project(&xj) else { continue };
                    let Ok(b) = sample_stack_values(&fj.stack, &q) else { continue };
                    let dj = b.dot(&fj.weights.0);
                    if !(dj > T::zero()) || occluded(i, j, &px) {
                        continue;
                    }
                    let e = dj - xj.z;
                    sse += e * e;
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        return Err(Error::NoOverlap);
    }
    Ok((sse / T::from_count(n)).sqrt())
}

/// [`reprojection_consistency_with`] without occlusion handling.
pub fn reprojection_consistency<T: Real>(frames: &[Keyframe<T>]) -> Result<T> {
    reprojection_consistency_with(frames, &|_, _, _| false)
}

/// Occlusion rule from ground truth: a sample of frame `i` is occluded in
/// frame `j` when its GT transfer disagrees with any GT depth of the
/// bilinear support in `j` by more than 1 cm, or leaves the image.
///
/// `ids[k]` is the GT keyframe index of the `k`-th evaluated frame.
pub fn gt_occlusion_rule<'a>(gt: &'a GroundTruth, ids: &'a [usize]) -> impl Fn(usize, usize, &Vector2<f64>) -> bool + 'a {
    move |i, j, px| {
        let (gi, gj) = (ids[i], ids[j]);
        let cam = &gt.camera;
        let (x, y) = (px.x.round() as usize, px.y.round() as usize);
        let di = &gt.depths[gi];
        if x >= cam.width || y >= cam.height || !di.is_valid(x, y) {
            return true;
        }
        let xw: Vector3<f64> = gt.poses[gi].inverse_transform_point(&(cam.ray(px) * di.get(x, y)));
        let xj = gt.poses[gj].transform_point(&xw);
        let Ok(q) = cam.project(&xj) else { return true };
        if !cam.contains(&q) {
            return true;
        }
        let dj = &gt.depths[gj];
        let (x0, y0) = (q.x.floor() as usize, q.y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(cam.width - 1), (y0 + 1).min(cam.height - 1));
        [(x0, y0), (x1, y0), (x0, y1), (x1, y1)]
            .iter()
            .any(|&(u, v)| !dj.is_valid(u, v) || (dj.get(u, v) - xj.z).abs() > OCCLUSION_TOLERANCE)
    }
}
