use nalgebra::Vector2;

use super::{JacobianFlags, Keyframe, SamplePoint};
use crate::basis::compose_depth;
use crate::maps::DepthMap;
use crate::scalar::Real;

/// Default confidence gate on a confidence normalized to `[0, 1]`.
pub const DEFAULT_CONFIDENCE_GATE: f64 = 0.5;

/// Tuning of [`sample_relative_points`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerOptions<T> {
    /// Maximum number of samples, also the number of grid cells.
    pub budget: usize,
    /// Pixels with confidence below this are skipped.
    pub conf_gate: T,
    /// Skip pixels whose 3x3 neighbourhood depth varies by more than this
    /// fraction of the centre depth.
    pub edge_threshold: T,
    /// Skip pixels whose transferred depth disagrees with the target's
    /// composed depth by more than this fraction.
    pub occlusion_threshold: T,
    /// Border in pixels excluded from sampling.
    pub margin: usize,
}

impl<T: Real> SamplerOptions<T> {
    pub fn new(budget: usize, conf_gate: T) -> Self {
        Self {
            budget,
            conf_gate,
            edge_threshold: T::lit(0.1),
            occlusion_threshold: T::lit(0.1),
            margin: 1,
        }
    }
}

/// Grid `(gx, gy)` with the most cells not exceeding `budget`, preferring
/// cells with the image's aspect ratio.
pub fn grid_shape(budget: usize, width: usize, height: usize) -> (usize, usize) {
    let aspect = width as f64 / height.max(1) as f64;
    let mut best = (1, 1);
    let mut best_key = (0usize, f64::INFINITY);
    for gx in 1..=budget.min(width.max(1)) {
        let gy = (budget / gx).min(height.max(1));
        if gy == 0 {
            continue;
        }
        let cells = gx * gy;
        let skew = ((gx as f64 / gy as f64) / aspect).ln().abs();
        if cells > best_key.0 || (cells == best_key.0 && skew < best_key.1) {
            best = (gx, gy);
            best_key = (cells, skew);
        }
    }
    best
}

fn is_edge<T: Real>(depth: &DepthMap<T>, x: usize, y: usize, threshold: T) -> bool {
    let d = depth.get(x, y);
    for dy in 0..3 {
        for dx in 0..3 {
            let (nx, ny) = (x + dx - 1, y + dy - 1);
            if !depth.is_valid(nx, ny) || (depth.get(nx, ny) - d).abs() > threshold * d {
                return true;
            }
        }
    }
    false
}

fn gradient_score<T: Real>(depth: &DepthMap<T>, x: usize, y: usize) -> T {
    let gx = (depth.get(x + 1, y) - depth.get(x - 1, y)) * T::lit(0.5);
    let gy = (depth.get(x, y + 1) - depth.get(x, y - 1)) * T::lit(0.5);
    gx * gx + gy * gy
}

/// Selects up to `budget` pixels of `frame` for relative factors into
/// `target`, one per grid cell.
///
/// Per cell, the pixel with the largest composed-depth gradient among
/// those passing the confidence gate, the edge test and the projection
/// preconditions into `target` is kept. Deterministic.
pub fn sample_relative_points<T: Real>(
    frame: &Keyframe<T>,
    target: &Keyframe<T>,
    budget: usize,
    conf_gate: T,
) -> Vec<SamplePoint<T>> {
    sample_relative_points_with(frame, target, &SamplerOptions::new(budget, conf_gate))
}

pub fn sample_relative_points_with<T: Real>(
    frame: &Keyframe<T>,
    target: &Keyframe<T>,
    opts: &SamplerOptions<T>,
) -> Vec<SamplePoint<T>> {
    let (w, h) = (frame.camera.width, frame.camera.height);
    let m = opts.margin.max(1);
    if opts.budget == 0 || w <= 2 * m || h <= 2 * m || opts.conf_gate > frame.confidence.max() {
        return Vec::new();
    }
    let Ok(depth) = compose_depth(&frame.stack, &frame.weights) else {
        return Vec::new();
    };
    let Ok(target_depth) = compose_depth(&target.stack, &target.weights) else {
        return Vec::new();
    };
    let (gx, gy) = grid_shape(opts.budget, w, h);
    let mut out = Vec::with_capacity(gx * gy);
    for cy in 0..gy {
        let (y0, y1) = (cy * h / gy, (cy + 1) * h / gy);
        for cx in 0..gx {
            let (x0, x1) = (cx * w / gx, (cx + 1) * w / gx);
            let mut best: Option<(T, SamplePoint<T>)> = None;
            for y in y0.max(m)..y1.min(h - m) {
                for x in x0.max(m)..x1.min(w - m) {
                    let c = frame.confidence.get(x, y);
                    if c < opts.conf_gate || !depth.is_valid(x, y) || is_edge(&depth, x, y, opts.edge_threshold) {
                        continue;
                    }
                    let score = gradient_score(&depth, x, y);
                    if best.as_ref().is_some_and(|(s, _)| *s >= score) {
                        continue;
                    }
                    let sample = SamplePoint {
                        host_frame: frame.id,
                        pixel: Vector2::new(T::from_count(x), T::from_count(y)),
                        confidence: c,
                    };
                    if transfers(frame, target, &target_depth, &sample, depth.get(x, y), opts.occlusion_threshold) {
                        best = Some((score, sample));
                    }
                }
            }
            if let Some((_, s)) = best {
                out.push(s);
            }
        }
    }
    out
}

fn transfers<T: Real>(
    frame: &Keyframe<T>,
    target: &Keyframe<T>,
    target_depth: &DepthMap<T>,
    sample: &SamplePoint<T>,
    host_depth: T,
    occlusion_threshold: T,
) -> bool {
    if super::relative_depth_residual(frame, target, sample, JacobianFlags::NONE).is_err() {
        return false;
    }
    let xc = frame.camera.ray(&sample.pixel) * host_depth;
    let xcj = target.pose.transform_point(&frame.pose.inverse_transform_point(&xc));
    let Ok(q) = target.camera.project(&xcj) else {
        return false;
    };
    let qx = q.x.round().as_f64() as usize;
    let qy = q.y.round().as_f64() as usize;
    if !target_depth.is_valid(qx, qy) {
        return false;
    }
    (target_depth.get(qx, qy) - xcj.z).abs() <= occlusion_threshold * xcj.z
}
