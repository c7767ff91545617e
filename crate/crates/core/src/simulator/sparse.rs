use nalgebra::{Vector2, Vector6};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::NoiseModel;
use crate::basis::{SparseDepthSet, SparsePoint, WeightVector};
use crate::error::{Error, Result};
use crate::geometry::RigidPose;
use crate::maps::DepthMap;

/// Number of sparse keypoints per keyframe.
pub const DEFAULT_SPARSE_COUNT: usize = 125;

/// Grid-stratified noisy depth samples of `gt_depth`.
///
/// True pixels are integer pixel centres, one per randomly chosen grid
/// cell; recorded pixels are jittered and clamped into the image.
pub fn sample_sparse_points(
    gt_depth: &DepthMap<f64>,
    count: usize,
    noise: &NoiseModel,
    seed: u64,
) -> Result<SparseDepthSet<f64>> {
    if count == 0 {
        return Err(Error::InvalidConfig("sparse point count must be positive".into()));
    }
    noise.validate()?;
    let (w, h) = (gt_depth.width(), gt_depth.height());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gy = ((count as f64 * h as f64 / w as f64).sqrt().round() as usize).clamp(1, h.max(1));
    let gx = count.div_ceil(gy);
    let mut cells: Vec<usize> = (0..gx * gy).collect();
    cells.shuffle(&mut rng);
    cells.truncate(count);
    cells.sort_unstable();

    let mut points = Vec::with_capacity(count);
    for cell in cells {
        let (cx, cy) = (cell % gx, cell / gx);
        let (x0, x1) = (cx * w / gx, ((cx + 1) * w / gx).max(cx * w / gx + 1).min(w));
        let (y0, y1) = (cy * h / gy, ((cy + 1) * h / gy).max(cy * h / gy + 1).min(h));
        let mut pick = None;
        for _ in 0..32 {
            let (x, y) = (rng.random_range(x0..x1), rng.random_range(y0..y1));
            let (x, y) = (x.clamp(1, w.saturating_sub(2).max(1)), y.clamp(1, h.saturating_sub(2).max(1)));
            if gt_depth.is_valid(x, y) {
                pick = Some((x, y));
                break;
            }
        }
        let Some((x, y)) = pick else { continue };
        let g = gt_depth.get(x, y);
        let eps: f64 = rng.sample(StandardNormal);
        let mut depth = g * (1.0 + noise.sparse_depth_rel_sigma * eps);
        if rng.random::<f64>() < noise.outlier_fraction {
            depth *= rng.random_range(1.5..3.0);
        }
        let ju: f64 = rng.sample(StandardNormal);
        let jv: f64 = rng.sample(StandardNormal);
        // border pixels are avoided so reprojected points stay inside the support
        let u = (x as f64 + noise.sparse_pixel_sigma * ju).clamp(0.5, (w as f64 - 1.5).max(0.5));
        let v = (y as f64 + noise.sparse_pixel_sigma * jv).clamp(0.5, (h as f64 - 1.5).max(0.5));
        points.push(SparsePoint {
            pixel: Vector2::new(u, v),
            depth: depth.max(1e-3 * g),
            landmark_id: None,
        });
    }
    SparseDepthSet::new(points, w, h)
}

/// Tangent-space pose noise and multiplicative weight noise for one frame.
pub fn perturb_frame(
    pose: &RigidPose<f64>,
    weights: &WeightVector<f64>,
    noise: &NoiseModel,
    seed: u64,
) -> (RigidPose<f64>, WeightVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut delta = Vector6::zeros();
    for i in 0..3 {
        delta[i] = noise.pose_noise.translation * rng.sample::<f64, _>(StandardNormal);
    }
    for i in 3..6 {
        delta[i] = noise.pose_noise.rotation * rng.sample::<f64, _>(StandardNormal);
    }
    let mut w = weights.clone();
    for v in w.0.iter_mut() {
        *v *= 1.0 + noise.weight_init_sigma * rng.sample::<f64, _>(StandardNormal);
    }
    (pose.retract(&delta), w)
}
