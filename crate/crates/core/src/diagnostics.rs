//! Finite-difference checks of the analytic factor Jacobians.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Vector2, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::basis::{sample_stack_values, BasisStack, SparseDepthSet, WeightVector};
use crate::error::Result;
use crate::factors::{
    prior_weight_residual, relative_depth_residual, sparse_depth_residual, JacobianFlags, Keyframe, Landmark,
    ResidualBlock, SamplePoint, VarId,
};
use crate::geometry::{PinholeCamera, RigidPose};
use crate::maps::{ConfidenceMap, Map};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;

/// Minimum distance of every sampled pixel from the bilinear cell edges,
/// where the interpolant is not differentiable.
pub const GRID_MARGIN: f64 = 0.01;

/// Worst relative error of one Jacobian block over all configurations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockError {
    pub block: String,
    pub max_rel_error: f64,
}

/// Result of checking one factor type.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FactorCheck {
    pub factor: String,
    pub configurations: usize,
    pub max_rel_error: f64,
    pub blocks: Vec<BlockError>,
}

/// `|a - b|_inf / max(|a|_inf, |b|_inf, 1e-8)`.
pub fn relative_error(analytic: &DVector<f64>, numeric: &DVector<f64>) -> f64 {
    (analytic - numeric).amax() / analytic.amax().max(numeric.amax()).max(1e-8)
}

/// Central differences of a scalar function of a tangent increment.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> Option<f64>, dim: usize, h: f64) -> Option<DVector<f64>> {
    let mut out = DVector::zeros(dim);
    let mut d = vec![0.0; dim];
    for k in 0..dim {
        d[k] = h;
        let p = f(&d)?;
        d[k] = -h;
        let m = f(&d)?;
        d[k] = 0.0;
        out[k] = (p - m) / (2.0 * h);
    }
    Some(out)
}

fn off_grid(p: &Vector2<f64>) -> bool {
    let (fx, fy) = (p.x - p.x.floor(), p.y - p.y.floor());
    fx > GRID_MARGIN && fx < 1.0 - GRID_MARGIN && fy > GRID_MARGIN && fy < 1.0 - GRID_MARGIN
}

fn camera() -> PinholeCamera<f64> {
    PinholeCamera::new(40.0, 40.0, 19.5, 14.5, 40, 30).expect("valid camera")
}

fn smooth_stack(rng: &mut ChaCha8Rng, n: usize) -> BasisStack<f64> {
    let maps: Vec<_> = (0..n)
        .map(|_| {
            let (a, b, c) = (rng.random_range(0.4..0.8), rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01));
            let (fx, fy, ph) = (rng.random_range(0.05..0.2), rng.random_range(0.05..0.2), rng.random_range(0.0..6.0));
            Map::from_fn(40, 30, |x, y| a + b * x as f64 + c * y as f64 + 0.05 * (fx * x as f64 + fy * y as f64 + ph).sin())
        })
        .collect();
    BasisStack::new(&maps).expect("valid stack")
}

fn random_frame(rng: &mut ChaCha8Rng, id: usize, pose: RigidPose<f64>) -> Keyframe<f64> {
    let stack = Arc::new(smooth_stack(rng, 4));
    let w: Vec<f64> = (0..4).map(|_| rng.random_range(0.9..1.1)).collect();
    Keyframe::new(
        id,
        pose,
        camera(),
        stack,
        Arc::new(ConfidenceMap::uniform(40, 30, 1.0)),
        Arc::new(SparseDepthSet::default()),
        WeightVector::from_slice(&w),
    )
    .expect("consistent keyframe")
}

fn random_pose(rng: &mut ChaCha8Rng, r: f64) -> RigidPose<f64> {
    RigidPose::exp(&Vector6::from_fn(|_, _| rng.random_range(-r..r)))
}

fn flat(b: &ResidualBlock<f64>, id: VarId) -> DVector<f64> {
    DVector::from_column_slice(b.jacobian(id).map(|j| j.as_slice()).unwrap_or(&[]))
}

fn perturbed_weights(f: &Keyframe<f64>, d: &[f64]) -> Keyframe<f64> {
    let mut g = f.clone();
    g.weights.0 += DVector::from_column_slice(d);
    g
}

fn perturbed_pose(f: &Keyframe<f64>, d: &[f64]) -> Keyframe<f64> {
    let mut g = f.clone();
    g.pose = g.pose.retract(&Vector6::from_column_slice(d));
    g
}

struct Tally {
    names: Vec<&'static str>,
    worst: Vec<f64>,
    done: usize,
}

impl Tally {
    fn new(names: &[&'static str]) -> Self {
        Self { names: names.to_vec(), worst: vec![0.0; names.len()], done: 0 }
    }

    fn record(&mut self, errors: &[f64]) {
        for (w, e) in self.worst.iter_mut().zip(errors) {
            *w = w.max(*e);
        }
        self.done += 1;
    }

    fn finish(self, factor: &str) -> FactorCheck {
        FactorCheck {
            factor: factor.into(),
            configurations: self.done,
            max_rel_error: self.worst.iter().copied().fold(0.0, f64::max),
            blocks: self
                .names
                .iter()
                .zip(&self.worst)
                .map(|(n, e)| BlockError { block: (*n).into(), max_rel_error: *e })
                .collect(),
        }
    }
}

/// Sparse depth factor: weights, pose and landmark blocks.
pub fn check_sparse_depth(configurations: usize, seed: u64) -> Result<FactorCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tally::new(&["weights", "pose", "landmark"]);
    while t.done < configurations {
        let pose = random_pose(&mut rng, 0.2);
        let frame = random_frame(&mut rng, 0, pose);
        let px = Vector2::new(rng.random_range(2.0..37.0), rng.random_range(2.0..27.0));
        let xc = frame.camera.backproject(&px, rng.random_range(1.5..3.5))?;
        let lm = Landmark { id: 7, position_world: frame.pose.inverse_transform_point(&xc) };
        let q = frame.camera.project(&frame.pose.transform_point(&lm.position_world))?;
        if !off_grid(&q) {
            continue;
        }
        let b = sparse_depth_residual(&frame, &lm, JacobianFlags::ALL)?;
        let r = |f: &Keyframe<f64>, l: &Landmark<f64>| {
            sparse_depth_residual(f, l, JacobianFlags::NONE).ok().map(|b| b.residual[0])
        };
        let jw = numeric_gradient(|d| r(&perturbed_weights(&frame, d), &lm), 4, FD_STEP);
        let jp = numeric_gradient(|d| r(&perturbed_pose(&frame, d), &lm), 6, FD_STEP);
        let jl = numeric_gradient(
            |d| {
                let mut l = lm;
                l.position_world += Vector3::from_column_slice(d);
                r(&frame, &l)
            },
            3,
            FD_STEP,
        );
        let (Some(jw), Some(jp), Some(jl)) = (jw, jp, jl) else { continue };
        t.record(&[
            relative_error(&flat(&b, VarId::Weights(0)), &jw),
            relative_error(&flat(&b, VarId::Pose(0)), &jp),
            relative_error(&flat(&b, VarId::Landmark(7)), &jl),
        ]);
    }
    Ok(t.finish("sparse_depth"))
}

/// Relative depth factor: weights and pose blocks of host and target.
pub fn check_relative_depth(configurations: usize, seed: u64) -> Result<FactorCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tally::new(&["host_weights", "host_pose", "target_weights", "target_pose"]);
    while t.done < configurations {
        let pi = random_pose(&mut rng, 0.1);
        let rel = RigidPose::exp(&Vector6::new(
            rng.random_range(-0.15..0.15),
            rng.random_range(-0.1..0.1),
            rng.random_range(-0.1..0.1),
            rng.random_range(-0.05..0.05),
            rng.random_range(-0.05..0.05),
            rng.random_range(-0.05..0.05),
        ));
        let fi = random_frame(&mut rng, 0, pi);
        let fj = random_frame(&mut rng, 1, rel.compose(&pi));
        let s = SamplePoint {
            host_frame: 0,
            pixel: Vector2::new(rng.random_range(8.0..31.0), rng.random_range(6.0..23.0)),
            confidence: rng.random_range(0.5..1.5),
        };
        let Ok(b) = relative_depth_residual(&fi, &fj, &s, JacobianFlags::ALL) else { continue };
        let di = sample_stack_values(&fi.stack, &s.pixel)?.dot(&fi.weights.0);
        let xcj = fj.pose.transform_point(&fi.pose.inverse_transform_point(&(fi.camera.ray(&s.pixel) * di)));
        if !off_grid(&s.pixel) || !off_grid(&fj.camera.project(&xcj)?) {
            continue;
        }
        let r = |a: &Keyframe<f64>, c: &Keyframe<f64>| {
            relative_depth_residual(a, c, &s, JacobianFlags::NONE).ok().map(|b| b.residual[0])
        };
        let jwi = numeric_gradient(|d| r(&perturbed_weights(&fi, d), &fj), 4, FD_STEP);
        let jpi = numeric_gradient(|d| r(&perturbed_pose(&fi, d), &fj), 6, FD_STEP);
        let jwj = numeric_gradient(|d| r(&fi, &perturbed_weights(&fj, d)), 4, FD_STEP);
        let jpj = numeric_gradient(|d| r(&fi, &perturbed_pose(&fj, d)), 6, FD_STEP);
        let (Some(jwi), Some(jpi), Some(jwj), Some(jpj)) = (jwi, jpi, jwj, jpj) else { continue };
        t.record(&[
            relative_error(&flat(&b, VarId::Weights(0)), &jwi),
            relative_error(&flat(&b, VarId::Pose(0)), &jpi),
            relative_error(&flat(&b, VarId::Weights(1)), &jwj),
            relative_error(&flat(&b, VarId::Pose(1)), &jpj),
        ]);
    }
    Ok(t.finish("relative_depth"))
}

/// Weight prior with a random SPD information matrix. Each residual row is
/// checked separately.
pub fn check_prior_weight(configurations: usize, seed: u64) -> Result<FactorCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tally::new(&["weights"]);
    while t.done < configurations {
        let frame = random_frame(&mut rng, 0, RigidPose::identity());
        let a = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
        let info = &a * a.transpose() + DMatrix::identity(4, 4) * 0.5;
        let anchor = WeightVector::from_slice(&(0..4).map(|_| rng.random_range(0.5..1.5)).collect::<Vec<_>>());
        let b = prior_weight_residual(&frame, &anchor, &info)?;
        let j = b.jacobian(VarId::Weights(0)).cloned().unwrap_or_else(|| DMatrix::zeros(4, 4));
        let mut worst: f64 = 0.0;
        for row in 0..4 {
            let num = numeric_gradient(
                |d| prior_weight_residual(&perturbed_weights(&frame, d), &anchor, &info).ok().map(|b| b.residual[row]),
                4,
                FD_STEP,
            );
            let Some(num) = num else { continue };
            worst = worst.max(relative_error(&j.row(row).transpose(), &num));
        }
        t.record(&[worst]);
    }
    Ok(t.finish("prior_weight"))
}

/// Runs every factor check with `configurations` random valid
/// configurations each.
pub fn jacobian_suite(configurations: usize, seed: u64) -> Result<Vec<FactorCheck>> {
    Ok(vec![
        check_sparse_depth(configurations, seed)?,
        check_relative_depth(configurations, seed.wrapping_add(1))?,
        check_prior_weight(configurations, seed.wrapping_add(2))?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_gradient_of_quadratic() {
        let g = numeric_gradient(|d| Some(3.0 * d[0] * d[0] + 2.0 * d[1] + 1.0), 2, 1e-3).unwrap();
        assert!((g[0]).abs() < 1e-12 && (g[1] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn suite_counts_and_names() {
        let s = jacobian_suite(5, 1).unwrap();
        let names: Vec<_> = s.iter().map(|c| c.factor.as_str()).collect();
        assert_eq!(names, ["sparse_depth", "relative_depth", "prior_weight"]);
        assert!(s.iter().all(|c| c.configurations == 5 && c.max_rel_error < 1e-5));
    }

    #[test]
    fn detects_a_wrong_jacobian() {
        let a = DVector::from_column_slice(&[1.0, 2.0]);
        let b = DVector::from_column_slice(&[1.0, 2.2]);
        assert!((relative_error(&a, &b) - 0.2 / 2.2).abs() < 1e-15);
    }
}
