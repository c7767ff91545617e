use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::NoiseModel;
use crate::basis::{BasisStack, WeightVector};
use crate::error::{Error, Result};
use crate::factors::grid_shape;
use crate::maps::{ConfidenceMap, DepthMap, Map};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisMode {
    /// Each basis carries the depth of one soft region.
    Balanced,
    /// The first basis carries the whole depth, the rest are faint fields.
    Imbalanced,
}

impl BasisMode {
    pub fn name(self) -> &'static str {
        match self {
            BasisMode::Balanced => "balanced",
            BasisMode::Imbalanced => "imbalanced",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceMode {
    Oracle,
    Uniform,
}

/// Share of the basis noise variance that is a per-region depth scale error.
const REGION_SHARE: f64 = 0.9;
/// Share that is independent per pixel.
const PIXEL_SHARE: f64 = 0.4;
/// Amplitude of the zero-sum smooth fields of balanced stacks, relative to the depth range.
const BALANCED_FIELD: f64 = 0.05;
/// Amplitude of the faint bases of imbalanced stacks, relative to the depth range.
const IMBALANCED_FIELD: f64 = 0.01;

/// Weights that compose the noise-free stack of `mode` into the GT depth.
pub fn gt_weights(mode: BasisMode, n: usize) -> WeightVector<f64> {
    match mode {
        BasisMode::Balanced => WeightVector::ones(n),
        BasisMode::Imbalanced => {
            let mut w = WeightVector::zeros(n);
            if n > 0 {
                w.0[0] = 1.0;
            }
            w
        }
    }
}

/// Smooth field with maximum magnitude 1.
fn smooth_field(width: usize, height: usize, rng: &mut ChaCha8Rng) -> Map<f64> {
    let waves: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            [
                rng.random_range(0.5..1.0),
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
                rng.random_range(0.0..std::f64::consts::TAU),
            ]
        })
        .collect();
    let mut f = Map::from_fn(width, height, |x, y| {
        waves
            .iter()
            .map(|[a, kx, ky, ph]| {
                a * (std::f64::consts::TAU * (kx * x as f64 / width as f64 + ky * y as f64 / height as f64) + ph).cos()
            })
            .sum()
    });
    let peak = f.as_slice().iter().fold(0.0f64, |m: f64, v: &f64| m.max(v.abs()));
    if peak > 0.0 {
        f.as_mut_slice().iter_mut().for_each(|v| *v /= peak);
    }
    f
}

/// Soft Voronoi partition of unity over jittered-grid sites.
fn soft_masks(n: usize, width: usize, height: usize, rng: &mut ChaCha8Rng) -> Vec<Map<f64>> {
    let (gx, gy) = grid_shape(n, width, height);
    let (cw, ch) = (width as f64 / gx as f64, height as f64 / gy as f64);
    let mut sites = Vec::with_capacity(n);
    for j in 0..gy {
        for i in 0..gx {
            sites.push((
                (i as f64 + 0.5 + rng.random_range(-0.25..0.25)) * cw,
                (j as f64 + 0.5 + rng.random_range(-0.25..0.25)) * ch,
            ));
        }
    }
    while sites.len() < n {
        sites.push((rng.random_range(0.0..width as f64), rng.random_range(0.0..height as f64)));
    }
    let tau = 0.4 * ((width * height) as f64 / n as f64).sqrt();
    let mut masks = vec![Map::filled(width, height, 0.0); n];
    let mut logits = vec![0.0; n];
    for y in 0..height {
        for x in 0..width {
            for (l, (sx, sy)) in logits.iter_mut().zip(&sites) {
                let d2 = (x as f64 - sx).powi(2) + (y as f64 - sy).powi(2);
                *l = -d2 / (2.0 * tau * tau);
            }
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - top).exp()).sum();
            for (m, l) in masks.iter_mut().zip(&logits) {
                m.set(x, y, (l - top).exp() / z);
            }
        }
    }
    masks
}

/// Surrogate network output for one keyframe.
///
/// Both modes draw the same random quantities in the same order, so equal
/// seeds give the same regions, scale errors and pixel noise.
pub fn generate_bases(
    gt_depth: &DepthMap<f64>,
    n: usize,
    mode: BasisMode,
    noise: &NoiseModel,
    seed: u64,
) -> Result<(BasisStack<f64>, WeightVector<f64>)> {
    if n == 0 {
        return Err(Error::InvalidConfig("at least one basis is required".into()));
    }
    noise.validate()?;
    let (w, h) = (gt_depth.width(), gt_depth.height());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masks = soft_masks(n, w, h, &mut rng);
    let fields: Vec<Map<f64>> = (0..n).map(|_| smooth_field(w, h, &mut rng)).collect();

    let valid: Vec<f64> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter(|&(x, y)| gt_depth.is_valid(x, y))
        .map(|(x, y)| gt_depth.get(x, y))
        .collect();
    let (lo, hi) = valid.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &d| (a.min(d), b.max(d)));
    let range = if valid.is_empty() { 0.0 } else { hi - lo };
    let rms = if valid.is_empty() {
        0.0
    } else {
        (valid.iter().map(|d| d * d).sum::<f64>() / valid.len() as f64).sqrt()
    };
    let sigma = noise.basis_noise_sigma;
    let scale_sigma = if rms > 0.0 { REGION_SHARE * sigma / rms } else { 0.0 };
    let eps: Vec<f64> = (0..n).map(|_| scale_sigma * rng.sample::<f64, _>(StandardNormal)).collect();
    let pixel_sigma = PIXEL_SHARE * sigma;
    let pixel_noise: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..w * h).map(|_| pixel_sigma * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();

    let mut bases = vec![Map::filled(w, h, 0.0); n];
    for y in 0..h {
        for x in 0..w {
            if !gt_depth.is_valid(x, y) {
                continue;
            }
            let g = gt_depth.get(x, y);
            let idx = y * w + x;
            match mode {
                BasisMode::Balanced => {
                    let mean_field = fields.iter().map(|f| f.get(x, y)).sum::<f64>() / n as f64;
                    for i in 0..n {
                        let m = masks[i].get(x, y);
                        let v = m * g * (1.0 + eps[i])
                            + BALANCED_FIELD * range * (fields[i].get(x, y) - mean_field)
                            + m * pixel_noise[i][idx];
                        bases[i].set(x, y, v);
                    }
                }
                BasisMode::Imbalanced => {
                    let region: f64 = (0..n).map(|i| masks[i].get(x, y) * eps[i]).sum();
                    bases[0].set(x, y, g * (1.0 + region) + pixel_noise[0][idx]);
                    for i in 1..n {
                        bases[i].set(x, y, IMBALANCED_FIELD * range * fields[i].get(x, y) + pixel_noise[i][idx]);
                    }
                }
            }
        }
    }
    Ok((BasisStack::new(&bases)?, gt_weights(mode, n)))
}

/// Dense least-squares weights against the GT depth over its valid pixels.
pub fn best_fit_weights(stack: &BasisStack<f64>, gt_depth: &DepthMap<f64>) -> Result<WeightVector<f64>> {
    if stack.width() != gt_depth.width() || stack.height() != gt_depth.height() {
        return Err(Error::DimensionMismatch("basis stack and depth map size".into()));
    }
    let n = stack.count();
    let mut gram = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    let mut used = 0;
    for y in 0..stack.height() {
        for x in 0..stack.width() {
            if !gt_depth.is_valid(x, y) {
                continue;
            }
            let b = DVector::from_column_slice(stack.at(x, y));
            gram += &b * b.transpose();
            rhs += &b * gt_depth.get(x, y);
            used += 1;
        }
    }
    if used < n {
        return Err(Error::EmptyMask);
    }
    let w = gram
        .cholesky()
        .map(|c| c.solve(&rhs))
        .ok_or_else(|| Error::SingularSystem("dense basis Gram matrix".into()))?;
    Ok(WeightVector(w))
}

/// Oracle confidence `1 / (1 + |err| / median|err|)` normalized to a peak of
/// 1, or a constant 1.
///
/// Pixels invalid in either map get confidence 0 in oracle mode.
pub fn generate_confidence(
    gt_depth: &DepthMap<f64>,
    composed_depth: &DepthMap<f64>,
    mode: ConfidenceMode,
) -> Result<ConfidenceMap<f64>> {
    let (w, h) = (gt_depth.width(), gt_depth.height());
    if composed_depth.width() != w || composed_depth.height() != h {
        return Err(Error::DimensionMismatch("confidence inputs differ in size".into()));
    }
    if mode == ConfidenceMode::Uniform {
        return Ok(ConfidenceMap::uniform(w, h, 1.0));
    }
    let joint = gt_depth.joint_mask(composed_depth)?;
    let err = Map::from_fn(w, h, |x, y| (composed_depth.get(x, y) - gt_depth.get(x, y)).abs());
    let mut errs: Vec<f64> = err
        .as_slice()
        .iter()
        .zip(&joint)
        .filter(|(_, &ok)| ok)
        .map(|(e, _)| *e)
        .collect();
    if errs.is_empty() {
        return ConfidenceMap::new(Map::filled(w, h, 0.0));
    }
    errs.sort_by(f64::total_cmp);
    let mut s = errs[errs.len() / 2];
    if s <= 0.0 {
        s = errs.iter().sum::<f64>() / errs.len() as f64;
    }
    let mut c = Map::from_fn(w, h, |x, y| {
        if !joint[y * w + x] {
            0.0
        } else if s > 0.0 {
            1.0 / (1.0 + err.get(x, y) / s)
        } else {
            1.0
        }
    });
    let peak = c.as_slice().iter().fold(0.0f64, |m, &v| m.max(v));
    if peak > 0.0 {
        c.as_mut_slice().iter_mut().for_each(|v| *v /= peak);
    }
    ConfidenceMap::new(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{compose_depth, condition_number};
    use crate::losses::balance_loss;
    use crate::simulator::{sample_sparse_points, Layout, World};
    use crate::geometry::PinholeCamera;
    use crate::simulator::{trajectory, TrajectoryKind};

    fn scene_depth(seed: u64) -> DepthMap<f64> {
        let cam = PinholeCamera::new(40.0, 40.0, 39.5, 29.5, 80, 60).unwrap();
        let pose = trajectory(Layout::BoxRoom, TrajectoryKind::Orbit, 1, seed).unwrap()[0];
        World::from_layout(Layout::BoxRoom).render_depth(&cam, &pose)
    }

    #[test]
    fn noiseless_balanced_composes_to_gt() {
        let gt = scene_depth(1);
        let (stack, w) = generate_bases(&gt, 4, BasisMode::Balanced, &NoiseModel::zero(), 3).unwrap();
        let d = compose_depth(&stack, &w).unwrap();
        for (a, b) in d.values().as_slice().iter().zip(gt.values().as_slice()) {
            assert!((a - b).abs() < 1e-9);
        }
        let (stack, w) = generate_bases(&gt, 4, BasisMode::Imbalanced, &NoiseModel::zero(), 3).unwrap();
        assert_eq!(w.0.as_slice(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(compose_depth(&stack, &w).unwrap().values(), gt.values());
    }

    #[test]
    fn faint_bases_stay_within_one_percent_of_range() {
        let gt = scene_depth(2);
        let s = gt.values().as_slice();
        let range = s.iter().cloned().fold(0.0, f64::max) - s.iter().cloned().fold(f64::INFINITY, f64::min);
        let (stack, _) = generate_bases(&gt, 4, BasisMode::Imbalanced, &NoiseModel::zero(), 5).unwrap();
        for i in 1..4 {
            assert!(stack.basis(i).as_slice().iter().all(|v| v.abs() <= 0.01 * range + 1e-12));
        }
    }

    #[test]
    fn noisy_balanced_is_near_partition_of_unity() {
        let noise = NoiseModel::default();
        for seed in 0..5 {
            let gt = scene_depth(seed);
            let (stack, w) = generate_bases(&gt, 4, BasisMode::Balanced, &noise, seed).unwrap();
            let d = compose_depth(&stack, &w).unwrap();
            let within = d
                .values()
                .as_slice()
                .iter()
                .zip(gt.values().as_slice())
                .filter(|(a, b)| (*a - *b).abs() <= 3.0 * noise.basis_noise_sigma)
                .count();
            assert!(within as f64 >= 0.99 * gt.valid_count() as f64);
        }
    }

    #[test]
    fn imbalanced_is_worse_conditioned_and_less_balanced() {
        let noise = NoiseModel::default();
        for seed in 0..20 {
            let gt = scene_depth(seed);
            let sparse = sample_sparse_points(&gt, 125, &noise, seed + 100).unwrap();
            let (bal, _) = generate_bases(&gt, 4, BasisMode::Balanced, &noise, seed).unwrap();
            let (imb, _) = generate_bases(&gt, 4, BasisMode::Imbalanced, &noise, seed).unwrap();
            let cb = condition_number(&bal, &sparse).unwrap().value();
            let ci = condition_number(&imb, &sparse).unwrap().value();
            assert!(ci >= 100.0 * cb, "seed {seed}: {ci} vs {cb}");
            assert!(balance_loss(&bal, &sparse).unwrap() < balance_loss(&imb, &sparse).unwrap());
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let gt = scene_depth(4);
        let a = generate_bases(&gt, 4, BasisMode::Balanced, &NoiseModel::default(), 8).unwrap();
        let b = generate_bases(&gt, 4, BasisMode::Balanced, &NoiseModel::default(), 8).unwrap();
        assert_eq!(a, b);
        let c = generate_bases(&gt, 4, BasisMode::Balanced, &NoiseModel::default(), 9).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn zero_error_gives_unit_confidence() {
        let gt = scene_depth(1);
        let c = generate_confidence(&gt, &gt, ConfidenceMode::Oracle).unwrap();
        assert!(c.values().as_slice().iter().all(|&v| v == 1.0));
        let u = generate_confidence(&gt, &gt, ConfidenceMode::Uniform).unwrap();
        assert!(u.values().as_slice().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn high_error_decile_has_lower_confidence() {
        let gt = scene_depth(3);
        let (stack, _) = generate_bases(&gt, 4, BasisMode::Balanced, &NoiseModel::default(), 2).unwrap();
        let w = best_fit_weights(&stack, &gt).unwrap();
        let composed = compose_depth(&stack, &w).unwrap();
        let c = generate_confidence(&gt, &composed, ConfidenceMode::Oracle).unwrap();
        let mut pairs: Vec<(f64, f64)> = composed
            .values()
            .as_slice()
            .iter()
            .zip(gt.values().as_slice())
            .zip(c.values().as_slice())
            .map(|((a, b), c)| ((a - b).abs(), *c))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let dec = pairs.len() / 10;
        let mean = |s: &[(f64, f64)]| s.iter().map(|p| p.1).sum::<f64>() / s.len() as f64;
        assert!(mean(&pairs[pairs.len() - dec..]) < mean(&pairs[..dec]));
        let peak = c.max();
        assert!((peak - 1.0).abs() < 1e-15);
    }

    #[test]
    fn confidence_rejects_size_mismatch() {
        let a = DepthMap::new(Map::filled(4, 4, 1.0));
        let b = DepthMap::new(Map::filled(4, 5, 1.0));
        assert!(generate_confidence(&a, &b, ConfidenceMode::Oracle).is_err());
    }
}
