//! Synthetic scenes standing in for the depth network and the SLAM front
//! end: ray-cast GT depth, keyframe trajectories, surrogate basis stacks,
//! confidence maps, sparse keypoint depths and noisy initial states.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{compose_depth, BasisStack, SparseDepthSet, WeightVector};
use crate::error::{Error, Result};
use crate::factors::{Keyframe, Landmark};
use crate::geometry::{PinholeCamera, RigidPose};
use crate::maps::{ConfidenceMap, DepthMap, Map};

mod bases;
mod scene;
mod sparse;

pub use bases::{best_fit_weights, generate_bases, generate_confidence, gt_weights, BasisMode, ConfidenceMode};
pub use scene::{frustum_overlap, look_pose, trajectory, Layout, Rect, TrajectoryKind, World, ORBIT_STEP};
pub use sparse::{perturb_frame, sample_sparse_points, DEFAULT_SPARSE_COUNT};

/// Minimum frustum overlap between consecutive keyframes.
pub const MIN_CONSECUTIVE_OVERLAP: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseNoise {
    /// Per-axis standard deviation in radians.
    pub rotation: f64,
    /// Per-axis standard deviation in meters.
    pub translation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    pub sparse_depth_rel_sigma: f64,
    pub sparse_pixel_sigma: f64,
    pub basis_noise_sigma: f64,
    pub pose_noise: PoseNoise,
    pub weight_init_sigma: f64,
    pub outlier_fraction: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            sparse_depth_rel_sigma: 0.05,
            sparse_pixel_sigma: 2.0,
            basis_noise_sigma: 0.1,
            pose_noise: PoseNoise { rotation: 0.002, translation: 0.005 },
            weight_init_sigma: 0.1,
            outlier_fraction: 0.05,
        }
    }
}

impl NoiseModel {
    pub fn zero() -> Self {
        Self {
            sparse_depth_rel_sigma: 0.0,
            sparse_pixel_sigma: 0.0,
            basis_noise_sigma: 0.0,
            pose_noise: PoseNoise::default(),
            weight_init_sigma: 0.0,
            outlier_fraction: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.sparse_depth_rel_sigma,
            self.sparse_pixel_sigma,
            self.basis_noise_sigma,
            self.pose_noise.rotation,
            self.pose_noise.translation,
            self.weight_init_sigma,
            self.outlier_fraction,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || self.outlier_fraction > 1.0 {
            return Err(Error::InvalidConfig("noise parameters must be finite and non-negative".into()));
        }
        Ok(())
    }
}

fn default_basis_count() -> usize {
    4
}

fn default_sparse_count() -> usize {
    DEFAULT_SPARSE_COUNT
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub layout: Layout,
    pub num_keyframes: usize,
    pub camera: PinholeCamera<f64>,
    pub trajectory: TrajectoryKind,
    pub seed: u64,
    #[serde(default = "default_basis_count")]
    pub basis_count: usize,
    #[serde(default = "default_sparse_count")]
    pub sparse_count: usize,
}

impl SceneConfig {
    /// 80 x 60 camera with a 90 degree horizontal field of view.
    pub fn default_camera() -> PinholeCamera<f64> {
        PinholeCamera::new(40.0, 40.0, 39.5, 29.5, 80, 60).expect("valid default camera")
    }

    /// Twelve keyframes orbiting inside the box room.
    pub fn standard(seed: u64) -> Self {
        Self {
            layout: Layout::BoxRoom,
            num_keyframes: 12,
            camera: Self::default_camera(),
            trajectory: TrajectoryKind::Orbit,
            seed,
            basis_count: 4,
            sparse_count: DEFAULT_SPARSE_COUNT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_keyframes < 2 {
            return Err(Error::InvalidConfig("at least two keyframes are required".into()));
        }
        if self.basis_count == 0 || self.sparse_count == 0 {
            return Err(Error::InvalidConfig("basis and sparse counts must be positive".into()));
        }
        let c = &self.camera;
        PinholeCamera::new(c.fx, c.fy, c.cx, c.cy, c.width, c.height)?;
        if c.width < 4 || c.height < 4 {
            return Err(Error::InvalidConfig("image must be at least 4 x 4".into()));
        }
        Ok(())
    }
}

/// Scene plus noise, the content of a scenario's `scene.json`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scene: SceneConfig,
    #[serde(default)]
    pub noise: NoiseModel,
}

/// Independent stream seed for `(stream, index)` under `seed`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_TRAJECTORY: u64 = 1;
const STREAM_BASES: u64 = 2;
const STREAM_SPARSE: u64 = 3;
const STREAM_INIT: u64 = 4;

/// Ground truth of a generated scene.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub camera: PinholeCamera<f64>,
    pub poses: Vec<RigidPose<f64>>,
    pub depths: Vec<DepthMap<f64>>,
    pub landmarks: Vec<Landmark<f64>>,
    pub basis_count: usize,
}

impl GroundTruth {
    pub fn weights(&self, mode: BasisMode) -> WeightVector<f64> {
        gt_weights(mode, self.basis_count)
    }
}

/// Keyframe identity and GT pose before any surrogate outputs exist.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyframeSkeleton {
    pub id: usize,
    pub pose: RigidPose<f64>,
    pub camera: PinholeCamera<f64>,
}

fn to_f32_grid(m: &Map<f64>) -> Map<f64> {
    m.map(|v| v as f32 as f64)
}

/// Ray-casts GT depth along the configured trajectory.
///
/// Depths are rounded to `f32` so that they survive PFM storage exactly.
pub fn generate_scene(config: &SceneConfig) -> Result<(GroundTruth, Vec<KeyframeSkeleton>)> {
    config.validate()?;
    let world = World::from_layout(config.layout);
    let poses = trajectory(
        config.layout,
        config.trajectory,
        config.num_keyframes,
        derive_seed(config.seed, STREAM_TRAJECTORY, 0),
    )?;
    let depths: Vec<DepthMap<f64>> = poses
        .par_iter()
        .map(|p| {
            let d = world.render_depth(&config.camera, p);
            DepthMap::with_max_depth(to_f32_grid(d.values()), f64::MAX)
        })
        .collect();
    for (k, d) in depths.iter().enumerate() {
        if d.valid_count() == 0 {
            return Err(Error::DegenerateScene(format!("keyframe {k} sees no geometry")));
        }
    }
    for k in 1..poses.len() {
        let o = frustum_overlap(&config.camera, &poses[k - 1], &depths[k - 1], &poses[k], 2);
        if o < MIN_CONSECUTIVE_OVERLAP {
            return Err(Error::DegenerateScene(format!(
                "keyframes {} and {k} overlap by {:.0}%",
                k - 1,
                100.0 * o
            )));
        }
    }
    let skeletons = poses
        .iter()
        .enumerate()
        .map(|(id, pose)| KeyframeSkeleton { id, pose: *pose, camera: config.camera })
        .collect();
    let gt = GroundTruth {
        camera: config.camera,
        poses,
        depths,
        landmarks: Vec::new(),
        basis_count: config.basis_count,
    };
    Ok((gt, skeletons))
}

/// Surrogate outputs of one basis mode for one keyframe.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeData {
    pub stack: Arc<BasisStack<f64>>,
    /// Oracle confidence of the stack against GT.
    pub confidence: Arc<ConfidenceMap<f64>>,
    pub initial_weights: WeightVector<f64>,
}

/// Everything the pipeline receives for one keyframe.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameData {
    pub id: usize,
    pub camera: PinholeCamera<f64>,
    pub initial_pose: RigidPose<f64>,
    /// Sparse depths with landmark ids.
    pub sparse: Arc<SparseDepthSet<f64>>,
    pub landmarks: Vec<Landmark<f64>>,
    pub balanced: ModeData,
    pub imbalanced: ModeData,
}

impl FrameData {
    pub fn mode(&self, mode: BasisMode) -> &ModeData {
        match mode {
            BasisMode::Balanced => &self.balanced,
            BasisMode::Imbalanced => &self.imbalanced,
        }
    }

    /// Keyframe at the initial pose and initial weights.
    pub fn keyframe(&self, mode: BasisMode, confidence: ConfidenceMode) -> Result<Keyframe<f64>> {
        let m = self.mode(mode);
        let conf = match confidence {
            ConfidenceMode::Oracle => m.confidence.clone(),
            ConfidenceMode::Uniform => Arc::new(ConfidenceMap::uniform(self.camera.width, self.camera.height, 1.0)),
        };
        Keyframe::new(
            self.id,
            self.initial_pose,
            self.camera,
            m.stack.clone(),
            conf,
            self.sparse.clone(),
            m.initial_weights.clone(),
        )
    }
}

fn mode_data(
    gt_depth: &DepthMap<f64>,
    config: &SceneConfig,
    noise: &NoiseModel,
    mode: BasisMode,
    k: usize,
) -> Result<ModeData> {
    let (stack, gt_w) = generate_bases(
        gt_depth,
        config.basis_count,
        mode,
        noise,
        derive_seed(config.seed, STREAM_BASES, k as u64),
    )?;
    let stack = BasisStack::new(&stack.bases().iter().map(to_f32_grid).collect::<Vec<_>>())?;
    let fit = best_fit_weights(&stack, gt_depth).unwrap_or_else(|_| gt_w.clone());
    let composed = compose_depth(&stack, &fit)?;
    let conf = generate_confidence(gt_depth, &composed, ConfidenceMode::Oracle)?;
    let conf = ConfidenceMap::new(to_f32_grid(conf.values()))?;
    let (_, initial_weights) = perturb_frame(
        &RigidPose::identity(),
        &gt_w,
        noise,
        derive_seed(config.seed, STREAM_INIT, k as u64),
    );
    Ok(ModeData {
        stack: Arc::new(stack),
        confidence: Arc::new(conf),
        initial_weights,
    })
}

/// Generates the surrogate outputs, sparse depths, landmarks and initial
/// state of keyframe `k`. Pure in `(config, noise, k)`.
pub fn generate_frame(
    config: &SceneConfig,
    noise: &NoiseModel,
    gt_depth: &DepthMap<f64>,
    gt_pose: &RigidPose<f64>,
    k: usize,
) -> Result<FrameData> {
    noise.validate()?;
    let cam = config.camera;
    let mut sparse = sample_sparse_points(
        gt_depth,
        config.sparse_count,
        noise,
        derive_seed(config.seed, STREAM_SPARSE, k as u64),
    )?;
    let mut landmarks = Vec::with_capacity(sparse.len());
    for (j, p) in sparse.points.iter_mut().enumerate() {
        let id = k * config.sparse_count + j;
        let xc = cam.backproject(&p.pixel, p.depth)?;
        landmarks.push(Landmark { id, position_world: gt_pose.inverse_transform_point(&xc) });
        p.landmark_id = Some(id);
    }
    let (initial_pose, _) = perturb_frame(
        gt_pose,
        &WeightVector::zeros(0),
        noise,
        derive_seed(config.seed, STREAM_INIT, k as u64),
    );
    Ok(FrameData {
        id: k,
        camera: cam,
        initial_pose,
        sparse: Arc::new(sparse),
        landmarks,
        balanced: mode_data(gt_depth, config, noise, BasisMode::Balanced, k)?,
        imbalanced: mode_data(gt_depth, config, noise, BasisMode::Imbalanced, k)?,
    })
}

/// Initial poses and weights of every keyframe: GT poses retracted by
/// tangent noise, GT weights scaled per component.
pub fn perturb_initial_state(
    gt: &GroundTruth,
    mode: BasisMode,
    noise: &NoiseModel,
    seed: u64,
) -> Vec<(RigidPose<f64>, WeightVector<f64>)> {
    let w = gt.weights(mode);
    gt.poses
        .iter()
        .enumerate()
        .map(|(k, p)| perturb_frame(p, &w, noise, derive_seed(seed, STREAM_INIT, k as u64)))
        .collect()
}

/// A complete generated scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub gt: GroundTruth,
    pub frames: Vec<FrameData>,
}

impl Scenario {
    pub fn generate(config: &ScenarioConfig) -> Result<Self> {
        config.noise.validate()?;
        let (mut gt, _) = generate_scene(&config.scene)?;
        let frames = (0..gt.poses.len())
            .into_par_iter()
            .map(|k| generate_frame(&config.scene, &config.noise, &gt.depths[k], &gt.poses[k], k))
            .collect::<Result<Vec<_>>>()?;
        gt.landmarks = frames.iter().flat_map(|f| f.landmarks.iter().copied()).collect();
        Ok(Self { config: *config, gt, frames })
    }

    pub fn standard(seed: u64) -> Result<Self> {
        Self::generate(&ScenarioConfig {
            scene: SceneConfig::standard(seed),
            noise: NoiseModel::default(),
        })
    }
}
