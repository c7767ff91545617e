use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PinholeCamera, RigidPose};
use crate::maps::{DepthMap, Map};

/// Room-like arrangements of planar rectangles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Closed 6 x 3 x 5 m room seen from the inside.
    BoxRoom,
    /// Fronto-parallel panels at several depths in front of a back wall.
    PlaneStack,
    /// Long closed corridor.
    Corridor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    /// Camera on a small circle looking outwards, turning about 8 degrees per keyframe.
    Orbit,
    /// Translation-only serpentine sweep.
    Lawnmower,
}

/// Rectangle `center + a u + b v` with `|a| <= half_u`, `|b| <= half_v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub center: Vector3<f64>,
    pub u: Vector3<f64>,
    pub v: Vector3<f64>,
    pub half_u: f64,
    pub half_v: f64,
}

impl Rect {
    pub fn new(center: Vector3<f64>, u: Vector3<f64>, v: Vector3<f64>, half_u: f64, half_v: f64) -> Result<Self> {
        let (nu, nv) = (u.norm(), v.norm());
        if !(nu > 0.0 && nv > 0.0 && half_u > 0.0 && half_v > 0.0) {
            return Err(Error::DegenerateScene("rectangle with zero extent".into()));
        }
        let (u, v) = (u / nu, v / nv);
        if u.dot(&v).abs() > 1e-9 {
            return Err(Error::DegenerateScene("rectangle axes are not orthogonal".into()));
        }
        Ok(Self { center, u, v, half_u, half_v })
    }

    pub fn normal(&self) -> Vector3<f64> {
        self.u.cross(&self.v)
    }

    /// Ray parameter `t > 0` of the hit `origin + t dir`, if any.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let n = self.normal();
        let denom = n.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = n.dot(&(self.center - origin)) / denom;
        if !(t > 1e-9) {
            return None;
        }
        let p = origin + dir * t - self.center;
        let slack = 1e-9;
        (p.dot(&self.u).abs() <= self.half_u + slack && p.dot(&self.v).abs() <= self.half_v + slack).then_some(t)
    }
}

/// A set of planar primitives.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub rects: Vec<Rect>,
}

fn axis_rect(center: [f64; 3], u: [f64; 3], v: [f64; 3], half_u: f64, half_v: f64) -> Rect {
    Rect::new(Vector3::from(center), Vector3::from(u), Vector3::from(v), half_u, half_v)
        .expect("valid built-in rectangle")
}

fn closed_box(min: [f64; 3], max: [f64; 3]) -> Vec<Rect> {
    let c = [0.5 * (min[0] + max[0]), 0.5 * (min[1] + max[1]), 0.5 * (min[2] + max[2])];
    let h = [0.5 * (max[0] - min[0]), 0.5 * (max[1] - min[1]), 0.5 * (max[2] - min[2])];
    let (ex, ey, ez) = ([1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]);
    vec![
        axis_rect([min[0], c[1], c[2]], ey, ez, h[1], h[2]),
        axis_rect([max[0], c[1], c[2]], ey, ez, h[1], h[2]),
        axis_rect([c[0], min[1], c[2]], ex, ez, h[0], h[2]),
        axis_rect([c[0], max[1], c[2]], ex, ez, h[0], h[2]),
        axis_rect([c[0], c[1], min[2]], ex, ey, h[0], h[1]),
        axis_rect([c[0], c[1], max[2]], ex, ey, h[0], h[1]),
    ]
}

impl World {
    pub fn new(rects: Vec<Rect>) -> Result<Self> {
        if rects.is_empty() {
            return Err(Error::DegenerateScene("world without primitives".into()));
        }
        Ok(Self { rects })
    }

    /// Built-in layouts. World `y` points down, like the camera's.
    pub fn from_layout(layout: Layout) -> Self {
        let (ex, ey) = ([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]);
        let rects = match layout {
            Layout::BoxRoom => closed_box([-3.0, -1.5, -2.5], [3.0, 1.5, 2.5]),
            Layout::Corridor => closed_box([-1.2, -1.2, -2.0], [1.2, 1.2, 14.0]),
            Layout::PlaneStack => vec![
                axis_rect([0.0, 0.0, 6.0], ex, ey, 9.0, 7.0),
                axis_rect([-1.1, 0.1, 2.6], ex, ey, 0.8, 1.0),
                axis_rect([1.0, -0.4, 3.4], ex, ey, 0.9, 0.7),
                axis_rect([0.1, 0.9, 4.4], ex, ey, 1.6, 0.45),
            ],
        };
        Self { rects }
    }

    /// Nearest hit along the ray.
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        self.rects
            .iter()
            .filter_map(|r| r.intersect(origin, dir))
            .min_by(|a, b| a.total_cmp(b))
    }

    /// Exact camera-frame z per pixel; pixels without a hit are invalid.
    pub fn render_depth(&self, camera: &PinholeCamera<f64>, pose: &RigidPose<f64>) -> DepthMap<f64> {
        let origin = pose.center();
        let rt = pose.rotation.transpose();
        let values = Map::from_fn(camera.width, camera.height, |x, y| {
            let ray = camera.ray(&Vector2::new(x as f64, y as f64));
            // unit z in the camera frame, so the ray parameter is the depth
            self.cast(&origin, &(rt * ray)).unwrap_or(0.0)
        });
        DepthMap::with_max_depth(values, f64::MAX)
    }
}

/// Camera looking along `forward` (world), with image `y` towards world `+y`.
pub fn look_pose(center: &Vector3<f64>, forward: &Vector3<f64>) -> Result<RigidPose<f64>> {
    let f = forward.normalize();
    let x = Vector3::y().cross(&f);
    if x.norm() < 1e-9 {
        return Err(Error::DegenerateScene("viewing direction parallel to world y".into()));
    }
    let x = x.normalize();
    let y = f.cross(&x);
    let r_cw = Matrix3::from_columns(&[x, y, f]);
    let r = r_cw.transpose();
    Ok(RigidPose::new(r, -(r * center)))
}

fn layout_origin(layout: Layout) -> Vector3<f64> {
    match layout {
        Layout::BoxRoom => Vector3::new(0.0, 0.2, 0.0),
        Layout::PlaneStack => Vector3::new(-0.25, -0.15, 0.0),
        Layout::Corridor => Vector3::new(0.0, 0.0, 1.0),
    }
}

/// Orbit yaw increment per keyframe.
pub const ORBIT_STEP: f64 = 8.0 * std::f64::consts::PI / 180.0;
const ORBIT_RADIUS: f64 = 0.6;
const ORBIT_PITCH: f64 = 0.2;
const SWEEP_STEP: f64 = 0.12;
const SWEEP_ROW: usize = 5;

/// World-to-camera keyframe poses.
pub fn trajectory(layout: Layout, kind: TrajectoryKind, count: usize, seed: u64) -> Result<Vec<RigidPose<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let o = layout_origin(layout);
    match kind {
        TrajectoryKind::Orbit => {
            let theta0 = rng.random_range(0.0..std::f64::consts::TAU);
            (0..count)
                .map(|k| {
                    let th = theta0 + ORBIT_STEP * k as f64;
                    let c = o + Vector3::new(th.sin(), 0.0, th.cos()) * ORBIT_RADIUS;
                    let f = Vector3::new(ORBIT_PITCH.cos() * th.sin(), ORBIT_PITCH.sin(), ORBIT_PITCH.cos() * th.cos());
                    look_pose(&c, &f)
                })
                .collect()
        }
        TrajectoryKind::Lawnmower => {
            let start = o + Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), 0.0);
            let f = Vector3::new(0.0, 0.0, 1.0);
            (0..count)
                .map(|k| {
                    let (row, col) = (k / SWEEP_ROW, k % SWEEP_ROW);
                    let col = if row % 2 == 0 { col } else { SWEEP_ROW - 1 - col };
                    let c = start + Vector3::new(col as f64 * SWEEP_STEP, row as f64 * 1.25 * SWEEP_STEP, 0.0);
                    look_pose(&c, &f)
                })
                .collect()
        }
    }
}

/// Fraction of valid pixels of frame `i` (sampled with `stride`) that land
/// inside frame `j` in front of the camera.
pub fn frustum_overlap(
    camera: &PinholeCamera<f64>,
    pose_i: &RigidPose<f64>,
    depth_i: &DepthMap<f64>,
    pose_j: &RigidPose<f64>,
    stride: usize,
) -> f64 {
    let stride = stride.max(1);
    let (mut total, mut inside) = (0usize, 0usize);
    for y in (0..camera.height).step_by(stride) {
        for x in (0..camera.width).step_by(stride) {
            if !depth_i.is_valid(x, y) {
                continue;
            }
            total += 1;
            let p = camera.ray(&Vector2::new(x as f64, y as f64)) * depth_i.get(x, y);
            let q = pose_j.transform_point(&pose_i.inverse_transform_point(&p));
            if camera.project(&q).is_ok_and(|uv| camera.contains(&uv)) {
                inside += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        inside as f64 / total as f64
    }
}
