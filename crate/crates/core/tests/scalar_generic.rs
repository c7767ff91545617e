use std::sync::Arc;

use basis_slam::basis::{compose_depth, solve_weights, BasisStack, SparseDepthSet, SparsePoint, WeightVector};
use basis_slam::factors::{Keyframe, Landmark, Value, VarId};
use basis_slam::geometry::RigidPose;
use basis_slam::maps::{ConfidenceMap, Map};
use basis_slam::optimizer::{self as lm, LinearFactor};
use basis_slam::pipeline::{run_frames, AblationSet, PipelineConfig, PipelineMode};
use basis_slam::simulator::{NoiseModel, Scenario, ScenarioConfig, SceneConfig};
use basis_slam::{Graph, Graph32, Pose, Pose32, Stack32, Weights32};
use nalgebra::{DMatrix, DVector, Vector2, Vector6};

fn narrow(m: &Map<f64>) -> Map<f32> {
    m.map(|v| v as f32)
}

fn pose32(p: &Pose) -> Pose32 {
    RigidPose::new(p.rotation.cast(), p.translation.cast())
}

fn keyframe32(kf: &Keyframe<f64>) -> Keyframe<f32> {
    let stack = BasisStack::new(&kf.stack.bases().iter().map(narrow).collect::<Vec<_>>()).unwrap();
    let pts = kf
        .sparse
        .points
        .iter()
        .map(|p| SparsePoint { pixel: p.pixel.cast(), depth: p.depth as f32, landmark_id: p.landmark_id })
        .collect();
    let (w, h) = (stack.width(), stack.height());
    Keyframe::new(
        kf.id,
        pose32(&kf.pose),
        kf.camera.cast(),
        Arc::new(stack),
        Arc::new(ConfidenceMap::new(narrow(kf.confidence.values())).unwrap()),
        Arc::new(SparseDepthSet::new(pts, w, h).unwrap()),
        WeightVector(kf.weights.0.clone().cast()),
    )
    .unwrap()
}

#[test]
fn pose_exp_log_round_trip_in_f32() {
    let xi = Vector6::new(0.1f32, -0.2, 0.05, 0.3, -0.1, 0.2);
    let p = Pose32::exp(&xi);
    assert!((p.log() - xi).amax() < 1e-5);
    let q = p.compose(&p.inverse());
    assert!((q.rotation - nalgebra::Matrix3::identity()).amax() < 1e-6);
    let wide = Pose::exp(&xi.cast());
    assert!((pose32(&wide).rotation - p.rotation).amax() < 1e-6);
}

#[test]
fn compose_and_solve_weights_in_f32() {
    let (w, h) = (24usize, 18usize);
    let bases: Vec<Map<f32>> = (0..3)
        .map(|i| Map::from_fn(w, h, |x, y| 1.0 + 0.1 * i as f32 + 0.02 * (x as f32) * (i as f32) - 0.03 * (y as f32) * ((i % 2) as f32)))
        .collect();
    let stack: Stack32 = BasisStack::new(&bases).unwrap();
    let truth: Weights32 = WeightVector::from_slice(&[1.5, -0.5, 0.25]);
    let depth = compose_depth(&stack, &truth).unwrap();
    let pts = [(2, 3), (20, 4), (11, 9), (5, 15), (18, 14), (9, 2)]
        .iter()
        .map(|&(x, y)| SparsePoint { pixel: Vector2::new(x as f32, y as f32), depth: depth.get(x, y), landmark_id: None })
        .collect();
    let sparse = SparseDepthSet::new(pts, w, h).unwrap();
    let got = solve_weights(&stack, &sparse, 0.0).unwrap();
    assert!((&got.0 - &truth.0).amax() < 1e-3, "{:?}", got.0);
}

fn linear_problem<T: basis_slam::Real>(g: &mut basis_slam::optimizer::FactorGraph<T>) {
    let a = DMatrix::from_row_slice(3, 2, &[2.0, 0.5, -1.0, 1.0, 0.3, 3.0].map(T::lit));
    let b = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0].map(T::lit));
    g.add_variable(VarId::Generic(0), Value::Vector(DVector::zeros(2)));
    g.add_variable(VarId::Generic(1), Value::Vector(DVector::zeros(2)));
    g.add_factor(LinearFactor::new(vec![(VarId::Generic(0), a)], DVector::from_column_slice(&[1.0, -2.0, 0.5].map(T::lit))).unwrap())
        .unwrap();
    g.add_factor(
        LinearFactor::new(
            vec![(VarId::Generic(0), DMatrix::identity(3, 2)), (VarId::Generic(1), b)],
            DVector::from_column_slice(&[0.2, 0.1, -0.4].map(T::lit)),
        )
        .unwrap(),
    )
    .unwrap();
}

#[test]
fn graph_solve_agrees_across_precisions() {
    let (mut g64, mut g32) = (Graph::new(), Graph32::new());
    linear_problem(&mut g64);
    linear_problem(&mut g32);
    let opts64 = lm::SolveOptions { huber: lm::HuberMode::Disabled, ..Default::default() };
    let opts32 = lm::SolveOptions { huber: lm::HuberMode::Disabled, cost_tolerance: 1e-6f32, ..Default::default() };
    let r64 = lm::solve(&mut g64, &opts64).unwrap();
    let r32 = lm::solve(&mut g32, &opts32).unwrap();
    assert!(r32.converged && r64.converged);
    for k in 0..2 {
        let x64 = g64.values().vector(VarId::Generic(k)).unwrap();
        let x32 = g32.values().vector(VarId::Generic(k)).unwrap();
        assert!((x32.clone().cast::<f64>() - x64).amax() < 1e-4);
    }
    assert!((r32.final_cost as f64 - r64.final_cost).abs() < 1e-4 * (1.0 + r64.final_cost));
}

#[test]
fn backend_runs_in_f32() {
    let mut scene = SceneConfig::standard(3);
    scene.num_keyframes = 5;
    let sc = Scenario::generate(&ScenarioConfig { scene, noise: NoiseModel::default() }).unwrap();
    let config = PipelineConfig::new(PipelineMode::VinsTwoStage, AblationSet::parse("b,c,full").unwrap());
    let ab = config.ablation;
    let frames64: Vec<_> = sc.frames.iter().map(|f| (f.keyframe(ab.basis_mode(), ab.confidence_mode()).unwrap(), f.landmarks.clone())).collect();
    let frames32 = frames64.iter().map(|(kf, lms)| {
        let lms = lms.iter().map(|l| Landmark { id: l.id, position_world: l.position_world.cast() }).collect();
        (keyframe32(kf), lms)
    });
    let r64 = run_frames(frames64.clone(), &config).unwrap();
    let r32 = run_frames(frames32, &config).unwrap();
    assert_eq!(r32.keyframes.len(), 5);
    for (a, b) in r32.keyframes.iter().zip(&r64.keyframes) {
        assert!((a.pose.translation.cast::<f64>() - b.pose.translation).amax() < 1e-3);
        assert!((a.weights.0.clone().cast::<f64>() - &b.weights.0).amax() < 1e-2 * (1.0 + b.weights.0.amax()));
    }
    for (d32, d64) in r32.depths.iter().zip(&r64.depths) {
        assert!(d32.values().as_slice().iter().all(|v| v.is_finite()));
        let diff = d32.values().as_slice().iter().zip(d64.values().as_slice()).map(|(a, b)| (*a as f64 - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-2, "{diff}");
    }
}
