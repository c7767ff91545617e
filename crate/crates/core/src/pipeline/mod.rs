//! Sliding-window orchestration of the depth-weight factors: per-keyframe
//! initialization, weight-only local adjustment over a window with optional
//! marginalization, and a final global adjustment.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::basis::{compose_depth, solve_weights_with_fallback, WeightVector};
use crate::error::{Error, Result};
use crate::factors::{
    sample_relative_points, Factor, FactorClass, Keyframe, Landmark, PosePriorFactor, PriorWeightFactor, RelativeDepthFactor,
    SparseDepthFactor, Value, VarId,
};
use crate::geometry::RigidPose;
use crate::maps::DepthMap;
use crate::optimizer::{marginalize, solve, FactorGraph, HuberMode, MarginalPrior, SolveOptions, SolveReport};
use crate::scalar::Real;
use crate::simulator::{BasisMode, ConfidenceMode, PoseNoise};

mod scenario;

pub use scenario::{run_on_scenario, run_scenario, scenario_name, AggregateMetrics, FrameMetrics, MetricsReport};

/// Backend integration pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    /// Weight-only windowed adjustment, then pose-only global adjustment.
    VinsTwoStage,
    /// Relative factors in a joint pose and weight global adjustment.
    OrbJoint,
}

impl PipelineMode {
    pub fn name(self) -> &'static str {
        match self {
            PipelineMode::VinsTwoStage => "vins_two_stage",
            PipelineMode::OrbJoint => "orb_joint",
        }
    }
}

impl FromStr for PipelineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vins" | "vins_two_stage" => Ok(PipelineMode::VinsTwoStage),
            "orb" | "orb_joint" => Ok(PipelineMode::OrbJoint),
            _ => Err(Error::InvalidConfig(format!("unknown mode '{s}'"))),
        }
    }
}

/// Ablation switches: balanced bases, oracle confidence, weight
/// optimization in the adjustment stages, marginalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AblationSet {
    pub balanced: bool,
    pub confidence: bool,
    pub full: bool,
    pub marginalize: bool,
}

impl AblationSet {
    pub const BASELINE: Self = Self { balanced: false, confidence: false, full: false, marginalize: false };
    pub const B: Self = Self { balanced: true, ..Self::BASELINE };
    pub const BC: Self = Self { confidence: true, ..Self::B };
    pub const FULL: Self = Self { full: true, ..Self::BC };
    pub const FULL_M: Self = Self { marginalize: true, ..Self::FULL };

    /// The five cells of the ablation table, left to right.
    pub fn table() -> [Self; 5] {
        [Self::BASELINE, Self::B, Self::BC, Self::FULL, Self::FULL_M]
    }

    /// Parses a comma-separated subset of `b`, `c`, `full`, `m`. The empty
    /// string is the baseline.
    pub fn parse(s: &str) -> Result<Self> {
        let mut set = Self::BASELINE;
        for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match tok.to_ascii_lowercase().as_str() {
                "b" => set.balanced = true,
                "c" => set.confidence = true,
                "full" => set.full = true,
                "m" => set.marginalize = true,
                other => return Err(Error::InvalidConfig(format!("unknown ablation token '{other}'"))),
            }
        }
        Ok(set)
    }

    pub fn basis_mode(&self) -> BasisMode {
        if self.balanced {
            BasisMode::Balanced
        } else {
            BasisMode::Imbalanced
        }
    }

    pub fn confidence_mode(&self) -> ConfidenceMode {
        if self.confidence {
            ConfidenceMode::Oracle
        } else {
            ConfidenceMode::Uniform
        }
    }

    /// Table column label, e.g. `baseline` or `+(B,C)`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.full {
            parts.push("full");
            if self.marginalize {
                parts.push("M");
            }
        } else {
            if self.balanced {
                parts.push("B");
            }
            if self.confidence {
                parts.push("C");
            }
            if self.marginalize {
                parts.push("M");
            }
        }
        match parts.len() {
            0 => "baseline".into(),
            1 => format!("+{}", parts[0]),
            _ => format!("+({})", parts.join(",")),
        }
    }
}

impl fmt::Display for AblationSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let toks: Vec<&str> = [
            (self.balanced, "b"),
            (self.confidence, "c"),
            (self.full, "full"),
            (self.marginalize, "m"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, t)| *t)
        .collect();
        f.write_str(&toks.join(","))
    }
}

impl FromStr for AblationSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

/// Levenberg-Marquardt settings shared by every stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    pub max_iterations: usize,
    pub lm_initial_lambda: f64,
    pub cost_tolerance: f64,
    /// Huber kernel with automatic thresholds on sparse and relative factors.
    pub robust: bool,
    pub threads: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            lm_initial_lambda: 1e-4,
            cost_tolerance: 1e-10,
            robust: true,
            threads: 1,
        }
    }
}

impl SolverSettings {
    pub fn options<T: Real>(&self) -> SolveOptions<T> {
        SolveOptions {
            max_iterations: self.max_iterations,
            lm_initial_lambda: T::lit(self.lm_initial_lambda),
            cost_tolerance: T::lit(self.cost_tolerance),
            huber: if self.robust { HuberMode::Auto } else { HuberMode::Disabled },
            threads: self.threads,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub mode: PipelineMode,
    pub lba_window: usize,
    pub tracking_window: usize,
    pub ablation: AblationSet,
    pub confidence_gate: f64,
    /// Relative samples per frame pair.
    pub relative_budget: usize,
    /// Predecessors each new keyframe is linked to.
    pub relative_neighbors: usize,
    /// Minimum frustum overlap for a relative link.
    pub min_overlap: f64,
    pub prior_sigma: f64,
    /// Also run a global adjustment after every `n` keyframes.
    pub gba_period: Option<usize>,
    /// Weight-only windowed adjustment in `orb_joint` mode.
    pub orb_lba: bool,
    /// Landmarks free in the `orb_joint` global adjustment.
    pub optimize_landmarks: bool,
    /// Generate keyframes on a separate thread while the backend runs.
    pub producer_thread: bool,
    /// Front-end pose uncertainty, anchoring poses at their tracked values
    /// in the global adjustment.
    pub pose_prior: Option<PoseNoise>,
    /// Fit each keyframe's weights to its sparse depths on arrival; when
    /// off, the delivered weights are kept.
    pub initialize_weights: bool,
    pub solver: SolverSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: PipelineMode::VinsTwoStage,
            lba_window: 8,
            tracking_window: 12,
            ablation: AblationSet::FULL,
            confidence_gate: 0.5,
            relative_budget: 96,
            relative_neighbors: 2,
            min_overlap: 0.3,
            prior_sigma: 0.1,
            gba_period: None,
            orb_lba: false,
            optimize_landmarks: false,
            producer_thread: false,
            pose_prior: Some(PoseNoise { rotation: 0.002, translation: 0.005 }),
            initialize_weights: true,
            solver: SolverSettings::default(),
        }
    }
}

impl PipelineConfig {
    pub fn new(mode: PipelineMode, ablation: AblationSet) -> Self {
        Self { mode, ablation, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lba_window < 1 || self.lba_window > self.tracking_window {
            return Err(Error::InvalidConfig(format!(
                "need 1 <= lba_window ({}) <= tracking_window ({})",
                self.lba_window, self.tracking_window
            )));
        }
        if self.relative_budget == 0 {
            return Err(Error::InvalidConfig("relative_budget must be positive".into()));
        }
        if !(self.prior_sigma > 0.0) || !self.prior_sigma.is_finite() {
            return Err(Error::InvalidConfig("prior_sigma must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.min_overlap) || !self.confidence_gate.is_finite() {
            return Err(Error::InvalidConfig("min_overlap must lie in [0, 1]".into()));
        }
        if self.gba_period == Some(0) {
            return Err(Error::InvalidConfig("gba_period must be positive".into()));
        }
        if let Some(p) = self.pose_prior {
            if !(p.rotation > 0.0 && p.translation > 0.0) {
                return Err(Error::InvalidConfig("pose prior sigmas must be positive".into()));
            }
        }
        if self.solver.max_iterations == 0 {
            return Err(Error::InvalidConfig("max_iterations must be positive".into()));
        }
        Ok(())
    }

    pub fn marginalize(&self) -> bool {
        self.ablation.marginalize
    }

    /// Whether the weight-only windowed adjustment runs.
    pub fn lba_enabled(&self) -> bool {
        self.ablation.full && (self.mode == PipelineMode::VinsTwoStage || self.orb_lba)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Init,
    Lba,
    Gba,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::Lba => "lba",
            Stage::Gba => "gba",
        }
    }
}

/// One solve of the run.
#[derive(Debug, Clone)]
pub struct StageReport<T: Real> {
    pub stage: Stage,
    /// Keyframe whose arrival triggered the solve.
    pub trigger: usize,
    pub report: SolveReport<T>,
}

/// A weight estimate written by a stage.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightEntry<T: Real> {
    pub frame: usize,
    pub stage: Stage,
    pub trigger: usize,
    pub weights: DVector<T>,
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct RunRecord<T: Real> {
    pub reports: Vec<StageReport<T>>,
    /// Append-only.
    pub weight_history: Vec<WeightEntry<T>>,
    pub marginal_priors: Vec<MarginalPrior<T>>,
    /// Keyframes initialized without sparse points.
    pub low_confidence: Vec<usize>,
    /// Poses before the final global adjustment.
    pub pre_gba_poses: Vec<RigidPose<T>>,
    /// Final state.
    pub keyframes: Vec<Keyframe<T>>,
    pub depths: Vec<DepthMap<T>>,
}

impl<T: Real> RunRecord<T> {
    fn new() -> Self {
        Self {
            reports: Vec::new(),
            weight_history: Vec::new(),
            marginal_priors: Vec::new(),
            low_confidence: Vec::new(),
            pre_gba_poses: Vec::new(),
            keyframes: Vec::new(),
            depths: Vec::new(),
        }
    }

    /// True when no solve diverged.
    pub fn healthy(&self) -> bool {
        self.reports.iter().all(|r| !r.report.diverged)
    }

    pub fn poses(&self) -> Vec<(usize, RigidPose<T>)> {
        self.keyframes.iter().map(|k| (k.id, k.pose)).collect()
    }
}

/// Result of [`initialize_keyframe_weights`].
#[derive(Debug, Clone)]
pub struct InitOutcome<T: Real> {
    pub weights: WeightVector<T>,
    /// No sparse points: the weights are the frame's own anchor.
    pub low_confidence: bool,
    pub report: Option<SolveReport<T>>,
}

/// Landmark seen by sparse point `j` of `frame`: the listed landmark when
/// its id is known, else the measurement backprojected at the frame pose.
fn sparse_landmarks<T: Real>(frame: &Keyframe<T>, landmarks: &[Landmark<T>]) -> Result<Vec<Landmark<T>>> {
    let by_id: BTreeMap<usize, &Landmark<T>> = landmarks.iter().map(|l| (l.id, l)).collect();
    let mut next = landmarks.iter().map(|l| l.id + 1).max().unwrap_or(0);
    frame
        .sparse
        .points
        .iter()
        .map(|p| match p.landmark_id.and_then(|id| by_id.get(&id)) {
            Some(l) => Ok(**l),
            None => {
                let xc = frame.camera.backproject(&p.pixel, p.depth)?;
                next += 1;
                Ok(Landmark { id: usize::MAX - next, position_world: frame.pose.inverse_transform_point(&xc) })
            }
        })
        .collect()
}

/// Weights of one keyframe from its sparse depths alone: sparse factors
/// plus a prior anchored at the damped least-squares solution, pose and
/// landmarks fixed.
pub fn initialize_keyframe_weights<T: Real>(
    frame: &Keyframe<T>,
    landmarks: &[Landmark<T>],
    prior_sigma: T,
    options: &SolveOptions<T>,
) -> Result<InitOutcome<T>> {
    if frame.sparse.is_empty() {
        return Ok(InitOutcome { weights: frame.weights.clone(), low_confidence: true, report: None });
    }
    let (anchor, _) = solve_weights_with_fallback(&frame.stack, &frame.sparse)?;
    let mut g = FactorGraph::new();
    g.add_variable(VarId::Pose(frame.id), Value::Pose(frame.pose));
    g.add_variable(VarId::Weights(frame.id), Value::Vector(anchor.0.clone()));
    for lm in sparse_landmarks(frame, landmarks)? {
        g.add_variable(VarId::Landmark(lm.id), Value::Vector(DVector::from_column_slice(lm.position_world.as_slice())));
        g.add_factor(SparseDepthFactor::new(frame.id, lm.id, frame.camera, frame.stack.clone()))?;
    }
    g.add_factor(PriorWeightFactor::isotropic(frame.id, anchor.0.clone(), prior_sigma)?)?;
    g.fix_where(|id| !matches!(id, VarId::Weights(_)), true);
    let report = solve(&mut g, options)?;
    let w = g.values().vector(VarId::Weights(frame.id))?.clone();
    Ok(InitOutcome { weights: WeightVector(w), low_confidence: false, report: Some(report) })
}

/// Fraction of stride-4 valid pixels of `from` whose composed-depth
/// backprojection lands in front of and inside `to`.
pub fn frame_overlap<T: Real>(from: &Keyframe<T>, to: &Keyframe<T>) -> Result<f64> {
    let depth = compose_depth(&from.stack, &from.weights)?;
    let (mut total, mut inside) = (0usize, 0usize);
    for y in (0..from.camera.height).step_by(4) {
        for x in (0..from.camera.width).step_by(4) {
            if !depth.is_valid(x, y) {
                continue;
            }
            total += 1;
            let px = Vector2::new(T::from_count(x), T::from_count(y));
            let xw = from.pose.inverse_transform_point(&(from.camera.ray(&px) * depth.get(x, y)));
            let xc = to.pose.transform_point(&xw);
            if let Ok(q) = to.camera.project(&xc) {
                if to.camera.contains(&q) {
                    inside += 1;
                }
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { inside as f64 / total as f64 })
}

fn point_value<T: Real>(lm: &Landmark<T>) -> Value<T> {
    Value::Vector(DVector::from_column_slice(lm.position_world.as_slice()))
}

/// Incremental backend: feed keyframes in order with [`Pipeline::push`],
/// then call [`Pipeline::finish`].
#[derive(Debug)]
pub struct Pipeline<T: Real> {
    config: PipelineConfig,
    options: SolveOptions<T>,
    frames: Vec<Keyframe<T>>,
    /// Poses as delivered by the front end.
    tracked: Vec<RigidPose<T>>,
    landmarks: Vec<Vec<Landmark<T>>>,
    window: VecDeque<usize>,
    lba: FactorGraph<T>,
    relative: Vec<Arc<RelativeDepthFactor<T>>>,
    record: RunRecord<T>,
}

impl<T: Real> Pipeline<T> {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            options: config.solver.options(),
            frames: Vec::new(),
            tracked: Vec::new(),
            landmarks: Vec::new(),
            window: VecDeque::new(),
            lba: FactorGraph::new(),
            relative: Vec::new(),
            record: RunRecord::new(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn frames(&self) -> &[Keyframe<T>] {
        &self.frames
    }

    /// Ids of the keyframes in the local window, oldest first.
    pub fn window(&self) -> Vec<usize> {
        self.window.iter().copied().collect()
    }

    pub fn lba_graph(&self) -> &FactorGraph<T> {
        &self.lba
    }

    pub fn record(&self) -> &RunRecord<T> {
        &self.record
    }

    /// Adds the next keyframe: initializes its weights, links it to its
    /// predecessors, slides the window and runs the local adjustment.
    /// Keyframe ids must be `0, 1, 2, ...` in arrival order.
    pub fn push(&mut self, mut frame: Keyframe<T>, landmarks: Vec<Landmark<T>>) -> Result<()> {
        let id = frame.id;
        if id != self.frames.len() {
            return Err(Error::InvalidConfig(format!("expected keyframe {}, got {id}", self.frames.len())));
        }
        if self.config.initialize_weights {
            let init =
                initialize_keyframe_weights(&frame, &landmarks, T::lit(self.config.prior_sigma), &self.options)?;
            frame.weights = init.weights;
            if init.low_confidence {
                self.record.low_confidence.push(id);
            }
            if let Some(report) = init.report {
                self.record.reports.push(StageReport { stage: Stage::Init, trigger: id, report });
            }
        }
        self.record.weight_history.push(WeightEntry {
            frame: id,
            stage: Stage::Init,
            trigger: id,
            weights: frame.weights.0.clone(),
        });
        let landmarks = sparse_landmarks(&frame, &landmarks)?;
        self.tracked.push(frame.pose);
        self.frames.push(frame);
        self.landmarks.push(landmarks);

        let lba = self.config.lba_enabled();
        if lba {
            self.enter_window(id)?;
            if self.window.len() > self.config.lba_window {
                self.slide_and_marginalize()?;
            }
        }
        if self.config.ablation.full {
            self.link_relative(id)?;
        }
        if lba && self.window.len() >= 2 {
            self.run_lba(id)?;
        }
        if let Some(p) = self.config.gba_period {
            if (id + 1).is_multiple_of(p) && self.frames.len() >= 2 {
                self.run_gba(id)?;
            }
        }
        Ok(())
    }

    fn enter_window(&mut self, id: usize) -> Result<()> {
        let f = &self.frames[id];
        self.lba.add_variable(VarId::Pose(id), Value::Pose(f.pose));
        self.lba.add_variable(VarId::Weights(id), Value::Vector(f.weights.0.clone()));
        for lm in &self.landmarks[id] {
            self.lba.add_variable(VarId::Landmark(lm.id), point_value(lm));
            self.lba.add_factor(SparseDepthFactor::new(id, lm.id, f.camera, f.stack.clone()))?;
        }
        self.lba.fix_where(|v| !matches!(v, VarId::Weights(_)), true);
        self.window.push_back(id);
        Ok(())
    }

    /// Relative factors from `id` into its nearest sufficiently overlapping
    /// predecessors.
    fn link_relative(&mut self, id: usize) -> Result<()> {
        let candidates: Vec<usize> = if self.config.lba_enabled() {
            self.window.iter().rev().copied().filter(|&j| j != id).collect()
        } else {
            (id.saturating_sub(self.config.tracking_window - 1)..id).rev().collect()
        };
        let mut linked = 0;
        for j in candidates {
            if linked == self.config.relative_neighbors {
                break;
            }
            let (host, target) = (&self.frames[id], &self.frames[j]);
            if frame_overlap(host, target)? < self.config.min_overlap {
                continue;
            }
            let samples =
                sample_relative_points(host, target, self.config.relative_budget, T::lit(self.config.confidence_gate));
            if samples.is_empty() {
                continue;
            }
            linked += 1;
            for s in &samples {
                let f = Arc::new(RelativeDepthFactor::new(host, target, s));
                if self.config.lba_enabled() {
                    self.lba.add_shared_factor(f.clone())?;
                }
                self.relative.push(f);
            }
        }
        Ok(())
    }

    /// Removes the oldest keyframe from the window. Its sparse factors are
    /// dropped; its relative, prior and marginal factors are either
    /// Schur-marginalized into a prior on the remaining weights or dropped.
    pub fn slide_and_marginalize(&mut self) -> Result<Option<MarginalPrior<T>>> {
        let Some(old) = self.window.pop_front() else {
            return Ok(None);
        };
        let w = VarId::Weights(old);
        self.lba
            .retain_factors(|f| !(f.class() == FactorClass::SparseDepth && f.keys().contains(&w)));
        let mut out = None;
        if self.config.marginalize() {
            let prior = marginalize(&mut self.lba, &[w])?;
            if !prior.is_empty() {
                self.record.marginal_priors.push(prior.clone());
                out = Some(prior);
            }
        } else {
            self.lba.retain_factors(|f| !f.keys().contains(&w));
            self.lba.remove_variable(w)?;
        }
        self.lba.remove_variable(VarId::Pose(old))?;
        for lm in &self.landmarks[old] {
            let shared = self.window.iter().any(|&k| self.landmarks[k].iter().any(|l| l.id == lm.id));
            if !shared {
                self.lba.remove_variable(VarId::Landmark(lm.id))?;
            }
        }
        Ok(out)
    }

    /// Weight-only adjustment over the window with poses and landmarks
    /// fixed. Prior factors are re-anchored at the current weights.
    fn run_lba(&mut self, trigger: usize) -> Result<()> {
        self.lba.retain_factors(|f| f.class() != FactorClass::PriorWeight);
        let sigma = T::lit(self.config.prior_sigma);
        for &id in &self.window {
            let w = self.frames[id].weights.0.clone();
            self.lba.set_value(VarId::Weights(id), Value::Vector(w.clone()))?;
            self.lba.add_factor(PriorWeightFactor::isotropic(id, w, sigma)?)?;
        }
        self.lba.fix_where(|v| !matches!(v, VarId::Weights(_)), true);
        let report = solve(&mut self.lba, &self.options)?;
        for &id in &self.window {
            let w = self.lba.values().vector(VarId::Weights(id))?.clone();
            self.frames[id].weights = WeightVector(w.clone());
            self.record.weight_history.push(WeightEntry { frame: id, stage: Stage::Lba, trigger, weights: w });
        }
        self.record.reports.push(StageReport { stage: Stage::Lba, trigger, report });
        Ok(())
    }

    /// Global adjustment over every keyframe so far.
    ///
    /// `vins_two_stage`: poses free, weights and landmarks fixed.
    /// `orb_joint`: poses free, weights free when weight optimization is
    /// enabled, landmarks free on request.
    fn run_gba(&mut self, trigger: usize) -> Result<()> {
        let cfg = self.config;
        let weights_free = cfg.mode == PipelineMode::OrbJoint && cfg.ablation.full;
        let landmarks_free = cfg.mode == PipelineMode::OrbJoint && cfg.optimize_landmarks;
        let mut g = FactorGraph::new();
        for (f, lms) in self.frames.iter().zip(&self.landmarks) {
            g.add_variable(VarId::Pose(f.id), Value::Pose(f.pose));
            g.add_variable(VarId::Weights(f.id), Value::Vector(f.weights.0.clone()));
            for lm in lms {
                g.add_variable(VarId::Landmark(lm.id), point_value(lm));
                g.add_factor(SparseDepthFactor::new(f.id, lm.id, f.camera, f.stack.clone()))?;
            }
        }
        if cfg.lba_enabled() {
            for f in self.lba.factors().iter().filter(|f| f.class() == FactorClass::RelativeDepth) {
                g.add_shared_factor(f.clone())?;
            }
            for p in self.lba.marginal_priors() {
                g.install_prior((**p).clone())?;
            }
        } else {
            for f in &self.relative {
                g.add_shared_factor(f.clone() as Arc<dyn Factor<T>>)?;
            }
        }
        if let Some(p) = cfg.pose_prior {
            for (f, anchor) in self.frames.iter().zip(&self.tracked) {
                g.add_factor(PosePriorFactor::new(f.id, *anchor, T::lit(p.rotation), T::lit(p.translation))?)?;
            }
        }
        if weights_free {
            let sigma = T::lit(cfg.prior_sigma);
            for f in &self.frames {
                g.add_factor(PriorWeightFactor::isotropic(f.id, f.weights.0.clone(), sigma)?)?;
            }
        }
        g.fix_where(
            |v| match v {
                VarId::Pose(_) => false,
                VarId::Weights(_) => !weights_free,
                VarId::Landmark(_) => !landmarks_free,
                VarId::Generic(_) => true,
            },
            true,
        );
        let report = solve(&mut g, &self.options)?;
        for f in self.frames.iter_mut() {
            f.pose = *g.values().pose(VarId::Pose(f.id))?;
            if weights_free {
                f.weights = WeightVector(g.values().vector(VarId::Weights(f.id))?.clone());
                self.record.weight_history.push(WeightEntry {
                    frame: f.id,
                    stage: Stage::Gba,
                    trigger,
                    weights: f.weights.0.clone(),
                });
            }
            if self.lba.value(VarId::Pose(f.id)).is_some() {
                self.lba.set_value(VarId::Pose(f.id), Value::Pose(f.pose))?;
                self.lba.set_value(VarId::Weights(f.id), Value::Vector(f.weights.0.clone()))?;
            }
        }
        if landmarks_free {
            for lms in self.landmarks.iter_mut() {
                for lm in lms.iter_mut() {
                    let p = g.values().point(VarId::Landmark(lm.id))?;
                    lm.position_world = p;
                    if self.lba.value(VarId::Landmark(lm.id)).is_some() {
                        self.lba.set_value(VarId::Landmark(lm.id), point_value(lm))?;
                    }
                }
            }
        }
        self.record.reports.push(StageReport { stage: Stage::Gba, trigger, report });
        Ok(())
    }

    /// Runs the final global adjustment and returns the record.
    pub fn finish(mut self) -> Result<RunRecord<T>> {
        if self.frames.len() < 2 {
            return Err(Error::InvalidConfig("a run needs at least 2 keyframes".into()));
        }
        self.record.pre_gba_poses = self.frames.iter().map(|f| f.pose).collect();
        let last = self.frames.len() - 1;
        self.run_gba(last)?;
        self.record.depths = self
            .frames
            .iter()
            .map(|f| compose_depth(&f.stack, &f.weights))
            .collect::<Result<_>>()?;
        self.record.keyframes = self.frames;
        Ok(self.record)
    }
}

/// Runs the backend over keyframes given in order.
pub fn run_frames<T: Real>(
    frames: impl IntoIterator<Item = (Keyframe<T>, Vec<Landmark<T>>)>,
    config: &PipelineConfig,
) -> Result<RunRecord<T>> {
    let mut p = Pipeline::new(*config)?;
    for (kf, lms) in frames {
        p.push(kf, lms)?;
    }
    p.finish()
}

#[cfg(test)]
mod tests;
