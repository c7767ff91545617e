use std::sync::mpsc;
use std::thread;

use serde::{Deserialize, Serialize};

use super::{Pipeline, PipelineConfig, RunRecord};
use crate::error::{Error, Result};
use crate::eval::{ape, depth_metrics, gt_occlusion_rule, pooled_depth_metrics, reprojection_consistency_with, AlignMode};
use crate::simulator::{generate_frame, generate_scene, FrameData, GroundTruth, Scenario, ScenarioConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub id: usize,
    pub rmse: f64,
    pub delta1: f64,
    pub valid_pixel_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    /// Depth RMSE pooled over all valid pixels of all keyframes.
    pub rmse: f64,
    pub delta1: f64,
    /// Sim(3)-aligned position error.
    pub ape: f64,
    /// Same, before the final global adjustment.
    pub ape_before_gba: f64,
    /// Cross-frame depth reprojection RMS over non-occluded samples.
    pub consistency: Option<f64>,
}

/// Metrics of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub mode: String,
    pub ablation: String,
    pub per_frame: Vec<FrameMetrics>,
    pub aggregate: AggregateMetrics,
    /// No solve diverged.
    pub healthy: bool,
}

/// Name of a scenario used in reports.
pub fn scenario_name(config: &ScenarioConfig) -> String {
    let s = &config.scene;
    format!(
        "{}-{}-{}kf-seed{}",
        serde_json::to_value(s.layout).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
        serde_json::to_value(s.trajectory).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
        s.num_keyframes,
        s.seed
    )
}

fn evaluate(
    name: String,
    gt: &GroundTruth,
    record: &RunRecord<f64>,
    config: &PipelineConfig,
) -> Result<MetricsReport> {
    let mut per_frame = Vec::with_capacity(record.depths.len());
    for (kf, d) in record.keyframes.iter().zip(&record.depths) {
        let m = depth_metrics(d, &gt.depths[kf.id], None)?;
        per_frame.push(FrameMetrics { id: kf.id, rmse: m.rmse, delta1: m.delta1, valid_pixel_count: m.valid_pixel_count });
    }
    let pairs: Vec<_> = record.keyframes.iter().zip(&record.depths).map(|(kf, d)| (d, &gt.depths[kf.id])).collect();
    let pooled = pooled_depth_metrics(&pairs, None)?;
    let reference: Vec<_> = gt.poses.iter().copied().enumerate().collect();
    let after = ape(&record.poses(), &reference, AlignMode::Sim3)?;
    let before: Vec<_> = record
        .keyframes
        .iter()
        .zip(&record.pre_gba_poses)
        .map(|(k, p)| (k.id, *p))
        .collect();
    let before = ape(&before, &reference, AlignMode::Sim3)?;
    let ids: Vec<usize> = record.keyframes.iter().map(|k| k.id).collect();
    let consistency = match reprojection_consistency_with(&record.keyframes, &gt_occlusion_rule(gt, &ids)) {
        Ok(c) => Some(c),
        Err(Error::NoOverlap) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        scenario: name,
        mode: config.mode.name().into(),
        ablation: config.ablation.to_string(),
        per_frame,
        aggregate: AggregateMetrics {
            rmse: pooled.rmse,
            delta1: pooled.delta1,
            ape: after.ape_rmse,
            ape_before_gba: before.ape_rmse,
            consistency,
        },
        healthy: record.healthy(),
    })
}

fn feed(pipeline: &mut Pipeline<f64>, frame: &FrameData, config: &PipelineConfig) -> Result<()> {
    let ab = config.ablation;
    let kf = frame.keyframe(ab.basis_mode(), ab.confidence_mode())?;
    pipeline.push(kf, frame.landmarks.clone())
}

/// Runs the backend on a generated scenario and evaluates it against GT.
pub fn run_on_scenario(scenario: &Scenario, config: &PipelineConfig) -> Result<(RunRecord<f64>, MetricsReport)> {
    let mut p = Pipeline::new(*config)?;
    for f in &scenario.frames {
        feed(&mut p, f, config)?;
    }
    let record = p.finish()?;
    let report = evaluate(scenario_name(&scenario.config), &scenario.gt, &record, config)?;
    Ok((record, report))
}

/// Generates the scenario and runs the backend on it.
///
/// With `producer_thread`, keyframe `k + 1` is generated on a separate
/// thread while the backend processes keyframe `k`; results are identical
/// to the sequential path.
pub fn run_scenario(scenario: &ScenarioConfig, config: &PipelineConfig) -> Result<(RunRecord<f64>, MetricsReport)> {
    config.validate()?;
    if !config.producer_thread {
        return run_on_scenario(&Scenario::generate(scenario)?, config);
    }
    scenario.noise.validate()?;
    let (gt, _) = generate_scene(&scenario.scene)?;
    let mut p = Pipeline::new(*config)?;
    let (tx, rx) = mpsc::sync_channel::<Result<FrameData>>(1);
    let frames = thread::scope(|s| -> Result<Vec<FrameData>> {
        let gt = &gt;
        s.spawn(move || {
            for k in 0..gt.poses.len() {
                let f = generate_frame(&scenario.scene, &scenario.noise, &gt.depths[k], &gt.poses[k], k);
                let failed = f.is_err();
                if tx.send(f).is_err() || failed {
                    break;
                }
            }
        });
        let mut frames = Vec::new();
        for f in rx {
            let f = f?;
            feed(&mut p, &f, config)?;
            frames.push(f);
        }
        Ok(frames)
    })?;
    let record = p.finish()?;
    let mut gt = gt;
    gt.landmarks = frames.iter().flat_map(|f| f.landmarks.iter().copied()).collect();
    let report = evaluate(scenario_name(scenario), &gt, &record, config)?;
    Ok((record, report))
}
