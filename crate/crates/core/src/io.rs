//! File formats and the scenario directory layout.
//!
//! ```text
//! scene.json
//! gt/trajectory.txt  gt/depth_NNN.pfm  gt/mask_NNN.pgm  gt/landmarks.csv
//! frames/initial_trajectory.txt
//! frames/NNN/sparse.csv
//! frames/NNN/{balanced,imbalanced}/basis_K.pfm, confidence.pfm, initial_weights.csv
//! ```
//!
//! Run outputs go to a separate directory: `metrics.json`,
//! `trajectory.txt`, `trajectory_before_gba.txt`, `weights.csv`,
//! `depth_NNN.pfm` and `traces/*.csv`.
//!
//! Every write goes to a temporary file in the target directory that is
//! then renamed over the destination.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::basis::{BasisStack, SparseDepthSet, SparsePoint, WeightVector};
use crate::error::{Error, Result};
use crate::factors::Landmark;
use crate::geometry::RigidPose;
use crate::maps::{ConfidenceMap, DepthMap, Map};
use crate::optimizer::TraceRow;
use crate::pipeline::{MetricsReport, RunRecord};
use crate::simulator::{BasisMode, FrameData, GroundTruth, ModeData, Scenario, ScenarioConfig};

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io { path: path.display().to_string(), message: e.to_string() }
}

fn fmt_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format { path: path.display().to_string(), message: message.into() }
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(path, e))?;
    tmp.write_all(bytes).map_err(|e| io_err(path, e))?;
    tmp.as_file().sync_all().map_err(|e| io_err(path, e))?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| io_err(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

/// Splits a netpbm-style header into `count` whitespace-separated tokens
/// and returns them with the offset of the payload.
fn header_tokens(bytes: &[u8], count: usize) -> Option<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return None;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // exactly one whitespace byte separates header and payload
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return None;
    }
    Some((tokens, i + 1))
}

/// Single-channel little-endian PFM, rows stored bottom to top.
pub fn encode_pfm(map: &Map<f32>) -> Vec<u8> {
    let (w, h) = (map.width(), map.height());
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(4 * w * h);
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&map.get(x, y).to_le_bytes());
        }
    }
    out
}

/// Parses a single-channel PFM of either byte order.
pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<Map<f32>> {
    let (t, off) = header_tokens(bytes, 4).ok_or_else(|| fmt_err(path, "truncated PFM header"))?;
    if t[0] != "Pf" {
        return Err(fmt_err(path, format!("expected single-channel PFM, found magic {:?}", t[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| fmt_err(path, format!("bad PFM size {s:?}")));
    let (w, h) = (parse(&t[1])?, parse(&t[2])?);
    let scale: f64 = t[3].parse().map_err(|_| fmt_err(path, format!("bad PFM scale {:?}", t[3])))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(fmt_err(path, "PFM scale must be non-zero"));
    }
    let payload = &bytes[off..];
    if w == 0 || h == 0 || payload.len() != 4 * w * h {
        return Err(fmt_err(path, format!("PFM payload has {} bytes for {w}x{h}", payload.len())));
    }
    let mut data = vec![0f32; w * h];
    for (k, c) in payload.chunks_exact(4).enumerate() {
        let b = [c[0], c[1], c[2], c[3]];
        let v = if scale < 0.0 { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (x, row) = (k % w, k / w);
        data[(h - 1 - row) * w + x] = v;
    }
    Map::new(w, h, data).map_err(|e| fmt_err(path, e.to_string()))
}

pub fn write_pfm(path: &Path, map: &Map<f64>) -> Result<()> {
    write_atomic(path, &encode_pfm(&map.map(|v| v as f32)))
}

pub fn read_pfm(path: &Path) -> Result<Map<f64>> {
    Ok(decode_pfm(&read_bytes(path)?, path)?.map(f64::from))
}

/// Depth map as PFM with masked-out pixels stored as 0.
pub fn write_depth(path: &Path, depth: &DepthMap<f64>) -> Result<()> {
    let (w, h) = (depth.width(), depth.height());
    let m = Map::from_fn(w, h, |x, y| if depth.is_valid(x, y) { depth.get(x, y) } else { 0.0 });
    write_pfm(path, &m)
}

/// Reads a depth map, taking validity from `mask` when given and from the
/// values otherwise.
pub fn read_depth(path: &Path, mask: Option<&Path>) -> Result<DepthMap<f64>> {
    let values = read_pfm(path)?;
    match mask {
        Some(m) => {
            let mask = read_pgm(m)?;
            if !values.same_shape(&mask) {
                return Err(fmt_err(m, "mask size differs from depth map"));
            }
            DepthMap::with_mask(values, &mask.map(|v| v > 0).into_vec()).map_err(|e| fmt_err(path, e.to_string()))
        }
        None => Ok(DepthMap::with_max_depth(values, f64::MAX)),
    }
}

/// Binary 8-bit PGM.
pub fn encode_pgm(map: &Map<u8>) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    out.extend_from_slice(map.as_slice());
    out
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Map<u8>> {
    let (t, off) = header_tokens(bytes, 4).ok_or_else(|| fmt_err(path, "truncated PGM header"))?;
    if t[0] != "P5" {
        return Err(fmt_err(path, format!("expected binary PGM, found magic {:?}", t[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| fmt_err(path, format!("bad PGM field {s:?}")));
    let (w, h, maxval) = (parse(&t[1])?, parse(&t[2])?, parse(&t[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(fmt_err(path, "only 8-bit PGM is supported"));
    }
    let payload = &bytes[off..];
    if w == 0 || h == 0 || payload.len() != w * h {
        return Err(fmt_err(path, format!("PGM payload has {} bytes for {w}x{h}", payload.len())));
    }
    Map::new(w, h, payload.to_vec()).map_err(|e| fmt_err(path, e.to_string()))
}

pub fn write_pgm(path: &Path, map: &Map<u8>) -> Result<()> {
    write_atomic(path, &encode_pgm(map))
}

pub fn read_pgm(path: &Path) -> Result<Map<u8>> {
    decode_pgm(&read_bytes(path)?, path)
}

/// Validity mask of a depth map as 0/255.
pub fn mask_image(depth: &DepthMap<f64>) -> Map<u8> {
    Map::from_fn(depth.width(), depth.height(), |x, y| if depth.is_valid(x, y) { 255 } else { 0 })
}

/// `id tx ty tz qw qx qy qz` per line, 17 significant digits.
pub fn format_trajectory(poses: &[(usize, RigidPose<f64>)]) -> String {
    let mut s = String::new();
    for (id, p) in poses {
        let q = p.quaternion();
        let t = p.translation;
        let _ = writeln!(
            s,
            "{id} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e}",
            t.x, t.y, t.z, q.w, q.i, q.j, q.k
        );
    }
    s
}

pub fn parse_trajectory(text: &str, path: &Path) -> Result<Vec<(usize, RigidPose<f64>)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || fmt_err(path, format!("line {}: expected `id tx ty tz qw qx qy qz`", n + 1));
        if f.len() != 8 {
            return Err(bad());
        }
        let id: usize = f[0].parse().map_err(|_| bad())?;
        let v: Vec<f64> = f[1..].iter().map(|s| s.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(bad());
        }
        let q = Quaternion::new(v[3], v[4], v[5], v[6]);
        if q.norm() < 1e-12 {
            return Err(fmt_err(path, format!("line {}: zero quaternion", n + 1)));
        }
        let pose = RigidPose::from_quaternion(&UnitQuaternion::from_quaternion(q), Vector3::new(v[0], v[1], v[2]));
        out.push((id, pose));
    }
    Ok(out)
}

pub fn write_trajectory(path: &Path, poses: &[(usize, RigidPose<f64>)]) -> Result<()> {
    write_atomic(path, format_trajectory(poses).as_bytes())
}

pub fn read_trajectory(path: &Path) -> Result<Vec<(usize, RigidPose<f64>)>> {
    parse_trajectory(&read_text(path)?, path)
}

/// Data rows of a CSV file with the expected header.
fn csv_rows<'a>(text: &'a str, header: &str, path: &Path) -> Result<Vec<(usize, Vec<&'a str>)>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == header => {}
        _ => return Err(fmt_err(path, format!("expected header `{header}`"))),
    }
    let width = header.split(',').count();
    lines
        .map(|(n, l)| {
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            if f.len() != width {
                return Err(fmt_err(path, format!("line {}: expected {width} fields", n + 1)));
            }
            Ok((n + 1, f))
        })
        .collect()
}

fn field<V: std::str::FromStr>(s: &str, line: usize, path: &Path) -> Result<V> {
    s.parse().map_err(|_| fmt_err(path, format!("line {line}: cannot parse {s:?}")))
}

const SPARSE_HEADER: &str = "u,v,depth,landmark_id";

pub fn format_sparse(set: &SparseDepthSet<f64>) -> String {
    let mut s = format!("{SPARSE_HEADER}\n");
    for p in &set.points {
        let id = p.landmark_id.map(|i| i.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{id}", p.pixel.x, p.pixel.y, p.depth);
    }
    s
}

pub fn read_sparse(path: &Path, width: usize, height: usize) -> Result<SparseDepthSet<f64>> {
    let text = read_text(path)?;
    let mut points = Vec::new();
    for (n, f) in csv_rows(&text, SPARSE_HEADER, path)? {
        points.push(SparsePoint {
            pixel: Vector2::new(field(f[0], n, path)?, field(f[1], n, path)?),
            depth: field(f[2], n, path)?,
            landmark_id: if f[3].is_empty() { None } else { Some(field(f[3], n, path)?) },
        });
    }
    SparseDepthSet::new(points, width, height).map_err(|e| fmt_err(path, e.to_string()))
}

const LANDMARK_HEADER: &str = "id,x,y,z";

pub fn format_landmarks(landmarks: &[Landmark<f64>]) -> String {
    let mut s = format!("{LANDMARK_HEADER}\n");
    for l in landmarks {
        let p = l.position_world;
        let _ = writeln!(s, "{},{},{},{}", l.id, p.x, p.y, p.z);
    }
    s
}

pub fn read_landmarks(path: &Path) -> Result<Vec<Landmark<f64>>> {
    let text = read_text(path)?;
    csv_rows(&text, LANDMARK_HEADER, path)?
        .into_iter()
        .map(|(n, f)| {
            Ok(Landmark {
                id: field(f[0], n, path)?,
                position_world: Vector3::new(field(f[1], n, path)?, field(f[2], n, path)?, field(f[3], n, path)?),
            })
        })
        .collect()
}

/// Cost trace, one row per accepted step.
pub fn format_trace(rows: &[TraceRow<f64>]) -> String {
    let mut s = String::from("iteration,cost,lambda\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.iteration, r.cost, r.lambda);
    }
    s
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow<f64>>> {
    let text = read_text(path)?;
    csv_rows(&text, "iteration,cost,lambda", path)?
        .into_iter()
        .map(|(n, f)| Ok(TraceRow { iteration: field(f[0], n, path)?, cost: field(f[1], n, path)?, lambda: field(f[2], n, path)? }))
        .collect()
}

fn format_weight_row(w: &WeightVector<f64>) -> String {
    w.0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn read_weight_row(path: &Path) -> Result<WeightVector<f64>> {
    let text = read_text(path)?;
    let line = text.lines().find(|l| !l.trim().is_empty()).ok_or_else(|| fmt_err(path, "empty weight file"))?;
    let v: Vec<f64> = line.split(',').map(|s| field(s.trim(), 1, path)).collect::<Result<_>>()?;
    WeightVector::new(v.into()).map_err(|e| fmt_err(path, e.to_string()))
}

pub fn to_json<V: Serialize>(value: &V) -> Result<String> {
    serde_json::to_string_pretty(value).map(|s| s + "\n").map_err(|e| Error::InvalidConfig(e.to_string()))
}

pub fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    write_atomic(path, to_json(value)?.as_bytes())
}

pub fn read_json<V: DeserializeOwned>(path: &Path) -> Result<V> {
    serde_json::from_str(&read_text(path)?).map_err(|e| fmt_err(path, e.to_string()))
}

fn mode_name(mode: BasisMode) -> &'static str {
    match mode {
        BasisMode::Balanced => "balanced",
        BasisMode::Imbalanced => "imbalanced",
    }
}

pub fn frame_dir(root: &Path, id: usize) -> PathBuf {
    root.join("frames").join(format!("{id:03}"))
}

pub fn depth_file(dir: &Path, id: usize) -> PathBuf {
    dir.join(format!("depth_{id:03}.pfm"))
}

pub fn mask_file(dir: &Path, id: usize) -> PathBuf {
    dir.join(format!("mask_{id:03}.pgm"))
}

/// Writes the full scenario layout under `root`.
pub fn save_scenario(root: &Path, scenario: &Scenario) -> Result<()> {
    write_json(&root.join("scene.json"), &scenario.config)?;
    let gt = root.join("gt");
    let poses: Vec<_> = scenario.gt.poses.iter().copied().enumerate().collect();
    write_trajectory(&gt.join("trajectory.txt"), &poses)?;
    for (k, d) in scenario.gt.depths.iter().enumerate() {
        write_depth(&depth_file(&gt, k), d)?;
        write_pgm(&mask_file(&gt, k), &mask_image(d))?;
    }
    write_atomic(&gt.join("landmarks.csv"), format_landmarks(&scenario.gt.landmarks).as_bytes())?;
    let init: Vec<_> = scenario.frames.iter().map(|f| (f.id, f.initial_pose)).collect();
    write_trajectory(&root.join("frames").join("initial_trajectory.txt"), &init)?;
    for f in &scenario.frames {
        let dir = frame_dir(root, f.id);
        write_atomic(&dir.join("sparse.csv"), format_sparse(&f.sparse).as_bytes())?;
        for mode in [BasisMode::Balanced, BasisMode::Imbalanced] {
            let m = f.mode(mode);
            let md = dir.join(mode_name(mode));
            for (k, b) in m.stack.bases().iter().enumerate() {
                write_pfm(&md.join(format!("basis_{k}.pfm")), b)?;
            }
            write_pfm(&md.join("confidence.pfm"), m.confidence.values())?;
            write_atomic(&md.join("initial_weights.csv"), (format_weight_row(&m.initial_weights) + "\n").as_bytes())?;
        }
    }
    Ok(())
}

fn load_mode(dir: &Path, basis_count: usize) -> Result<ModeData> {
    let bases = (0..basis_count)
        .map(|k| read_pfm(&dir.join(format!("basis_{k}.pfm"))))
        .collect::<Result<Vec<_>>>()?;
    let first = dir.join("basis_0.pfm");
    let stack = BasisStack::new(&bases).map_err(|e| fmt_err(&first, e.to_string()))?;
    let cpath = dir.join("confidence.pfm");
    let conf = read_pfm(&cpath)?;
    if conf.width() != stack.width() || conf.height() != stack.height() {
        return Err(fmt_err(&cpath, "confidence size differs from the bases"));
    }
    let confidence = ConfidenceMap::new(conf).map_err(|e| fmt_err(&cpath, e.to_string()))?;
    let wpath = dir.join("initial_weights.csv");
    let initial_weights = read_weight_row(&wpath)?;
    if initial_weights.len() != basis_count {
        return Err(fmt_err(&wpath, format!("{} weights for {basis_count} bases", initial_weights.len())));
    }
    Ok(ModeData { stack: Arc::new(stack), confidence: Arc::new(confidence), initial_weights })
}

fn ordered_poses(path: &Path, n: usize) -> Result<Vec<RigidPose<f64>>> {
    let t = read_trajectory(path)?;
    if t.len() != n || t.iter().enumerate().any(|(k, (id, _))| *id != k) {
        return Err(fmt_err(path, format!("expected keyframe ids 0..{n} in order")));
    }
    Ok(t.into_iter().map(|(_, p)| p).collect())
}

/// Reads a scenario written by [`save_scenario`].
pub fn load_scenario(root: &Path) -> Result<Scenario> {
    let cpath = root.join("scene.json");
    let config: ScenarioConfig = read_json(&cpath)?;
    config.scene.validate().map_err(|e| fmt_err(&cpath, e.to_string()))?;
    config.noise.validate().map_err(|e| fmt_err(&cpath, e.to_string()))?;
    let (n, cam) = (config.scene.num_keyframes, config.scene.camera);
    let gt_dir = root.join("gt");
    let poses = ordered_poses(&gt_dir.join("trajectory.txt"), n)?;
    let mut depths = Vec::with_capacity(n);
    for k in 0..n {
        let (dp, mp) = (depth_file(&gt_dir, k), mask_file(&gt_dir, k));
        let d = read_depth(&dp, mp.exists().then_some(mp.as_path()))?;
        if d.width() != cam.width || d.height() != cam.height {
            return Err(fmt_err(&dp, "depth size differs from the camera"));
        }
        depths.push(d);
    }
    let lpath = gt_dir.join("landmarks.csv");
    let landmarks = read_landmarks(&lpath)?;
    let by_id: BTreeMap<usize, Landmark<f64>> = landmarks.iter().map(|l| (l.id, *l)).collect();
    let init = ordered_poses(&root.join("frames").join("initial_trajectory.txt"), n)?;
    let mut frames = Vec::with_capacity(n);
    for (k, initial_pose) in init.into_iter().enumerate() {
        let dir = frame_dir(root, k);
        let spath = dir.join("sparse.csv");
        let sparse = read_sparse(&spath, cam.width, cam.height)?;
        let mut lms = Vec::new();
        for p in &sparse.points {
            if let Some(id) = p.landmark_id {
                let l = by_id
                    .get(&id)
                    .ok_or_else(|| fmt_err(&spath, format!("landmark {id} missing from {}", lpath.display())))?;
                lms.push(*l);
            }
        }
        frames.push(FrameData {
            id: k,
            camera: cam,
            initial_pose,
            sparse: Arc::new(sparse),
            landmarks: lms,
            balanced: load_mode(&dir.join("balanced"), config.scene.basis_count)?,
            imbalanced: load_mode(&dir.join("imbalanced"), config.scene.basis_count)?,
        });
    }
    let gt = GroundTruth { camera: cam, poses, depths, landmarks, basis_count: config.scene.basis_count };
    Ok(Scenario { config, gt, frames })
}

/// Name of the trace file of the `index`-th solve.
pub fn trace_file(dir: &Path, index: usize, stage: &str, trigger: usize) -> PathBuf {
    dir.join("traces").join(format!("{index:03}_{stage}_kf{trigger:03}.csv"))
}

/// Writes every output of a run under `dir`.
pub fn save_run(dir: &Path, record: &RunRecord<f64>, metrics: &MetricsReport) -> Result<()> {
    write_json(&dir.join("metrics.json"), metrics)?;
    write_trajectory(&dir.join("trajectory.txt"), &record.poses())?;
    let before: Vec<_> = record.keyframes.iter().zip(&record.pre_gba_poses).map(|(k, p)| (k.id, *p)).collect();
    write_trajectory(&dir.join("trajectory_before_gba.txt"), &before)?;
    let mut weights = String::from("id,weights\n");
    for k in &record.keyframes {
        let _ = writeln!(weights, "{},{}", k.id, format_weight_row(&k.weights));
    }
    write_atomic(&dir.join("weights.csv"), weights.as_bytes())?;
    for (k, d) in record.keyframes.iter().zip(&record.depths) {
        write_depth(&depth_file(dir, k.id), d)?;
    }
    for (i, r) in record.reports.iter().enumerate() {
        write_atomic(&trace_file(dir, i, r.stage.name(), r.trigger), format_trace(&r.report.trace).as_bytes())?;
    }
    Ok(())
}

/// Depths and poses of a run output or a scenario (its `gt/` is used when
/// present), keyed by keyframe id.
#[derive(Debug, Clone)]
pub struct DepthSet {
    pub depths: BTreeMap<usize, DepthMap<f64>>,
    pub poses: BTreeMap<usize, RigidPose<f64>>,
}

pub fn load_depth_set(dir: &Path) -> Result<DepthSet> {
    let dir = if dir.join("gt").is_dir() { dir.join("gt") } else { dir.to_path_buf() };
    let tpath = dir.join("trajectory.txt");
    let poses: BTreeMap<_, _> = read_trajectory(&tpath)?.into_iter().collect();
    let mut depths = BTreeMap::new();
    let entries = fs::read_dir(&dir).map_err(|e| io_err(&dir, e))?;
    let mut ids = Vec::new();
    for e in entries {
        let name = e.map_err(|e| io_err(&dir, e))?.file_name();
        let name = name.to_string_lossy();
        if let Some(id) = name.strip_prefix("depth_").and_then(|s| s.strip_suffix(".pfm")) {
            if let Ok(id) = id.parse::<usize>() {
                ids.push(id);
            }
        }
    }
    ids.sort_unstable();
    for id in ids {
        let m = mask_file(&dir, id);
        depths.insert(id, read_depth(&depth_file(&dir, id), m.exists().then_some(m.as_path()))?);
    }
    Ok(DepthSet { depths, poses })
}
