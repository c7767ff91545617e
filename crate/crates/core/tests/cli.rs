use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use basis_slam::io::{decode_pfm, encode_pfm, read_pfm};
use basis_slam::simulator::{NoiseModel, ScenarioConfig, SceneConfig};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_basis-slam"))
}

fn exec(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_config(dir: &Path, seed: u64) -> PathBuf {
    let mut scene = SceneConfig::standard(seed);
    scene.num_keyframes = 5;
    let p = dir.join("config.json");
    fs::write(&p, serde_json::to_string(&ScenarioConfig { scene, noise: NoiseModel::default() }).unwrap()).unwrap();
    p
}

fn simulated(seed: u64) -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), seed);
    let sc = dir.path().join("scenario");
    let o = exec(bin().args(["simulate", "--config"]).arg(&cfg).arg("--out").arg(&sc));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    (dir, sc)
}

fn run(sc: &Path, out: &Path, extra: &[&str]) -> Output {
    exec(bin().args(["run", "--scenario"]).arg(sc).arg("--out").arg(out).args(extra))
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn simulate_is_idempotent_for_equal_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 1);
    for out in ["a", "b"] {
        let o = exec(bin().args(["simulate", "--config"]).arg(&cfg).args(["--seed", "9", "--out"]).arg(dir.path().join(out)));
        assert!(o.status.success());
    }
    let (a, b) = (tree(&dir.path().join("a")), tree(&dir.path().join("b")));
    assert!(!a.is_empty());
    assert_eq!(a, b);
    let scene: ScenarioConfig = serde_json::from_slice(&fs::read(dir.path().join("a/scene.json")).unwrap()).unwrap();
    assert_eq!(scene.scene.seed, 9);
}

#[test]
fn missing_config_is_a_usage_error() {
    let o = exec(bin().args(["simulate", "--out", "/tmp/never-written"]));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
    let o = exec(bin().args(["simulate", "--config", "/nonexistent/cfg.json", "--out", "/tmp/never-written"]));
    assert_eq!(o.status.code(), Some(2));
    assert!(exec(bin().arg("frobnicate")).status.code() == Some(2));
}

#[test]
fn invalid_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut scene = SceneConfig::standard(1);
    scene.num_keyframes = 1;
    let p = dir.path().join("bad.json");
    fs::write(&p, serde_json::to_string(&ScenarioConfig { scene, noise: NoiseModel::default() }).unwrap()).unwrap();
    let o = exec(bin().args(["simulate", "--config"]).arg(&p).arg("--out").arg(dir.path().join("x")));
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    fs::write(&p, "{ not json").unwrap();
    let o = exec(bin().args(["simulate", "--config"]).arg(&p).arg("--out").arg(dir.path().join("x")));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn generated_pfm_round_trips_bit_exactly() {
    let (_d, sc) = simulated(2);
    for f in ["gt/depth_000.pfm", "frames/003/balanced/basis_1.pfm", "frames/001/imbalanced/confidence.pfm"] {
        let bytes = fs::read(sc.join(f)).unwrap();
        let m = decode_pfm(&bytes, Path::new(f)).unwrap();
        assert_eq!(encode_pfm(&m), bytes);
        let wide = read_pfm(&sc.join(f)).unwrap();
        assert!(wide.as_slice().iter().zip(m.as_slice()).all(|(a, b)| a.to_bits() == f64::from(*b).to_bits()));
    }
}

#[test]
fn empty_ablation_runs_baseline() {
    let (d, sc) = simulated(3);
    let out = d.path().join("out");
    let o = run(&sc, &out, &["--ablation", ""]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_slice(&fs::read(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["ablation"], "");
    assert!(m["aggregate"]["rmse"].as_f64().unwrap() > 0.0);
    assert_eq!(m["per_frame"].as_array().unwrap().len(), 5);
    for k in 0..5 {
        assert!(out.join(format!("depth_{k:03}.pfm")).exists());
    }
    assert!(out.join("trajectory.txt").exists());
    let traces: Vec<_> = fs::read_dir(out.join("traces")).unwrap().collect();
    assert!(!traces.is_empty());
}

#[test]
fn unknown_ablation_token_exits_2() {
    let (d, sc) = simulated(4);
    let o = run(&sc, &d.path().join("out"), &["--ablation", "b,x"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!d.path().join("out").exists());
    let o = run(&sc, &d.path().join("out"), &["--mode", "slam"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn malformed_scenario_names_the_file() {
    let (d, sc) = simulated(5);
    fs::write(sc.join("frames/002/sparse.csv"), "u,v,depth,landmark_id\n1,2,oops,3\n").unwrap();
    let o = run(&sc, &d.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("frames/002/sparse.csv"), "{}", stderr(&o));
    fs::remove_file(sc.join("gt/landmarks.csv")).unwrap();
    let o = run(&sc, &d.path().join("out"), &[]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("landmarks.csv"));
}

#[test]
fn eval_of_gt_against_itself_is_perfect() {
    let (_d, sc) = simulated(6);
    let o = exec(bin().args(["eval", "--pred"]).arg(&sc).arg("--gt").arg(&sc));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["aggregate"]["rmse"].as_f64(), Some(0.0));
    assert_eq!(r["aggregate"]["delta1"].as_f64(), Some(100.0));
    assert!(r["aggregate"]["ape"].as_f64().unwrap() < 1e-12);
    for align in ["se3", "none"] {
        let o = exec(bin().args(["eval", "--align", align, "--pred"]).arg(&sc).arg("--gt").arg(&sc));
        let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        assert!(r["aggregate"]["ape"].as_f64().unwrap() < 1e-12);
    }
}

#[test]
fn eval_lists_missing_ids() {
    let (d, sc) = simulated(7);
    let out = d.path().join("out");
    assert!(run(&sc, &out, &[]).status.success());
    let o = exec(bin().args(["eval", "--pred"]).arg(&out).arg("--gt").arg(&sc));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let m: serde_json::Value = serde_json::from_slice(&fs::read(out.join("metrics.json")).unwrap()).unwrap();
    // PFM stores f32, so the file-based numbers differ from the in-memory ones only by rounding
    let (a, b) = (r["aggregate"]["rmse"].as_f64().unwrap(), m["aggregate"]["rmse"].as_f64().unwrap());
    assert!((a - b).abs() < 1e-5 * b);
    fs::remove_file(out.join("depth_001.pfm")).unwrap();
    fs::remove_file(out.join("depth_003.pfm")).unwrap();
    let o = exec(bin().args(["eval", "--pred"]).arg(&out).arg("--gt").arg(&sc));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing from predicted depths: 1, 3"), "{}", stderr(&o));
}

#[test]
fn report_rows_match_across_formats() {
    let (d, sc) = simulated(8);
    let mut dirs = Vec::new();
    for (i, ab) in ["", "b", "b,c", "b,c,full", "b,c,full,m"].iter().enumerate() {
        let out = d.path().join(format!("cell{i}"));
        let o = run(&sc, &out, &["--ablation", ab]);
        assert!(o.status.success(), "{}", stderr(&o));
        dirs.push(out);
    }
    let rep = |fmt: &str| {
        let o = exec(bin().args(["report", "--format", fmt, "--in"]).args(&dirs));
        assert!(o.status.success(), "{}", stderr(&o));
        String::from_utf8(o.stdout).unwrap()
    };
    let json: Vec<serde_json::Value> = serde_json::from_str(&rep("json")).unwrap();
    let csv = rep("csv");
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("scenario,mode,cell,D,T,delta1"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!((rows.len(), json.len()), (5, 5));
    let cells: Vec<&str> = json.iter().map(|r| r["cell"].as_str().unwrap()).collect();
    assert_eq!(cells, ["baseline", "+B", "+(B,C)", "+full", "+(full,M)"]);
    for (row, j) in rows.iter().zip(&json) {
        let tail: Vec<f64> = row.rsplitn(4, ',').take(3).map(|s| s.parse().unwrap()).collect();
        assert_eq!(tail[0], j["delta1"].as_f64().unwrap());
        assert_eq!(tail[1], j["T"].as_f64().unwrap());
        assert_eq!(tail[2], j["D"].as_f64().unwrap());
    }
    assert!(rows[2].contains("\"+(B,C)\""));
}

#[test]
fn jacobian_check_passes() {
    let o = exec(bin().args(["jacobian-check", "--configs", "20"]));
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    for f in ["sparse_depth", "relative_depth", "prior_weight"] {
        assert!(text.lines().any(|l| l.starts_with(f) && l.ends_with("ok")), "{text}");
    }
    let o = exec(bin().args(["jacobian-check", "--tolerance", "1e-30", "--configs", "5"]));
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn thread_count_does_not_change_outputs() {
    let (d, sc) = simulated(9);
    let (a, b) = (d.path().join("t1"), d.path().join("t3"));
    assert!(run(&sc, &a, &["--threads", "1", "--mode", "orb"]).status.success());
    assert!(run(&sc, &b, &["--threads", "3", "--mode", "orb"]).status.success());
    assert_eq!(tree(&a), tree(&b));
    assert_eq!(run(&sc, &a, &["--threads", "0"]).status.code(), Some(2));
}

#[test]
fn help_exits_zero() {
    let o = exec(bin().arg("--help"));
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    for c in ["simulate", "run", "eval", "report", "jacobian-check"] {
        assert!(text.contains(c));
    }
}
