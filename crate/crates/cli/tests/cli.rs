use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lidarsim_core::geometry::Vec3;
use lidarsim_core::io::{self, GridFile, SweepFile};
use lidarsim_core::map_builder::PointSample;
use lidarsim_core::metrics::random_raydrop;
use lidarsim_core::object_bank::BoxLabel;
use lidarsim_core::par::Exec;
use lidarsim_core::raydrop::RaydropModel;
use lidarsim_core::geometry::Pose;
use tempfile::TempDir;

fn lidarsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lidarsim")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = lidarsim(args);
    assert!(
        out.status.success(),
        "lidarsim {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn files(dir: &Path, prefix: &str, ext: &str) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|f| {
            let name = f.file_name().unwrap().to_string_lossy().into_owned();
            name.starts_with(prefix) && name.ends_with(ext)
        })
        .collect();
    v.sort();
    v
}

fn street(tmp: &TempDir, surfels: usize) -> PathBuf {
    let dir = tmp.path().join("street");
    ok(&["synth", "street", "--out", p(&dir), "--surfels", &surfels.to_string()]);
    dir
}

#[test]
fn build_map_round_trips_and_reports_errors() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("planes");
    ok(&["synth", "planes", "--out", p(&dir), "--count", "3"]);
    let sweeps = files(&dir, "plane_", ".lswp");
    assert_eq!(sweeps.len(), 3);
    let map = tmp.path().join("map.lsrf");
    let mut args = vec!["build-map", "--out", p(&map)];
    args.extend(sweeps.iter().map(|s| p(s)));
    let out = ok(&args);
    assert!(String::from_utf8_lossy(&out.stdout).contains("degenerate"));

    let bytes = fs::read(&map).unwrap();
    let surfels = io::load_surfels(&map).unwrap();
    assert!(surfels.len() > 1000);
    let copy = tmp.path().join("copy.lsrf");
    io::save_surfels(&copy, &surfels).unwrap();
    assert_eq!(bytes, fs::read(&copy).unwrap());

    assert_eq!(lidarsim(&["build-map", "--out", p(&map)]).status.code(), Some(2));

    let bad = tmp.path().join("bad.lswp");
    let mut raw = fs::read(&sweeps[0]).unwrap();
    raw[..4].copy_from_slice(b"NOPE");
    fs::write(&bad, raw).unwrap();
    let out = lidarsim(&["build-map", "--out", p(&map), p(&bad)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad magic"));
}

#[test]
fn build_object_variants() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("obj");
    ok(&["synth", "object", "--out", p(&dir)]);
    let sweeps = files(&dir, "object_", ".lswp");
    assert_eq!(sweeps.len(), 5);
    let bank = tmp.path().join("bank");
    let labels = dir.join("labels.json");
    let mut args = vec!["build-object", "--labels", p(&labels), "--bank", p(&bank), "--id", "box"];
    args.extend(sweeps.iter().map(|s| p(s)));
    ok(&args);
    let loaded = io::load_bank(&bank).unwrap();
    let asset = loaded.get("box").unwrap();
    let bb = lidarsim_core::geometry::Aabb::from_points(asset.surfels.iter().map(|s| &s.center));
    for (a, truth) in lidarsim_core::synth::CAR_DIMS.iter().enumerate() {
        assert!((bb.extent()[a] - truth).abs() / truth < 0.1);
    }

    // One sweep: nothing to align against.
    let all: Vec<BoxLabel> = io::load_json(&labels).unwrap();
    let one = tmp.path().join("one.json");
    io::save_json(&one, &all[2..3]).unwrap();
    let out = ok(&["build-object", "--labels", p(&one), "--bank", p(&bank), "--id", "single", p(&sweeps[2])]);
    assert!(!String::from_utf8_lossy(&out.stdout).contains("icp"));
    assert_eq!(io::load_bank(&bank).unwrap().len(), 2);

    // Ten points in the box are below the quality floor.
    let sparse = SweepFile {
        pose: Pose::identity(),
        sweep_start: 0.0,
        points: (0..10)
            .map(|i| PointSample::at(Vec3::new(0.1 * i as f64, 0.0, 0.0)))
            .collect(),
    };
    let sparse_path = tmp.path().join("sparse.lswp");
    io::save_sweep(&sparse_path, &sparse).unwrap();
    let label = vec![BoxLabel {
        center: [0.5, 0.0, 0.0],
        heading: 0.0,
        dims: [2.0, 1.0, 1.0],
        timestamp: 0.0,
    }];
    let label_path = tmp.path().join("sparse.json");
    io::save_json(&label_path, &label).unwrap();
    let out = lidarsim(&["build-object", "--labels", p(&label_path), "--bank", p(&bank), "--id", "tiny", p(&sparse_path)]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn simulate_is_deterministic_and_counts_match() {
    let tmp = TempDir::new().unwrap();
    let dir = street(&tmp, 60_000);
    let scenario = dir.join("scenario.json");
    let bank = dir.join("bank");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["simulate", p(&scenario), "--bank", p(&bank), "--out", p(&a)]);
    ok(&["--threads", "2", "simulate", p(&scenario), "--bank", p(&bank), "--out", p(&b)]);
    for ext in [".grid.lgrd", ".mask.lgrd", ".lswp", ".ply"] {
        let fa = fs::read(format!("{}{ext}", a.display())).unwrap();
        let fb = fs::read(format!("{}{ext}", b.display())).unwrap();
        assert!(fa == fb, "{ext} differs between runs");
    }
    let grid = io::load_grid(Path::new(&format!("{}.grid.lgrd", a.display()))).unwrap().into_features().unwrap();
    let sweep = io::load_sweep(Path::new(&format!("{}.lswp", a.display()))).unwrap();
    let occupied = grid.occupancy().count();
    assert!(occupied > 100_000, "{occupied}");
    assert_eq!(sweep.points.len(), occupied);

    let model = tmp.path().join("const.model");
    io::save_model(&model, &RaydropModel::constant(0.9)).unwrap();
    let c = tmp.path().join("c");
    ok(&["simulate", p(&scenario), "--bank", p(&bank), "--model", p(&model), "--out", p(&c)]);
    let kept = io::load_sweep(Path::new(&format!("{}.lswp", c.display()))).unwrap().points.len();
    let ratio = kept as f64 / occupied as f64;
    assert!((0.89..=0.91).contains(&ratio), "{ratio}");
    assert!(Path::new(&format!("{}.prob.lgrd", c.display())).exists());

    let text = fs::read_to_string(&scenario).unwrap().replace("car_0", "no_such_car");
    let broken = dir.join("broken.json");
    fs::write(&broken, text).unwrap();
    let out = lidarsim(&["simulate", p(&broken), "--bank", p(&bank), "--out", p(&c)]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn train_raydrop_writes_model_and_log() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("rd");
    ok(&["synth", "raydrop", "--out", p(&dir), "--surfels", "40000", "--count", "2"]);
    let sims = files(&dir, "sim_", ".lgrd");
    let reals = files(&dir, "real_", ".lswp");
    assert_eq!((sims.len(), reals.len()), (2, 2));
    let cfg = tmp.path().join("train.json");
    fs::write(&cfg, r#"{"epochs": 3, "window": 0, "batch_cells": 2048}"#).unwrap();
    let model = tmp.path().join("m.model");
    let log = tmp.path().join("loss.csv");
    let mut args = vec!["--seed", "4", "train-raydrop", "--config", p(&cfg), "--out", p(&model), "--loss-log", p(&log)];
    for (s, r) in sims.iter().zip(&reals) {
        args.extend(["--sim", p(s), "--real", p(r)]);
    }
    ok(&args);
    let csv = fs::read_to_string(&log).unwrap();
    let rows: Vec<(usize, f64)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let (e, v) = l.split_once(',').unwrap();
            (e.parse().unwrap(), v.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.windows(2).all(|w| w[1].0 == w[0].0 + 1));
    assert!(rows.iter().all(|r| r.1.is_finite()));
    assert!(rows[3].1 < rows[0].1);

    let bytes = fs::read(&model).unwrap();
    let loaded = io::load_model(&model).unwrap();
    let again = tmp.path().join("again.model");
    io::save_model(&again, &loaded).unwrap();
    assert_eq!(bytes, fs::read(&again).unwrap());

    let retrain = tmp.path().join("m2.model");
    let idx = args.iter().position(|a| *a == p(&model)).unwrap();
    args[idx] = p(&retrain);
    ok(&args);
    assert_eq!(bytes, fs::read(&retrain).unwrap());

    assert_eq!(lidarsim(&["train-raydrop", "--out", p(&model)]).status.code(), Some(2));
}

#[test]
fn eval_reports() {
    let tmp = TempDir::new().unwrap();
    let dir = street(&tmp, 30_000);
    let run = tmp.path().join("run");
    ok(&["simulate", p(&dir.join("scenario.json")), "--bank", p(&dir.join("bank")), "--out", p(&run)]);
    let sweep = format!("{}.lswp", run.display());
    let mask_path = format!("{}.mask.lgrd", run.display());
    let report = tmp.path().join("self.json");
    ok(&["eval", "--sim", &sweep, "--real", &sweep, "--report", p(&report)]);
    let v: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(v["occupancy"]["iou"], 1.0);
    assert_eq!(v["point_count_ratio"], 1.0);
    for key in ["sim_points", "real_points", "point_count_ratio", "occupancy"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    for key in ["precision", "recall", "iou"] {
        assert!(v["occupancy"][key].is_f64());
    }
    assert!(v.get("detection_agreement").is_none());

    let mask = io::load_grid(Path::new(&mask_path)).unwrap().into_mask().unwrap();
    let dropped = random_raydrop(&mask, 0.1, 9, Exec::Parallel).unwrap();
    let dropped_path = tmp.path().join("dropped.lgrd");
    io::save_grid(&dropped_path, &GridFile::from_mask(&dropped)).unwrap();
    let sets = tmp.path().join("sets.json");
    fs::write(&sets, r#"{"r_plus":["a","b"],"r_minus":["c"],"s_plus":["a"],"s_minus":["b","c"]}"#).unwrap();
    let report2 = tmp.path().join("drop.json");
    ok(&["eval", "--sim", &mask_path, "--real", p(&dropped_path), "--agreement", p(&sets), "--report", p(&report2)]);
    let v: serde_json::Value = serde_json::from_slice(&fs::read(&report2).unwrap()).unwrap();
    let ratio = v["point_count_ratio"].as_f64().unwrap();
    assert!((ratio - 0.9).abs() < 0.01, "{ratio}");
    assert_eq!(v["occupancy"]["precision"].as_f64().unwrap(), ratio);
    assert!((v["detection_agreement"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-15);
}
