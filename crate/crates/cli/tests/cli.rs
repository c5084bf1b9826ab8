use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn hipad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hipad")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> serde_json::Value {
    let out = hipad(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("json report")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Overrides that shrink the model and schedule so a run takes seconds.
const TINY: &[&str] = &[
    "--set",
    "model.channels=8",
    "--set",
    "model.layers=2",
    "--set",
    "model.modalities=3",
    "--set",
    "model.ffn_hidden=16",
    "--set",
    "model.tau_hidden=8",
    "--set",
    "model.samples_per_ref=2",
    "--set",
    "model.ref_heights=[0.0, 1.0]",
    "--set",
    "scene.max_frames_per_scenario=1",
    "--set",
    "training.phase1_epochs=1",
    "--set",
    "training.phase2_epochs=1",
];

fn gen(dir: &Path, count: usize, seed: u64) -> PathBuf {
    let out = dir.join(format!("scn_{count}_{seed}"));
    ok(&["gen-scenarios", "--count", &count.to_string(), "--seed", &seed.to_string(), "--out", p(&out)]);
    out
}

#[test]
fn gen_scenarios_writes_files_and_manifest() {
    let tmp = TempDir::new().unwrap();
    let dir = gen(tmp.path(), 12, 3);
    let jsons = fs::read_dir(&dir).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "json")).count();
    assert_eq!(jsons, 12);
    let manifest = fs::read_to_string(dir.join("manifest.csv")).unwrap();
    let lines: Vec<&str> = manifest.lines().collect();
    assert_eq!(lines.len(), 13);
    let mut families: Vec<&str> = lines[1..].iter().map(|l| l.split(',').nth(2).unwrap()).collect();
    families.sort();
    families.dedup();
    assert_eq!(families.len(), 6);
}

#[test]
fn same_seed_gives_byte_identical_files() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        ok(&["gen-scenarios", "--count", "6", "--seed", "9", "--out", p(d)]);
    }
    for e in fs::read_dir(&a).unwrap() {
        let name = e.unwrap().file_name();
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
}

#[test]
fn flags_override_the_config_file() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "seed = 1\n[training]\nlr = 0.01\n").unwrap();
    let a = ok(&["gen-scenarios", "--count", "2", "--config", p(&cfg), "--seed", "5", "--out", p(&tmp.path().join("a"))]);
    fs::write(&cfg, "seed = 5\n[training]\nlr = 0.01\n").unwrap();
    let b = ok(&["gen-scenarios", "--count", "2", "--config", p(&cfg), "--out", p(&tmp.path().join("b"))]);
    assert_eq!(a["config_hash"], b["config_hash"]);
    let c = ok(&["gen-scenarios", "--count", "2", "--config", p(&cfg), "--set", "training.lr=0.02", "--out", p(&tmp.path().join("c"))]);
    assert_ne!(a["config_hash"], c["config_hash"]);
}

#[test]
fn config_errors_exit_with_2() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[model]\nchanels = 3\n").unwrap();
    let out = hipad(&["gen-scenarios", "--count", "1", "--config", p(&cfg), "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    let out = hipad(&["gen-scenarios", "--count", "1", "--set", "model.channels=0", "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_data_exits_with_3() {
    let tmp = TempDir::new().unwrap();
    let out = hipad(&["train", "--scenarios", p(&tmp.path().join("nope")), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn divergence_exits_with_4() {
    let tmp = TempDir::new().unwrap();
    let scn = gen(tmp.path(), 1, 0);
    let mut args = vec!["train", "--scenarios", p(&scn), "--out"];
    let out_dir = tmp.path().join("run");
    args.push(p(&out_dir));
    args.extend_from_slice(TINY);
    args.extend_from_slice(&["--set", "training.divergence_loss=1e-9"]);
    assert_eq!(hipad(&args).status.code(), Some(4));
}

#[test]
fn train_eval_and_plot_pipeline() {
    let tmp = TempDir::new().unwrap();
    let scn = gen(tmp.path(), 2, 1);
    let run = tmp.path().join("run");
    let mut args = vec!["train", "--scenarios", p(&scn), "--out", p(&run)];
    args.extend_from_slice(TINY);
    let trained = ok(&args);
    let hash = trained["config_hash"].as_str().unwrap().to_string();
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(metrics.lines().skip(1).all(|l| l.ends_with(&hash)));

    let ckpt = run.join("checkpoint.bin");
    let open = ok(&["eval-open", "--checkpoint", p(&ckpt), "--scenarios", p(&scn)]);
    let a = open["open_loop_l2"].as_f64().unwrap();
    let b = trained["open_loop_l2"].as_f64().unwrap();
    assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    assert_eq!(open["config_hash"], hash.as_str());

    let closed = tmp.path().join("closed");
    let report = ok(&[
        "eval-closed",
        "--checkpoint",
        p(&ckpt),
        "--scenarios",
        p(&scn),
        "--out",
        p(&closed),
        "--set",
        "sim.time_budget_s=2.0",
    ]);
    assert_eq!(report["summary"]["episodes"], 2);
    let episodes = fs::read_to_string(closed.join("episodes.csv")).unwrap();
    let lines: Vec<&str> = episodes.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].ends_with("config_hash"));
    assert_eq!(fs::read_dir(closed.join("traces")).unwrap().count(), 2);
    let bad = hipad(&[
        "eval-closed",
        "--checkpoint",
        p(&ckpt),
        "--scenarios",
        p(&scn),
        "--out",
        p(&closed),
        "--set",
        "model.channels=16",
    ]);
    assert_eq!(bad.status.code(), Some(2));

    let svg_path = tmp.path().join("frame.svg");
    ok(&[
        "plot",
        "--scenario",
        p(&scn.join("scenario_0000.json")),
        "--checkpoint",
        p(&ckpt),
        "--out",
        p(&svg_path),
    ]);
    let svg = fs::read_to_string(&svg_path).unwrap();
    assert!(svg.contains(&hash));
    assert!(svg.contains(r#"fill="skyblue""#));
    let legend = &svg[svg.find(r#"<g class="legend">"#).unwrap()..];
    assert!(legend.contains("spatial waypoints") && legend.contains("driving-style waypoints"));
    let spatial = legend.find("spatial waypoints").unwrap();
    assert!(legend[..spatial].rfind("skyblue").is_some());
}

#[test]
fn expert_policy_drives_without_a_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let scn = gen(tmp.path(), 3, 2);
    let out = tmp.path().join("closed");
    let r = ok(&["eval-closed", "--policy", "expert", "--scenarios", p(&scn), "--out", p(&out)]);
    assert_eq!(r["summary"]["success_rate"], 1.0);
    assert_eq!(fs::read_to_string(out.join("episodes.csv")).unwrap().lines().count(), 4);
}

fn straight_fixture(dir: &Path) -> PathBuf {
    let path = dir.join("straight.csv");
    let mut s = String::from("t,x,y\n");
    for k in 0..=10 {
        s.push_str(&format!("{},{},0\n", k as f64 * 0.5, k as f64));
    }
    fs::write(&path, s).unwrap();
    path
}

fn rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn resample_straight_line_every_two_meters() {
    let tmp = TempDir::new().unwrap();
    let input = straight_fixture(tmp.path());
    let out = tmp.path().join("w.csv");
    ok(&["resample", "--input", p(&input), "--spec", "spatial:2", "--output", p(&out)]);
    let r = rows(&fs::read_to_string(&out).unwrap());
    assert_eq!(r.len(), 5);
    for (k, row) in r.iter().enumerate() {
        assert_eq!(row[0], "spatial_2m");
        assert!((row[2].parse::<f64>().unwrap() - 2.0 * (k + 1) as f64).abs() < 1e-9);
        assert_eq!(row[4], "0");
    }
}

#[test]
fn resampled_output_round_trips() {
    let tmp = TempDir::new().unwrap();
    let input = straight_fixture(tmp.path());
    for spec in ["spatial:2", "spatial:3:4", "temporal:2", "temporal:5"] {
        let once = tmp.path().join("once.csv");
        let twice = tmp.path().join("twice.csv");
        ok(&["resample", "--input", p(&input), "--spec", spec, "--output", p(&once)]);
        ok(&["resample", "--input", p(&once), "--spec", spec, "--output", p(&twice)]);
        let (a, b) = (rows(&fs::read_to_string(&once).unwrap()), rows(&fs::read_to_string(&twice).unwrap()));
        assert_eq!(a.len(), b.len(), "{spec}");
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x[0], y[0]);
            for c in [2, 3] {
                let (u, v): (f64, f64) = (x[c].parse().unwrap(), y[c].parse().unwrap());
                assert!((u - v).abs() < 1e-9, "{spec}: {u} vs {v}");
            }
        }
    }
}

#[test]
fn malformed_trajectory_reports_the_line() {
    let tmp = TempDir::new().unwrap();
    let input = tmp.path().join("bad.csv");
    fs::write(&input, "t,x,y\n0,0,0\n0.5,abc,0\n").unwrap();
    let out = hipad(&["resample", "--input", p(&input), "--spec", "spatial:2"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}
