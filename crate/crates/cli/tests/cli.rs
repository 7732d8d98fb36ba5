use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn mvlap(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mvlap"));
    cmd.args(args).env_remove("MVLAP_THREADS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("config.toml");
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

const STILL: &str = r#"
kind = "simulate"
[sim]
particles = 3
horizon = 1.0
steps = 5
initial = { mode = "constant", value = [1.5] }
[model]
family = "zero_drift"
sigma0 = 0.0
"#;

const LAPLACE_ZERO: &str = r#"
kind = "laplace_estimate"
[sim]
particles = 4
horizon = 1.0
steps = 4
initial = { mode = "constant", value = [0.0] }
seed = 5
[model]
family = "mean_field_ou"
[functional]
kind = "zero"
[options]
reps = 50
"#;

#[test]
fn simulate_still_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), STILL);
    let out = tmp.path().join("run");
    let o = mvlap(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--dump-paths"], &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("paths.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3 * 6);
    assert!(rows.iter().all(|r| r.ends_with(",1.5")));
    assert!(out.join("paths.bin").exists());
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert!(manifest["module_versions"].is_object());
    let results = read_json(&out.join("results.json"));
    assert_eq!(results["kind"], "simulate");
    assert!(results.get("wall_time_seconds").is_none());
}

#[test]
fn laplace_zero_and_verify_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), LAPLACE_ZERO);
    let out = tmp.path().join("run");
    let out_s = out.to_str().unwrap();
    let o = mvlap(&["run", "--config", &cfg, "--out", out_s, "--threads", "1"], &[]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(read_json(&out.join("results.json"))["estimate"]["value"], 0.0);

    let v = mvlap(&["verify", out_s], &[("MVLAP_THREADS", "3")]);
    assert_eq!(v.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&v.stdout).starts_with("match"));
}

#[test]
fn edited_seed_is_detected() {
    let tmp = tempfile::tempdir().unwrap();
    let body = LAPLACE_ZERO.replace("kind = \"zero\"", "kind = \"terminal_linear\"\nc = [1.0]\nclip = 4.0");
    let cfg = write_config(tmp.path(), &body);
    let out = tmp.path().join("run");
    let out_s = out.to_str().unwrap();
    assert_eq!(mvlap(&["run", "--config", &cfg, "--out", out_s, "--seed", "8"], &[]).status.code(), Some(0));
    let mpath = out.join("manifest.json");
    let mut manifest = read_json(&mpath);
    assert_eq!(manifest["seed"], 8);
    manifest["seed"] = 9.into();
    fs::write(&mpath, manifest.to_string()).unwrap();
    let v = mvlap(&["verify", out_s], &[]);
    assert_eq!(v.status.code(), Some(1));
    let text = String::from_utf8_lossy(&v.stdout);
    assert!(text.contains("/estimate/value"), "{text}");
    assert!(text.contains("/seed"), "{text}");
}

#[test]
fn config_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &LAPLACE_ZERO.replace("reps = 50", "bogus = 1"));
    let out = tmp.path().join("run");
    let o = mvlap(&["run", "--config", &cfg, "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(read_json(&out.join("error.json"))["exit_code"], 2);

    let cfg = write_config(tmp.path(), &LAPLACE_ZERO.replace("mean_field_ou", "no_such_family"));
    let o = mvlap(&["run", "--config", &cfg, "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn blow_up_exits_three_and_keeps_partial_results() {
    let tmp = tempfile::tempdir().unwrap();
    let body = STILL
        .replace("family = \"zero_drift\"\nsigma0 = 0.0", "family = \"curie_weiss\"\nbeta = 50.0\nsigma0 = 0.0")
        .replace("value = [1.5]", "value = [10.0]");
    let cfg = write_config(tmp.path(), &body);
    let out = tmp.path().join("run");
    let o = mvlap(&["run", "--config", &cfg, "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(3));
    let results = read_json(&out.join("results.json"));
    assert!(results["blow_up"].as_u64().is_some());
    assert!(out.join("error.json").exists());
}

#[test]
fn failed_suite_exits_four() {
    let tmp = tempfile::tempdir().unwrap();
    let body = r#"
kind = "martingale_suite"
[sim]
particles = 200
horizon = 1.0
steps = 16
initial = { mode = "constant", value = [0.5] }
[model]
family = "mean_field_ou"
[options]
z_threshold = 0.0
"#;
    let cfg = write_config(tmp.path(), body);
    let out = tmp.path().join("run");
    let o = mvlap(&["run", "--config", &cfg, "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(read_json(&out.join("results.json"))["all_within"], false);
}

#[test]
fn large_naive_laplace_warns() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &LAPLACE_ZERO.replace("particles = 4", "particles = 30"));
    let out = tmp.path().join("run");
    let o = mvlap(&["run", "--config", &cfg, "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stderr).contains("N = 30 > 20"));
}

#[test]
fn sample_configs_run() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let tmp = tempfile::tempdir().unwrap();
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("toml") {
            continue;
        }
        let out = tmp.path().join(path.file_stem().unwrap());
        let o = mvlap(&["run", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
        assert_eq!(o.status.code(), Some(0), "{}: {}", path.display(), String::from_utf8_lossy(&o.stderr));
        assert!(out.join("results.json").exists());
        seen += 1;
    }
    assert!(seen >= 4);
}
