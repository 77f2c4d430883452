use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use phri_core::simulator::{SimLog, ScenarioConfig};

fn repo_file(rel: &str) -> PathBuf {
    [env!("CARGO_MANIFEST_DIR"), "..", "..", rel].iter().collect()
}

fn phri(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phri")).args(args).output().expect("spawn phri")
}

fn write_config(dir: &Path, name: &str, edit: impl FnOnce(&mut serde_json::Value)) -> PathBuf {
    let text = std::fs::read_to_string(repo_file("configs/frictionless.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    edit(&mut v);
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_writes_three_files() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("f0");
    let o = phri(&["run", "--config", repo_file("configs/frictionless.json").to_str().unwrap(), "--out", out.to_str().unwrap(), "--duration", "0.2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["log.csv", "metrics.json", "meta.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let records = SimLog::read_csv(std::fs::File::open(out.join("log.csv")).unwrap(), 7).unwrap();
    assert_eq!(records.len(), 200);
}

#[test]
fn flags_override_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let cfg = repo_file("configs/frictionless.json");
    let o = phri(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "99", "--dt", "0.0005", "--duration", "0.01"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 99);
    assert_eq!(meta["dt"], 0.0005);
    assert_eq!(meta["steps"], 20);
}

#[test]
fn unknown_field_exits_1_and_names_it() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.json", |v| {
        v["controller"]["smc"]["gain_typo"] = 1.0.into();
    });
    let o = phri(&["run", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("gain_typo"), "{}", stderr(&o));
}

#[test]
fn wrong_type_exits_1_with_field_path_and_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.json", |v| {
        v["env"]["k_e"] = "stiff".into();
    });
    let o = phri(&["run", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("env.k_e") && err.contains("line"), "{err}");
}

#[test]
fn malformed_json_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("broken.json");
    std::fs::write(&cfg, "{\"name\": \"x\", \"seed\": 1,").unwrap();
    let o = phri(&["run", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line"), "{}", stderr(&o));
}

#[test]
fn invalid_values_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "neg.json", |v| {
        v["dt"] = (-1.0).into();
    });
    let o = phri(&["run", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn singular_posture_exits_2_with_abort_record() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "sing.json", |v| {
        v["initial"] = serde_json::json!({ "kind": "joints", "q": [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0] });
        v["duration"] = 1.0.into();
    });
    let out = tmp.path().join("sing");
    let o = phri(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let records = SimLog::read_csv(std::fs::File::open(out.join("log.csv")).unwrap(), 7).unwrap();
    let last = records.last().expect("abort record");
    assert!(last.aborted);
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("meta.json")).unwrap()).unwrap();
    assert!(meta["abort"]["reason"].as_str().unwrap().contains("singular"));
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["aborted"], true);
}

#[test]
fn validate_default_chain_passes() {
    let o = phri(&["validate", "--config", repo_file("configs/frictional.json").to_str().unwrap(), "--samples", "200"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let text = String::from_utf8_lossy(&o.stdout);
    for name in ["energy_audit", "skew_symmetry", "jacobian_fd", "mass_positive_definite", "calibrated bound"] {
        assert!(text.contains(name), "{text}");
    }
}

#[test]
fn validate_asymmetric_inertia_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ScenarioConfig::from_json(&std::fs::read_to_string(repo_file("configs/frictionless.json")).unwrap()).unwrap();
    cfg.chain.joints[2].inertia[0][2] += 0.04;
    let path = tmp.path().join("asym.json");
    std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let report = tmp.path().join("report");
    let o = phri(&["validate", "--config", path.to_str().unwrap(), "--samples", "100", "--out", report.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(report.join("validate.json")).unwrap()).unwrap();
    let skew = v["checks"].as_array().unwrap().iter().find(|c| c["name"] == "skew_symmetry").unwrap();
    assert_eq!(skew["passed"], false);
}

#[test]
fn validate_samples_flag_sets_state_count() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = repo_file("configs/frictionless.json");
    for (args, expected) in [(vec![], 1000), (vec!["--samples", "37"], 37)] {
        let out = tmp.path().join(format!("v{expected}"));
        let mut all = vec!["validate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
        all.extend(args);
        assert_eq!(phri(&all).status.code(), Some(0));
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("validate.json")).unwrap()).unwrap();
        assert_eq!(v["samples"], expected);
    }
}

#[test]
fn sweep_isolates_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sweep");
    let o = phri(&[
        "sweep",
        "--config",
        repo_file("configs/frictionless.json").to_str().unwrap(),
        repo_file("configs/frictional.json").to_str().unwrap(),
        "--seed",
        "1,2",
        "--duration",
        "0.05",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let mut dirs: Vec<String> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    dirs.sort();
    assert_eq!(
        dirs,
        ["frictional_seed1_dt0.001", "frictional_seed2_dt0.001", "frictionless_seed1_dt0.001", "frictionless_seed2_dt0.001"]
    );
    for d in &dirs {
        for f in ["log.csv", "metrics.json", "meta.json"] {
            assert!(out.join(d).join(f).is_file());
        }
    }
    let a = std::fs::read(out.join("frictional_seed1_dt0.001/log.csv")).unwrap();
    let b = std::fs::read(out.join("frictional_seed2_dt0.001/log.csv")).unwrap();
    assert_ne!(a, b, "different seeds must give different noise");
}

#[test]
fn sweep_matches_single_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = repo_file("configs/frictional.json");
    let single = tmp.path().join("single");
    assert_eq!(phri(&["run", "--config", cfg.to_str().unwrap(), "--out", single.to_str().unwrap(), "--duration", "0.05", "--seed", "5"]).status.code(), Some(0));
    let sweep = tmp.path().join("sweep");
    let o = phri(&["sweep", "--config", cfg.to_str().unwrap(), "--seed", "5,6,7", "--duration", "0.05", "--jobs", "3", "--out", sweep.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read(single.join("log.csv")).unwrap(), std::fs::read(sweep.join("frictional_seed5_dt0.001/log.csv")).unwrap());
}
