use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn soc_kit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_soc-kit"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn heat_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/heat.json")
}

/// Two-state unstable linear plant; the whole pipeline runs in well under a second.
const SMALL: &str = r#"{
    "seed": 3,
    "plant": {
        "dt": 1.0, "horizon": 30, "heat": null,
        "linear": {"a": [[1.02, 0.1], [0.0, 0.97]], "b": [[0.0], [0.5]], "c": [[1.0, 0.0]]},
        "initial_state": [1.0, 0.0],
        "process_noise": 0.01, "measurement_noise": 0.01, "initial_covariance": 0.0001
    },
    "cost": {"q_track": 1.0, "r_ctrl": 0.1, "q_term": 1.0, "target": [2.0, 0.0]},
    "optimizer": {"ensemble_size": 20, "max_iters": 20},
    "sysid": {"p": 5, "q": 5},
    "lqg": {"control_weight": 0.1},
    "evaluation": {"n_runs": 10, "scaling_runs": 10, "probes": [0.0, 1.0], "band": null}
}"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, text).unwrap();
    path
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn validate_echoes_heat_configuration() {
    let out = soc_kit(&["validate", "--config", heat_config().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    let value = |key: &str| {
        text.lines()
            .find_map(|l| l.split_once('=').filter(|(k, _)| k.trim() == key).map(|(_, v)| v.trim().to_string()))
            .unwrap_or_else(|| panic!("no `{key}` row in\n{text}"))
    };
    assert_eq!(value("N"), "250");
    assert_eq!(value("dt"), "0.25");
    assert_eq!(value("total time"), "62.5");
    assert_eq!(value("n_r_fixed"), "20");
}

#[test]
fn missing_config_is_an_io_error() {
    let out = soc_kit(&["validate", "--config", "/nonexistent/heat.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("cannot read configuration"));
}

#[test]
fn invalid_config_reports_field_paths() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), r#"{"plant": {"dt": -1.0}, "sysid": {"n_r_fixed": 500}}"#);
    let out = soc_kit(&["validate", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("plant.dt"), "{err}");
    assert!(err.contains("sysid.n_r_fixed"), "{err}");

    let path = write_config(dir.path(), "{\n  \"plant\": {\"dtt\": 1}\n}");
    let out = soc_kit(&["validate", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
}

#[test]
fn stage_without_cached_inputs_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), SMALL);
    let out_dir = dir.path().join("out");
    let out = soc_kit(&["evaluate", "--config", path.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("nominal.csv"));
}

#[test]
fn numerical_failure_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let diverging = SMALL.replace("[[1.02, 0.1], [0.0, 0.97]]", "[[1e200, 0.0], [0.0, 1e200]]");
    let path = write_config(dir.path(), &diverging);
    let out_dir = dir.path().join("out");
    let out = soc_kit(&["pipeline", "--config", path.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("stage `optimize` failed"), "{}", stderr(&out));
}

fn artifact_names(dir: &Path) -> Vec<PathBuf> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            names.extend(artifact_names(&path));
        } else if !path.ends_with("run_meta.json") {
            names.push(path);
        }
    }
    names.sort();
    names
}

#[test]
fn reruns_are_byte_identical_and_stage_resume_matches() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), SMALL);
    let config = path.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out_dir in [&a, &b] {
        let out = soc_kit(&["pipeline", "--config", config, "--out", out_dir.to_str().unwrap(), "--threads", "2"]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    }
    let files_a = artifact_names(&a);
    assert!(files_a.iter().any(|p| p.ends_with("rollouts/costs.csv")));
    for file in &files_a {
        let twin = b.join(file.strip_prefix(&a).unwrap());
        assert_eq!(fs::read(file).unwrap(), fs::read(&twin).unwrap(), "{} differs", file.display());
    }
    let hash = fs::read_to_string(a.join("summary.json")).unwrap();
    assert!(hash.contains("\"config_hash\""));
    assert!(fs::read_to_string(a.join("nominal.csv")).unwrap().starts_with("# config_hash="));

    // resume identification from a copy of the cached nominal only
    let c = dir.path().join("c");
    fs::create_dir_all(&c).unwrap();
    for name in ["nominal.csv", "nominal.json"] {
        fs::copy(a.join(name), c.join(name)).unwrap();
    }
    let out = soc_kit(&["pipeline", "--stage", "identify", "--config", config, "--out", c.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    for name in ["markov.json", "ltv_model.json", "controller.json", "summary.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(c.join(name)).unwrap(), "{name} differs after resume");
    }

    // a different seed invalidates the cached nominal
    let out = soc_kit(&["identify", "--config", config, "--out", c.to_str().unwrap(), "--seed", "4"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("different configuration"), "{}", stderr(&out));
}
