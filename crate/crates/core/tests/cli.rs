//! Command-line behavior: exit codes, error reports, config handling and
//! stage isolation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn cli(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_field-dissector"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("FIELD_DISSECTOR_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn error_report(output: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&output.stderr);
    let line = stderr.lines().last().expect("error line on stderr");
    serde_json::from_str(line).expect("stderr is JSON")
}

/// Contents of every file under `dir`, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    files
}

#[test]
fn dissect_with_zero_steps_keeps_the_category_field() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(cli(tmp.path(), &["scene"]).status.success());
    let out = cli(tmp.path(), &["dissect", "--set", "dissect.steps=0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let necf = tmp.path().join("sphere_on_box/necf");
    assert_eq!(
        fs::read(necf.join("initial.vgrid")).unwrap(),
        fs::read(necf.join("category.vgrid")).unwrap()
    );
}

#[test]
fn later_stages_leave_earlier_artifacts_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("stack");
    let set = ["--set", "scene=three_stack", "--set", "run_id=stack", "--set", "dissect.steps=2"];
    let with = |stage: &str| {
        let mut args = vec![stage];
        args.extend(set);
        let out = cli(tmp.path(), &args);
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    };
    with("scene");
    let scene = snapshot(&run);
    with("dissect");
    let dissected = snapshot(&run);
    assert!(scene.iter().all(|(k, v)| dissected.get(k) == Some(v)));
    for stage in ["mesh", "refine", "render", "eval"] {
        with(stage);
    }
    let after = snapshot(&run);
    assert!(dissected.iter().all(|(k, v)| after.get(k) == Some(v)));
    let names: Vec<String> = after.keys().map(|p| p.to_string_lossy().into_owned()).collect();
    for expected in [
        "scene.json",
        "fields/density.vgrid",
        "fields/gt_cap.vgrid",
        "necf/category.vgrid",
        "meshes/three_stack_ball.obj",
        "meshes/three_stack_ball_refined.obj",
        "renders/frame_00_composite.ppm",
        "metrics/metrics.json",
    ] {
        assert!(names.iter().any(|n| n == expected), "missing {expected}");
    }
    let metrics: serde_json::Value = serde_json::from_slice(&after[Path::new("metrics/metrics.json")]).unwrap();
    assert_eq!(metrics["iou_mean"].as_array().unwrap().len(), 3);
}

#[test]
fn config_file_and_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("config.json");
    fs::write(&config, r#"{ "scene": "torus_through_sphere", "run_id": "from_file" }"#).unwrap();
    let out = cli(tmp.path(), &["scene", "--config", config.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let spec: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("from_file/scene.json")).unwrap()).unwrap();
    assert_eq!(spec["name"], "torus_through_sphere");
}

#[test]
fn invalid_configuration_exits_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let bad_file = tmp.path().join("bad.json");
    fs::write(&bad_file, "{ not json").unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec!["scene", "--set", "no.such.key=1"],
        vec!["scene", "--set", "dissect.learning_rate=-1"],
        vec!["scene", "--set", "scene=/nonexistent/scene.json"],
        vec!["scene", "--config", bad_file.to_str().unwrap()],
        vec!["scene", "--config", "/nonexistent/config.json"],
        vec!["scene", "--seed", "-3"],
        vec!["frobnicate"],
    ];
    for args in cases {
        let out = cli(tmp.path(), &args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert_eq!(error_report(&out)["error"], "config", "{args:?}");
    }
}

#[test]
fn runtime_failure_exits_with_1() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cli(tmp.path(), &["mesh"]);
    assert_eq!(out.status.code(), Some(1));
    let report = error_report(&out);
    assert_eq!(report["error"], "runtime");
    assert_eq!(report["stage"], "mesh");
    assert!(report["message"].as_str().unwrap().contains("scene.json"));
}

#[test]
fn thread_variable_must_be_positive() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_field-dissector"))
        .args(["scene", "--out"])
        .arg(tmp.path())
        .env("FIELD_DISSECTOR_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
