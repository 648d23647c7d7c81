use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use masklift::io::{read_labels, read_mask3d, save_labels};
use masklift::labels::{propagate, PropagationConfig};
use masklift::synth::{generate_scene, SynthSpec};
use masklift::LabelArray;
use serde_json::Value;

fn masklift(args: &[&str]) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_masklift"));
    cmd.args(args);
    for (k, _) in std::env::vars() {
        if k.starts_with("MASKLIFT_") {
            cmd.env_remove(k);
        }
    }
    cmd
}

fn ok(mut cmd: Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth_scene(root: &Path, name: &str, seed: u64) -> PathBuf {
    let dir = root.join(name);
    let spec = SynthSpec {
        seed,
        cameras: masklift::synth::CameraRing {
            count: 4,
            ..Default::default()
        },
        ..Default::default()
    };
    generate_scene(&spec).unwrap().save(&dir).unwrap();
    dir
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn stages_compose_to_the_pipeline_output() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let scene = root.join("room");
    ok(masklift(&["synth", "--seed", "21", "--out", s(&scene)]));

    let cfg = root.join("cfg.json");
    fs::write(&cfg, r#"{"write_stack": true}"#).unwrap();
    let run_out = root.join("run");
    ok(masklift(&[
        "run",
        "--config",
        s(&cfg),
        "--scene",
        s(&scene),
        "--out",
        s(&run_out),
    ]));
    let a = run_out.join("room");

    let b = root.join("stages");
    fs::create_dir_all(&b).unwrap();
    let sparse = scene.join("sparse.labels");
    let p = |f: &str| b.join(f);
    ok(masklift(&[
        "lift",
        "--scene",
        s(&scene),
        "--out",
        s(&p("mask3d.bin")),
    ]));
    ok(masklift(&[
        "init-labels",
        "--annotations",
        s(&sparse),
        "--masks",
        s(&p("mask3d.bin")),
        "--out",
        s(&p("init.labels")),
    ]));
    ok(masklift(&[
        "select-reliable",
        "--scene",
        s(&scene),
        "--seeds",
        s(&sparse),
        "--stack-out",
        s(&p("stack.bin")),
        "--out",
        s(&p("reliable.labels")),
    ]));
    ok(masklift(&[
        "propagate",
        "--annotations",
        s(&sparse),
        "--reliable",
        s(&p("reliable.labels")),
        "--masks",
        s(&p("mask3d.bin")),
        "--out",
        s(&p("expanded.labels")),
    ]));
    ok(masklift(&[
        "losses",
        "--scene",
        s(&scene),
        "--stack",
        s(&p("stack.bin")),
        "--expanded",
        s(&p("expanded.labels")),
        "--out",
        s(&p("loss.json")),
    ]));
    ok(masklift(&[
        "eval",
        "--pred",
        s(&p("expanded.labels")),
        "--gt",
        s(&scene.join("gt.labels")),
        "--num-classes",
        "6",
        "--out",
        s(&p("eval.json")),
    ]));

    for f in [
        "mask3d.bin",
        "mask3d.prov.json",
        "init.labels",
        "stack.bin",
        "reliable.labels",
        "expanded.labels",
        "loss.json",
        "eval.json",
    ] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn propagate_wrapper_matches_library() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = synth_scene(tmp.path(), "room", 4);
    let masks = tmp.path().join("m.bin");
    ok(masklift(&["lift", "--scene", s(&scene), "--out", s(&masks)]));

    let y = read_labels(&scene.join("sparse.labels")).unwrap();
    let gt = read_labels(&scene.join("gt.labels")).unwrap();
    // every 3rd ground-truth label as a stand-in reliable set
    let yr: LabelArray = gt
        .iter()
        .enumerate()
        .map(|(i, g)| g.filter(|_| i % 3 == 0))
        .collect();
    let yr_path = tmp.path().join("yr.labels");
    save_labels(&yr, &yr_path).unwrap();

    let out = tmp.path().join("exp.labels");
    ok(masklift(&[
        "propagate",
        "--eta",
        "0.7",
        "--annotations",
        s(&scene.join("sparse.labels")),
        "--reliable",
        s(&yr_path),
        "--masks",
        s(&masks),
        "--out",
        s(&out),
    ]));
    let m = read_mask3d(&masks).unwrap();
    let want = propagate(&y, &yr, &m, &PropagationConfig::new(0.7).unwrap()).unwrap();
    assert_eq!(read_labels(&out).unwrap(), want.labels);
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = synth_scene(tmp.path(), "room", 5);
    let gt = scene.join("gt.labels");
    let out = ok(masklift(&[
        "eval",
        "--pred",
        s(&gt),
        "--gt",
        s(&gt),
        "--num-classes",
        "6",
    ]));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["miou"]["miou"], 1.0);
    assert_eq!(v["stats"]["accuracy"], 1.0);
}

#[test]
fn empty_scene_list_gives_empty_aggregate() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    ok(masklift(&["run", "--out", s(&out)]));
    let r = json(&out.join("report.json"));
    assert_eq!(r["scenes"], Value::Array(vec![]));
    assert_eq!(r["aggregate"]["scenes_ok"], 0);
    assert_eq!(r["aggregate"]["mean_miou"], Value::Null);
}

#[test]
fn failing_scene_is_recorded_and_others_finish() {
    let tmp = tempfile::tempdir().unwrap();
    let good = synth_scene(tmp.path(), "good", 6);
    let bad = synth_scene(tmp.path(), "bad", 7);
    fs::remove_file(bad.join("cloud.ply")).unwrap();
    let out = tmp.path().join("out");
    let res = masklift(&["run", "--scene", s(&good), "--scene", s(&bad), "--out", s(&out)])
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(1));
    let r = json(&out.join("report.json"));
    assert_eq!(r["scenes"][0]["ok"], true);
    assert_eq!(r["scenes"][1]["ok"], false);
    assert_eq!(r["scenes"][1]["stage"], "load");
    assert!(r["scenes"][1]["error"].as_str().unwrap().contains("cloud.ply"));
    assert_eq!(r["aggregate"]["scenes_ok"], 1);
    assert!(out.join("good/report.json").exists());
}

#[test]
fn flags_and_env_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"eta": 0.5, "tau": 0.8}"#).unwrap();
    let out = tmp.path().join("out");
    let eta_tau = |cmd: Command| {
        ok(cmd);
        let r = json(&out.join("report.json"));
        (
            r["config"]["eta"].as_f64().unwrap(),
            r["config"]["tau"].as_f64().unwrap(),
        )
    };

    assert_eq!(eta_tau(masklift(&["run", "--out", s(&out)])), (0.7, 0.9));
    assert_eq!(
        eta_tau(masklift(&["run", "--config", s(&cfg), "--out", s(&out)])),
        (0.5, 0.8)
    );
    let mut env = masklift(&["run", "--config", s(&cfg), "--out", s(&out)]);
    env.env("MASKLIFT_ETA", "0.9");
    assert_eq!(eta_tau(env), (0.9, 0.8));
    let mut flag = masklift(&["run", "--config", s(&cfg), "--eta", "0.3", "--out", s(&out)]);
    flag.env("MASKLIFT_ETA", "0.9");
    assert_eq!(eta_tau(flag), (0.3, 0.8));
}

#[test]
fn bad_input_exits_with_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let res = masklift(&[
        "eval",
        "--pred",
        s(&tmp.path().join("nope.labels")),
        "--gt",
        s(&tmp.path().join("nope.labels")),
        "--num-classes",
        "3",
    ])
    .output()
    .unwrap();
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("nope.labels"));

    let out = tmp.path().join("out");
    let res = masklift(&["run", "--eta", "1.5", "--out", s(&out)])
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(2));
}
