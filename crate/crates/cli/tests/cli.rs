use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use artipoint::kinematics::Pose;
use artipoint::scene_io::{load_checkpoint, read_png_rgb, read_json, SyntheticRig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_artipoint"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn artipoint")
}

fn rig_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../rigs/arm.json")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// gen-data + extract into `dir`, returning (dataset, checkpoint).
fn prepare(dir: &Path) -> (PathBuf, PathBuf) {
    let ds = dir.join("data");
    let ck = dir.join("init.apck");
    let o = run(&["gen-data", "--rig", s(&rig_path()), "--views", "2", "--timestamps", "3", "--res", "24x24", "--out", s(&ds)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&["extract", "--dataset", s(&ds), "--out", s(&ck)]);
    assert!(o.status.success(), "{}", stderr(&o));
    (ds, ck)
}

#[test]
fn shipped_rig_is_the_builtin_arm() {
    let rig: SyntheticRig = read_json(&rig_path()).unwrap();
    assert_eq!(rig, SyntheticRig::two_joint_arm());
}

#[test]
fn unknown_flag_prints_usage_and_exits_1() {
    let o = run(&["render", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    let o = run(&["gen-data", "--rig", "x.json", "--views", "2", "--timestamps", "3", "--res", "64", "--out", "d"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(run(&[]).status.code(), Some(1));
}

#[test]
fn missing_inputs_exit_2_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let o = run(&["extract", "--dataset", s(&missing), "--out", s(&dir.path().join("c.apck"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("cameras.json"), "{}", stderr(&o));
    let o = run(&["render", "--ckpt", s(&missing), "--camera", "0", "--time", "0", "--out", s(&dir.path().join("x.png"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere"), "{}", stderr(&o));
}

#[test]
fn pipeline_gen_extract_render_train_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, ck) = prepare(dir.path());
    assert!(ds.join("frames/v0_t2.png").exists());
    assert!(ds.join("masks/v1_t0.png").exists());
    assert!(ds.join("gt/density.bin").exists());

    let img = dir.path().join("canon.png");
    let o = run(&["render", "--ckpt", s(&ck), "--camera", "0", "--time", "0", "--out", s(&img)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (w, h, rgb) = read_png_rgb(&img).unwrap();
    assert_eq!((w, h), (24, 24));
    assert!(rgb.iter().any(|&v| v < 250), "render is pure background");

    let o = run(&["render", "--ckpt", s(&ck), "--camera", "9", "--time", "0", "--out", s(&img)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown camera 9"), "{}", stderr(&o));

    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"iterations": 6, "rays_per_batch": 64, "log_interval": 2, "mask_subsample": 200}"#).unwrap();
    let out = dir.path().join("trained.apck");
    let o = run(&["train", "--dataset", s(&ds), "--ckpt", s(&ck), "--out", s(&out), "--config", s(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let trained = load_checkpoint(&out).unwrap();
    assert_eq!(trained.iteration, 6);
    assert!(trained.optimizer.is_some());
    let hist = std::fs::read_to_string(dir.path().join("trained.apck.history.jsonl")).unwrap();
    assert!(hist.lines().count() >= 3);
    for line in hist.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["losses"]["total"].as_f64().unwrap().is_finite());
    }

    let o = run(&["evaluate", "--ckpt", s(&out), "--dataset", s(&ds)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let views = v["per_view"].as_array().unwrap();
    assert_eq!(views.len(), 1, "one held-out view");
    assert!(v["mean"].as_f64().unwrap() > 0.0);
}

#[test]
fn train_rejects_bad_config_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, ck) = prepare(dir.path());
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"rays_per_batch": 8}"#).unwrap();
    let o = run(&["train", "--dataset", s(&ds), "--ckpt", s(&ck), "--out", s(&dir.path().join("o.apck")), "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.json"), "{}", stderr(&o));
}

#[test]
fn simplify_to_root_and_repose() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ck) = prepare(dir.path());
    let before = load_checkpoint(&ck).unwrap();
    assert!(before.model.num_bones() > 0);

    let root = dir.path().join("root.apck");
    let o = run(&["simplify", "--ckpt", s(&ck), "--threshold-deg", "180", "--out", s(&root)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let after = load_checkpoint(&root).unwrap();
    assert_eq!(after.model.num_bones(), 0);
    assert_eq!(after.model.skeleton.num_joints(), 1);
    assert!(after.model.simplified);

    // a pose for the full skeleton no longer fits
    let pose = dir.path().join("pose.json");
    std::fs::write(&pose, serde_json::to_string(&Pose::identity(before.model.num_bones())).unwrap()).unwrap();
    let img = dir.path().join("r.png");
    let o = run(&["repose", "--ckpt", s(&root), "--pose", s(&pose), "--camera", "0", "--out", s(&img)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("arity"), "{}", stderr(&o));

    let o = run(&["repose", "--ckpt", s(&ck), "--pose", s(&pose), "--camera", "0", "--out", s(&img)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(img.exists());

    let o = run(&["simplify", "--ckpt", s(&ck), "--threshold-deg", "200", "--out", s(&root)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn corrupt_checkpoint_reports_checksum() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ck) = prepare(dir.path());
    let mut bytes = std::fs::read(&ck).unwrap();
    bytes.truncate(bytes.len() - 100);
    let bad = dir.path().join("bad.apck");
    std::fs::write(&bad, bytes).unwrap();
    let o = run(&["render", "--ckpt", s(&bad), "--camera", "0", "--time", "0", "--out", s(&dir.path().join("x.png"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("checksum"), "{}", stderr(&o));
}

#[test]
fn rest_render_matches_repose_at_identity() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ck) = prepare(dir.path());
    let c = load_checkpoint(&ck).unwrap();
    let pose = dir.path().join("rest.json");
    std::fs::write(&pose, serde_json::to_string(&Pose::identity(c.model.num_bones())).unwrap()).unwrap();
    let a = dir.path().join("a.png");
    let b = dir.path().join("b.png");
    assert!(run(&["repose", "--ckpt", s(&ck), "--pose", s(&pose), "--camera", "1", "--out", s(&a)]).status.success());
    assert!(run(&["repose", "--ckpt", s(&ck), "--pose", s(&pose), "--camera", "1", "--out", s(&b)]).status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}
