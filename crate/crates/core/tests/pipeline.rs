//! Dataset layout, checkpoint format, resume and simplification.

use std::fs;
use std::path::Path;

use artipoint::kinematics::Pose;
use artipoint::model::{ArticulatedModel, Group, InitConfig};
use artipoint::render::{Camera, RenderConfig};
use artipoint::scene_io::{
    checkpoint_bytes, frame_paths, generate_synthetic, load_checkpoint, load_dataset, parse_checkpoint, save_checkpoint, save_dataset, Checkpoint,
    Dataset, SyntheticRig, CHECKPOINT_VERSION,
};
use artipoint::trainer::{GroupRates, TrainConfig, Trainer};
use artipoint::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn dataset() -> Dataset {
    generate_synthetic(&SyntheticRig::two_joint_arm(), 2, 3, 12, 12).unwrap()
}

fn model(ds: &Dataset) -> ArticulatedModel {
    let cfg = InitConfig {
        target_points: 120,
        feature_dim: 4,
        render: RenderConfig {
            samples: 8,
            embed_hidden: vec![8],
            embed_out: 4,
            color_hidden: vec![8],
            ..RenderConfig::default()
        },
        ..InitConfig::default()
    };
    let density = &ds.ground_truth.as_ref().unwrap().density;
    ArticulatedModel::initialize(density, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
}

fn config(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        rays_per_batch: 64,
        mask_subsample: 16,
        ..TrainConfig::default()
    }
}

fn trained(ds: &Dataset, steps: usize) -> Checkpoint {
    let mut t = Trainer::new(model(ds), ds, config(steps)).unwrap();
    for _ in 0..steps {
        t.step().unwrap();
    }
    t.checkpoint()
}

fn resealed(mut body: Vec<u8>) -> Vec<u8> {
    let d = Sha256::digest(&body);
    body.extend_from_slice(&d);
    body
}

#[test]
fn dataset_round_trip() {
    let ds = dataset();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    for sub in ["cameras.json", "meta.json", "frames/v0_t2.png", "masks/v1_t0.png", "gt/skeleton.json", "gt/poses.json", "gt/density.bin"] {
        assert!(dir.path().join(sub).is_file(), "{sub}");
    }
    assert_eq!(load_dataset(dir.path()).unwrap(), ds);
}

#[test]
fn dataset_without_ground_truth_loads() {
    let mut ds = dataset();
    ds.ground_truth = None;
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap(), ds);
}

#[test]
fn missing_mask_is_an_error() {
    let ds = dataset();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let (_, mask) = frame_paths(dir.path(), ds.cameras[1].id, 2);
    fs::remove_file(&mask).unwrap();
    match load_dataset(dir.path()) {
        Err(Error::Io { path, .. }) => assert_eq!(path, mask),
        other => panic!("expected an io error, got {other:?}"),
    }
}

#[test]
fn mismatched_frame_size_is_an_error() {
    let ds = dataset();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let mut cams: Vec<Camera> = ds.cameras.clone();
    cams[0] = cams[0].resized(24, 24);
    fs::write(dir.path().join("cameras.json"), serde_json::to_string(&cams).unwrap()).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Format { .. })));
}

#[test]
fn checkpoint_round_trip() {
    let ds = dataset();
    let ck = trained(&ds, 2);
    assert!(ck.optimizer.is_some());
    assert_eq!(ck.cameras, ds.cameras);
    assert_eq!(ck.meta, ds.meta);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sub/model.apck");
    save_checkpoint(&ck, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(checkpoint_bytes(&back).unwrap(), fs::read(&path).unwrap());
    // no temp file left behind
    assert_eq!(fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let ds = dataset();
    let bytes = checkpoint_bytes(&trained(&ds, 1)).unwrap();
    let p = Path::new("x.apck");

    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 1;
    assert!(matches!(parse_checkpoint(&flipped, p), Err(Error::Checksum(_))));

    for cut in [bytes.len() - 1, bytes.len() / 3, 20] {
        assert!(matches!(parse_checkpoint(&bytes[..cut], p), Err(Error::Checksum(_))), "cut at {cut}");
    }

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(parse_checkpoint(&magic, p), Err(Error::Format { .. })));

    let mut body = bytes[..bytes.len() - 32].to_vec();
    body[4..8].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    match parse_checkpoint(&resealed(body), p) {
        Err(Error::UnsupportedVersion { found, supported }) => assert_eq!((found, supported), (CHECKPOINT_VERSION + 1, CHECKPOINT_VERSION)),
        other => panic!("expected a version error, got {other:?}"),
    }

    // intact checksum but a header that points past the end
    let mut body = bytes[..bytes.len() - 32].to_vec();
    body[8..16].copy_from_slice(&(u64::MAX / 2).to_le_bytes());
    assert!(matches!(parse_checkpoint(&resealed(body), p), Err(Error::Format { .. })));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let ds = dataset();
    let mut straight = Trainer::new(model(&ds), &ds, config(6)).unwrap();
    for _ in 0..6 {
        straight.step().unwrap();
    }

    let mut first = Trainer::new(model(&ds), &ds, config(6)).unwrap();
    for _ in 0..3 {
        first.step().unwrap();
    }
    let ck = parse_checkpoint(&checkpoint_bytes(&first.checkpoint()).unwrap(), Path::new("mid")).unwrap();
    let mut second = Trainer::resume(ck.model, &ds, config(6), ck.optimizer.unwrap(), ck.iteration).unwrap();
    for _ in 0..3 {
        second.step().unwrap();
    }
    assert_eq!(checkpoint_bytes(&second.checkpoint()).unwrap(), checkpoint_bytes(&straight.checkpoint()).unwrap());
}

#[test]
fn resume_rejects_foreign_optimizer_state() {
    let ds = dataset();
    let ck = trained(&ds, 1);
    let other = model(&ds);
    let mut opt = ck.optimizer.unwrap();
    opt.m.pop();
    opt.v.pop();
    assert!(Trainer::resume(other, &ds, config(4), opt, 1).is_err());
}

#[test]
fn zero_rate_groups_stay_put() {
    let ds = dataset();
    for live in [Group::Features, Group::Regressor, Group::Heads] {
        let rates = GroupRates {
            features: 0.0,
            weights: 0.0,
            alpha: 0.0,
            joints: 0.0,
            regressor: 0.0,
            heads: 0.0,
        };
        let rates = match live {
            Group::Features => GroupRates { features: 1e-2, ..rates },
            Group::Regressor => GroupRates { regressor: 1e-2, ..rates },
            _ => GroupRates { heads: 1e-2, ..rates },
        };
        let mut before = model(&ds);
        let cfg = TrainConfig { rates, ..config(3) };
        let mut t = Trainer::new(before.clone(), &ds, cfg).unwrap();
        for _ in 0..3 {
            t.step().unwrap();
        }
        let old: Vec<(Group, Vec<f64>)> = before.params_mut().into_iter().map(|(g, p)| (g, p.to_vec())).collect();
        let new: Vec<(Group, Vec<f64>)> = t.model.params_mut().into_iter().map(|(g, p)| (g, p.to_vec())).collect();
        let mut moved = false;
        for ((g, a), (_, b)) in old.iter().zip(&new) {
            if *g == live {
                moved |= a != b;
            } else {
                assert_eq!(a, b, "{g:?} moved while only {live:?} trains");
            }
        }
        assert!(moved, "{live:?} did not move");
    }
}

#[test]
fn rates_decay_once() {
    let cfg = config(100);
    let r = cfg.rates.get(Group::Heads);
    assert_eq!(cfg.rate(Group::Heads, 49), r);
    assert_eq!(cfg.rate(Group::Heads, 50), r * cfg.decay_factor);
    assert_eq!(cfg.rate(Group::Heads, 99), r * cfg.decay_factor);
    assert_eq!(GroupRates::reference().scaled(2.0).joints, 2e-5);
}

#[test]
fn simplifying_a_still_model_keeps_the_rest_render() {
    let ds = dataset();
    let t = Trainer::new(model(&ds), &ds, TrainConfig { freeze_pose: true, ..config(2) }).unwrap();
    let m = t.model;
    let (s, report) = m.simplified(&ds.meta.timestamps, 1.0).unwrap();
    assert!(s.simplified);
    assert!(s.num_bones() <= m.num_bones());
    assert!(report.is_static.iter().all(|&x| x), "{:?}", report.is_static);
    let cam = &ds.cameras[0];
    let a = m.render_image(cam, &Pose::identity(m.num_bones())).unwrap();
    let b = s.render_image(cam, &Pose::identity(s.num_bones())).unwrap();
    // rest transforms round (p - j) + j, so points agree only to roundoff
    let worst = a.rgb.iter().zip(&b.rgb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-9, "{worst}");
    assert_eq!(s.pose_at(0.5).unwrap().bones.len(), s.num_bones());
}
