//! Trains the two-joint arm with the default desk config and reports
//! held-out PSNR and bone-angle error. Pass `freeze` for the rest-pose
//! baseline; an optional second argument overrides the iteration count.

use std::time::Instant;

use artipoint::model::{ArticulatedModel, InitConfig};
use artipoint::scene_io::{generate_synthetic, SyntheticRig};
use artipoint::trainer::{bone_angle_errors, evaluate, fit, median, FitOutputs, TrainConfig, Trainer};
use rand::SeedableRng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let freeze = args.get(1).is_some_and(|s| s == "freeze");
    let t0 = Instant::now();
    let rig = SyntheticRig::two_joint_arm();
    let ds = generate_synthetic(&rig, 4, 10, 64, 64).unwrap();
    let gt = ds.ground_truth.clone().unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let model = ArticulatedModel::initialize(&gt.density, &InitConfig::default(), &mut rng).unwrap();
    let mut cfg = TrainConfig {
        freeze_pose: freeze,
        log_interval: 100,
        ..TrainConfig::default()
    };
    if let Some(n) = args.get(2).and_then(|s| s.parse().ok()) {
        cfg.iterations = n;
    }
    let res = fit(Trainer::new(model, &ds, cfg).unwrap(), &FitOutputs::default()).unwrap();
    for h in &res.history {
        println!("{:>5} loss {:.4} photo {:.5} mask {:.3}", h.iteration, h.losses.total, h.losses.photo.raw, h.losses.mask.raw);
    }
    let m = &res.checkpoint.model;
    let ev = evaluate(m, &ds, &ds.eval_views()).unwrap();
    let errs = bone_angle_errors(m, &gt.skeleton, &gt.poses, &ds.meta.timestamps).unwrap();
    println!("held-out psnr {:.2}", ev.mean);
    println!("median angle error {:.2} deg", median(&errs));
    println!("elapsed {:.1}s", t0.elapsed().as_secs_f64());
}
