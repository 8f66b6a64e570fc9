//! Implementations of the subcommands.

use std::path::{Path, PathBuf};

use artipoint::kinematics::Pose;
use artipoint::model::{ArticulatedModel, InitConfig};
use artipoint::render::Camera;
use artipoint::scene_io::{
    encode_png_rgb, generate_synthetic, load_checkpoint, load_dataset, load_density, read_json, save_checkpoint,
    save_dataset, Checkpoint, SyntheticRig,
};
use artipoint::trainer::{evaluate, fit, FitOutputs, TrainConfig, Trainer};
use rand::SeedableRng;

use crate::{CliError, Command};

pub fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenData(a) => gen_data(&a.rig, a.views as usize, a.timestamps as usize, a.res, &a.out),
        Command::Extract(a) => extract(&a.dataset, a.density.as_deref(), a.config.as_deref(), a.seed, &a.out),
        Command::Train(a) => train(&a.dataset, &a.ckpt, a.config.as_deref(), a.history, &a.out),
        Command::Render(a) => render(&a.ckpt, a.camera, a.time, &a.out),
        Command::Evaluate(a) => {
            let report = evaluate_checkpoint(&a.ckpt, &a.dataset, a.train_views)?;
            println!("{report}");
            Ok(())
        }
        Command::Simplify(a) => simplify(&a.ckpt, a.threshold_deg, &a.out),
        Command::Repose(a) => repose(&a.ckpt, &a.pose, a.camera, &a.out),
        Command::Serve(a) => crate::server::serve_blocking(a.ckpt, a.addr, a.reload),
    }
}

pub fn gen_data(rig: &Path, views: usize, timestamps: usize, res: (usize, usize), out: &Path) -> Result<(), CliError> {
    let rig: SyntheticRig = read_json(rig)?;
    let ds = generate_synthetic(&rig, views, timestamps, res.0, res.1)?;
    save_dataset(&ds, out)?;
    log::info!(
        "wrote {} views × {} timestamps to {}",
        ds.num_views(),
        ds.num_timestamps(),
        out.display()
    );
    Ok(())
}

pub fn extract(dataset: &Path, density: Option<&Path>, config: Option<&Path>, seed: u64, out: &Path) -> Result<(), CliError> {
    let ds = load_dataset(dataset)?;
    let grid = match (density, &ds.ground_truth) {
        (Some(p), _) => load_density(p)?,
        (None, Some(gt)) => gt.density.clone(),
        (None, None) => load_density(&dataset.join("gt").join("density.bin"))?,
    };
    let cfg: InitConfig = match config {
        Some(p) => read_json(p)?,
        None => InitConfig::default(),
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let model = ArticulatedModel::initialize(&grid, &cfg, &mut rng)?;
    log::info!(
        "{} points, {} joints, {} bones",
        model.points.len(),
        model.skeleton.num_joints(),
        model.num_bones()
    );
    let ck = Checkpoint {
        model,
        optimizer: None,
        iteration: 0,
        config: serde_json::to_value(&cfg).unwrap_or_default(),
        cameras: ds.cameras.clone(),
        meta: ds.meta.clone(),
    };
    save_checkpoint(&ck, out)?;
    Ok(())
}

fn history_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".history.jsonl");
    PathBuf::from(s)
}

pub fn train(dataset: &Path, ckpt: &Path, config: Option<&Path>, history: Option<PathBuf>, out: &Path) -> Result<(), CliError> {
    let cfg: TrainConfig = match config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    cfg.validate().map_err(|e| match config {
        Some(p) => CliError::Data(format!("{}: {e}", p.display())),
        None => CliError::Data(e.to_string()),
    })?;
    let ds = load_dataset(dataset)?;
    let ck = load_checkpoint(ckpt)?;
    let sizes = ck.model.clone().param_sizes();
    let trainer = match ck.optimizer {
        Some(opt) if ck.iteration > 0 && opt.matches(&sizes) => {
            log::info!("resuming at iteration {}", ck.iteration);
            Trainer::resume(ck.model, &ds, cfg, opt, ck.iteration)?
        }
        _ => Trainer::new(ck.model, &ds, cfg)?,
    };
    let outputs = FitOutputs {
        history: Some(history.unwrap_or_else(|| history_path(out))),
        checkpoint: Some(out.to_path_buf()),
        eval_views: Vec::new(),
    };
    fit(trainer, &outputs)?;
    Ok(())
}

pub fn camera_by_id(ck: &Checkpoint, id: usize, source: &Path) -> Result<Camera, CliError> {
    ck.cameras.iter().find(|c| c.id == id).cloned().ok_or_else(|| {
        let known: Vec<usize> = ck.cameras.iter().map(|c| c.id).collect();
        CliError::Data(format!("{}: unknown camera {id} (known: {known:?})", source.display()))
    })
}

/// PNG bytes of `model` at `pose` seen from `camera`.
pub fn render_png(model: &ArticulatedModel, camera: &Camera, pose: &Pose) -> Result<Vec<u8>, CliError> {
    let img = model.render_image(camera, pose)?;
    Ok(encode_png_rgb(img.width, img.height, &img.to_rgb8())?)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn render(ckpt: &Path, camera: usize, time: f64, out: &Path) -> Result<(), CliError> {
    let ck = load_checkpoint(ckpt)?;
    let cam = camera_by_id(&ck, camera, ckpt)?;
    let pose = ck.model.pose_at(time)?;
    write_bytes(out, &render_png(&ck.model, &cam, &pose)?)
}

pub fn evaluate_checkpoint(ckpt: &Path, dataset: &Path, train_views: bool) -> Result<String, CliError> {
    let ck = load_checkpoint(ckpt)?;
    let ds = load_dataset(dataset)?;
    let views = if train_views { ds.train_views() } else { ds.eval_views() };
    let report = evaluate(&ck.model, &ds, &views)?;
    serde_json::to_string_pretty(&report).map_err(|e| CliError::Data(e.to_string()))
}

pub fn simplify(ckpt: &Path, threshold_deg: f64, out: &Path) -> Result<(), CliError> {
    let ck = load_checkpoint(ckpt)?;
    if ck.meta.timestamps.is_empty() {
        return Err(CliError::Data(format!("{}: checkpoint records no timestamps", ckpt.display())));
    }
    let (model, report) = ck.model.simplified(&ck.meta.timestamps, threshold_deg)?;
    log::info!(
        "{} bones -> {} bones ({} static joints)",
        ck.model.num_bones(),
        model.num_bones(),
        report.is_static.iter().filter(|s| **s).count()
    );
    let next = Checkpoint {
        model,
        // parameter shapes changed, so the moments no longer apply
        optimizer: None,
        ..ck
    };
    save_checkpoint(&next, out)?;
    Ok(())
}

pub fn repose(ckpt: &Path, pose: &Path, camera: usize, out: &Path) -> Result<(), CliError> {
    let ck = load_checkpoint(ckpt)?;
    let pose: Pose = read_json(pose)?;
    pose.check_arity(ck.model.num_bones())?;
    let cam = camera_by_id(&ck, camera, ckpt)?;
    write_bytes(out, &render_png(&ck.model, &cam, &pose)?)
}
