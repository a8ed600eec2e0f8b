//! Dataset to trained model to summary metrics, shared by `train`, `sweep`
//! and the acceptance checks.

use coadapt::coadapt::effective_drop_ratio;
use coadapt::io::Dataset;
use coadapt::metrics::{psnr, ssim};
use coadapt::regularize::{render_with_strategy, Strategy};
use coadapt::render::{PreparedView, RenderOptions};
use coadapt::scene::{init_perturbed, init_random, make_rig, make_scene, render_dataset, split_views, CameraRig, InitMode, SceneSpec};
use coadapt::train::{mean_ca, train, TrainConfig, TrainError, TrainRun, View};
use coadapt::GaussianCloud;

use crate::CliError;

/// Color jitter applied with perturbed ground-truth initialization.
pub const INIT_COLOR_JITTER: f64 = 0.1;

/// Train and test views of a dataset under a split.
pub struct Split {
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
    pub train: Vec<View>,
    pub test: Vec<View>,
}

pub fn split(ds: &Dataset, cfg: &TrainConfig) -> Result<Split, CliError> {
    let count = ds.cameras.len();
    if cfg.n_train < 1 || cfg.n_train >= count {
        return Err(CliError::Usage(format!("n_train must lie in [1, {}) for a {count}-view dataset, got {}", count, cfg.n_train)));
    }
    let (train_ids, test_ids) = split_views(count, cfg.n_train, cfg.split);
    let view = |i: &usize| View { camera: ds.cameras[*i].clone(), image: ds.images[*i].clone() };
    Ok(Split {
        train: train_ids.iter().map(view).collect(),
        test: test_ids.iter().map(view).collect(),
        train_ids,
        test_ids,
    })
}

pub fn initial_cloud(ds: &Dataset, cfg: &TrainConfig) -> Result<GaussianCloud, CliError> {
    match cfg.init_mode {
        InitMode::Random => Ok(init_random(cfg.init_count, cfg.init_extent, cfg.sh_degree, cfg.seed)),
        InitMode::PerturbedGroundTruth => {
            let gt = ds
                .gt
                .as_ref()
                .ok_or_else(|| CliError::Usage("init_mode perturbed-gt needs gt.cspl in the dataset".into()))?;
            Ok(init_perturbed(gt, cfg.init_jitter, INIT_COLOR_JITTER, cfg.sh_degree, cfg.seed))
        }
    }
}

/// Summary of one training run on its test views.
pub struct Outcome {
    pub run: TrainRun,
    pub split: Split,
    pub test_psnr: f64,
    pub test_ssim: f64,
    pub train_ca: Option<f64>,
    pub test_ca: Option<f64>,
}

pub fn run(ds: &Dataset, cfg: &TrainConfig) -> Result<Outcome, CliError> {
    let split = split(ds, cfg)?;
    let init = initial_cloud(ds, cfg)?;
    let run = train(&init, &split.train, &split.test, cfg).map_err(train_error)?;
    let last = run.log.last().expect("log has the initial record");
    let (train_ca, test_ca) = (last.train_ca, last.test_ca);
    let eval = run.inference_cloud();
    let (test_psnr, test_ssim) = image_scores(&split.test, |cam| {
        PreparedView::new(&eval, cam, &RenderOptions::default()).render(false).color
    });
    Ok(Outcome { run, split, test_psnr, test_ssim, train_ca, test_ca })
}

pub fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::Diverged { .. } => CliError::Diverged(e.to_string()),
        other => CliError::Usage(other.to_string()),
    }
}

/// Mean PSNR and SSIM of `render` against each view.
pub fn image_scores(views: &[View], render: impl Fn(&coadapt::Camera) -> coadapt::RgbImage) -> (f64, f64) {
    if views.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let (mut p, mut s) = (0.0, 0.0);
    for v in views {
        let img = render(&v.camera);
        p += psnr(&img, &v.image);
        s += ssim(&img, &v.image);
    }
    let n = views.len() as f64;
    (p / n, s / n)
}

/// Test-view PSNR and SSIM of a trained run rendered with a strategy.
pub fn strategy_scores(outcome: &Outcome, strategy: Strategy, seed: u64) -> (f64, f64) {
    let p = outcome.run.train_p;
    image_scores(&outcome.split.test, |cam| {
        render_with_strategy(&outcome.run.cloud, cam, p, strategy, Strategy::DEFAULT_AVERAGE_COUNT, seed).color
    })
}

/// CA of a cloud over views at the drop ratio matching `train_p`.
pub fn views_ca(cloud: &GaussianCloud, views: &[View], train_p: f64, cfg: &TrainConfig, seed: u64) -> Option<f64> {
    mean_ca(cloud, views, effective_drop_ratio(train_p), cfg.ca_samples, cfg.ca_threshold, seed)
}

/// In-memory dataset with the same content `gen` writes to disk.
pub fn synthetic_dataset(scene: &SceneSpec, rig: &CameraRig) -> Dataset {
    let gt = make_scene(scene);
    let cameras = make_rig(rig);
    let images = render_dataset(&gt, &cameras);
    Dataset { gt: Some(gt), cameras, images }
}
