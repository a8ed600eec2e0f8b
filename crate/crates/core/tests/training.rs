use coadapt::metrics::psnr;
use coadapt::regularize::{sample_dropout_mask, NoiseTarget};
use coadapt::render::{render, RenderOptions};
use coadapt::scene::{init_random, make_rig, make_scene, render_dataset, split_views, CameraRig, RigKind, SceneKind, SceneSpec, SplitProtocol};
use coadapt::train::{train, DropoutMode, InferenceScale, TrainConfig, View};
use coadapt::GaussianCloud;

fn views(gt_count: usize, count: usize, res: usize) -> Vec<View> {
    let gt = make_scene(&SceneSpec::new(SceneKind::RandomBlobField, gt_count, 1));
    let cams = make_rig(&CameraRig::new(RigKind::Arc, count, res, res));
    let imgs = render_dataset(&gt, &cams);
    cams.into_iter().zip(imgs).map(|(camera, image)| View { camera, image }).collect()
}

fn split(all: &[View], n_train: usize) -> (Vec<View>, Vec<View>) {
    let (tr, te) = split_views(all.len(), n_train, SplitProtocol::EveryKth);
    (tr.iter().map(|&i| all[i].clone()).collect(), te.iter().map(|&i| all[i].clone()).collect())
}

fn small_config() -> TrainConfig {
    TrainConfig { iterations: 12, ca_interval: 6, ca_samples: 3, init_count: 80, ..TrainConfig::default() }
}

fn params_equal(a: &GaussianCloud, b: &GaussianCloud, i: usize) -> bool {
    a.gaussians[i] == b.gaussians[i]
}

#[test]
fn identical_config_gives_identical_run() {
    let all = views(100, 6, 16);
    let (tr, te) = split(&all, 2);
    let variants = [
        TrainConfig { dropout_p: 0.3, ..small_config() },
        TrainConfig { noise_target: Some(NoiseTarget::Position), noise_sigma: 0.5, ..small_config() },
        TrainConfig { dropout_mode: DropoutMode::Concrete, dropout_p: 0.2, ..small_config() },
        TrainConfig { dropout_mode: DropoutMode::Density, ..small_config() },
    ];
    for cfg in variants {
        let init = init_random(cfg.init_count, 2.0, cfg.sh_degree, 4);
        let a = train(&init, &tr, &te, &cfg).unwrap();
        let b = train(&init, &tr, &te, &cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.cloud, b.cloud);
        assert_eq!(a.inference, b.inference);
    }
}

#[test]
fn dropped_gaussians_are_frozen_by_the_step_that_dropped_them() {
    let all = views(100, 4, 16);
    let (tr, te) = split(&all, 2);
    let cfg = TrainConfig { iterations: 1, dropout_p: 0.4, seed: 9, ..small_config() };
    let init = init_random(cfg.init_count, 2.0, cfg.sh_degree, 1);
    let run = train(&init, &tr, &te, &cfg).unwrap();
    let keep = sample_dropout_mask(init.len(), cfg.dropout_p, cfg.seed, 0).keep;
    let mut moved = 0;
    for (i, k) in keep.iter().enumerate() {
        if *k {
            moved += usize::from(!params_equal(&init, &run.cloud, i));
        } else {
            assert!(params_equal(&init, &run.cloud, i), "dropped Gaussian {i} changed");
        }
    }
    assert!(moved > 0);
}

#[test]
fn decay_is_the_only_change_to_dropped_gaussians() {
    let all = views(100, 4, 16);
    let (tr, te) = split(&all, 2);
    let cfg = TrainConfig { iterations: 1, dropout_p: 0.4, decay_factor: 0.99, seed: 2, ..small_config() };
    let init = init_random(cfg.init_count, 2.0, cfg.sh_degree, 1);
    let run = train(&init, &tr, &te, &cfg).unwrap();
    let keep = sample_dropout_mask(init.len(), cfg.dropout_p, cfg.seed, 0).keep;
    for (i, _) in keep.iter().enumerate().filter(|(_, k)| !**k) {
        let (a, b) = (&init.gaussians[i], &run.cloud.gaussians[i]);
        assert_eq!((a.position, a.rotation, a.log_scale, &a.sh), (b.position, b.rotation, b.log_scale, &b.sh));
        assert!((b.opacity() - 0.99 * a.opacity()).abs() < 1e-12);
    }
}

#[test]
fn dropout_runs_evaluate_with_scaled_opacity() {
    let all = views(100, 4, 16);
    let (tr, te) = split(&all, 2);
    let cfg = TrainConfig { iterations: 1, dropout_p: 0.2, ..small_config() };
    let init = init_random(cfg.init_count, 2.0, cfg.sh_degree, 1);
    let run = train(&init, &tr, &te, &cfg).unwrap();
    assert_eq!(run.inference, InferenceScale::Uniform(0.8));
    let expect = tr.iter().map(|v| psnr(&render(&init, &v.camera, &RenderOptions::scaled(0.8)).color, &v.image)).sum::<f64>() / tr.len() as f64;
    assert!((run.log[0].train_psnr - expect).abs() < 1e-9, "{} vs {expect}", run.log[0].train_psnr);
}

#[test]
fn dense_views_fit_above_30_db() {
    let all = views(200, 12, 32);
    let cfg = TrainConfig { iterations: 2000, ca_interval: 2000, ca_samples: 2, init_count: 400, n_train: 12, ..TrainConfig::default() };
    let init = init_random(cfg.init_count, 2.0, cfg.sh_degree, 0);
    let run = train(&init, &all, &[], &cfg).unwrap();
    let last = run.log.last().unwrap();
    assert!(last.train_psnr > 30.0, "{}", last.train_psnr);
}

// Not reproduced here: with random or surface-sampled initialization, test CA
// rises monotonically over the first 200 iterations on this scene. Kept as
// written so `cargo test -- --ignored` shows the current outcome.
#[test]
#[ignore = "early CA drop is not reproduced on the synthetic scene"]
fn test_ca_drops_early_in_training() {
    let all = views(500, 12, 40);
    let (tr, te) = split(&all, 3);
    let cfg = TrainConfig { iterations: 200, ca_interval: 200, ..TrainConfig::default() };
    let init = init_random(cfg.init_count, cfg.init_extent, cfg.sh_degree, cfg.seed);
    let run = train(&init, &tr, &te, &cfg).unwrap();
    let (first, last) = (&run.log[0], run.log.last().unwrap());
    assert_eq!(last.iteration, 200);
    assert!(last.test_ca.unwrap() < first.test_ca.unwrap(), "{:?} -> {:?}", first.test_ca, last.test_ca);
}
