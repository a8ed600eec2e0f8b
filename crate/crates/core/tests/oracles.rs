//! Monte-Carlo estimators against exact enumeration over keep-masks.

mod common;

use coadapt::coadapt::{ca_score, exact_pixel_variance, first_order_ca, ray_scene, CaSettings, RayEntry, RaySlice};
use coadapt::regularize::{render_with_strategy, Strategy};
use common::{mask_distribution, moments, random_ray, sample_variance_sd};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn ca_score_converges_to_exact_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let k = 4000;
    for case in 0..12u64 {
        let n = rng.random_range(1..=6);
        let ray = random_ray(n, 0.9, &mut rng);
        let drop = rng.random_range(0.2..0.8);
        let (cloud, cam) = ray_scene(&ray);
        let settings = CaSettings::new(drop, case).with_samples(k).with_threshold(None);
        let mc = ca_score(&cloud, &cam, &settings).unwrap().ca.unwrap();
        let (_, var, m4) = moments(&mask_distribution(&ray, 1.0 - drop));
        assert!((var - exact_pixel_variance(&ray, 1.0 - drop).unwrap()).abs() < 1e-12);
        let sd = sample_variance_sd(var, m4, k);
        assert!((mc - var).abs() <= 4.0 * sd + 1e-12, "case {case}: mc {mc} exact {var} sd {sd}");
    }
}

fn duplicated_plane(copies: usize) -> RaySlice {
    RaySlice::new(vec![RayEntry::gray(0.7, 0.99); copies])
}

#[test]
fn duplicated_opaque_plane_has_vanishing_ca() {
    let ray = duplicated_plane(24);
    let (cloud, cam) = ray_scene(&ray);
    let settings = CaSettings::new(0.5, 3).with_samples(50).with_threshold(None);
    let ca = ca_score(&cloud, &cam, &settings).unwrap().ca.unwrap();
    assert!(ca < 1e-6, "{ca}");
}

#[test]
fn more_duplicates_means_less_co_adaptation() {
    // The only large deviation is every copy dropped at once.
    let exact: Vec<f64> = [2, 4, 8, 16].iter().map(|&k| exact_pixel_variance(&duplicated_plane(k), 0.5).unwrap()).collect();
    assert!(exact.windows(2).all(|w| w[1] < w[0]), "{exact:?}");
    let all_dropped = 0.49 * 0.5f64.powi(8) * (1.0 - 0.5f64.powi(8));
    assert!((exact[2] - all_dropped).abs() < 1e-5, "{} vs {all_dropped}", exact[2]);
}

#[test]
fn averaged_masks_converge_to_mask_expectation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..6u64 {
        let ray = random_ray(rng.random_range(1..=8), 0.9, &mut rng);
        let p = rng.random_range(0.1..0.7);
        let (cloud, cam) = ray_scene(&ray);
        let out = render_with_strategy(&cloud, &cam, p, Strategy::AveragedMasks, 2000, case);
        let (mean, var, _) = moments(&mask_distribution(&ray, 1.0 - p));
        let se = (var / 2000.0).sqrt();
        assert!((out.color.pixels[0][0] - mean).abs() <= 3.0 * se + 1e-12, "case {case}");
    }
}

#[test]
fn first_order_error_shrinks_with_alpha() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let errs: Vec<Vec<f64>> = (0..50)
        .map(|_| {
            let ray = random_ray(rng.random_range(1..=10), 0.05, &mut rng);
            [1.0, 0.5, 0.25]
                .iter()
                .map(|&t| {
                    let r = ray.scaled_alpha(t);
                    let exact = exact_pixel_variance(&r, 0.5).unwrap();
                    (first_order_ca(&r, 0.5) - exact).abs() / exact
                })
                .collect()
        })
        .collect();
    let median = |i: usize| {
        let mut v: Vec<f64> = errs.iter().map(|e| e[i]).collect();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    assert!(median(0) > median(1) && median(1) > median(2));
}
