#![allow(dead_code)]

use coadapt::coadapt::{RayEntry, RaySlice};
use coadapt::model::random_rotation;
use coadapt::{Camera, Gaussian, GaussianCloud};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn camera(w: usize, h: usize) -> Camera {
    Camera::look_at(
        Vector3::new(0.3, -0.2, -4.0),
        Vector3::zeros(),
        Vector3::new(0.0, -1.0, 0.0),
        w as f64 * 1.1,
        w,
        h,
        0.1,
        100.0,
    )
    .unwrap()
}

/// Anisotropic Gaussians inside the view of [`camera`].
pub fn random_cloud(n: usize, degree: usize, seed: u64) -> GaussianCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gs = (0..n)
        .map(|_| {
            let mut g = Gaussian::isotropic(
                Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.8..0.8)),
                0.1,
                0.5,
                [0.5; 3],
                degree,
            );
            g.rotation = random_rotation(&mut rng);
            g.log_scale = Vector3::from_fn(|_, _| rng.random_range(-2.6..-1.4));
            g.opacity_logit = rng.random_range(-2.0..2.0);
            for c in g.sh.iter_mut() {
                *c = Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5));
            }
            g
        })
        .collect();
    GaussianCloud::from_gaussians(gs, degree).unwrap()
}

/// Gray ray with `n` entries, alphas in `[alpha_max / 20, alpha_max)`.
pub fn random_ray(n: usize, alpha_max: f64, rng: &mut ChaCha8Rng) -> RaySlice {
    RaySlice::new((0..n).map(|_| RayEntry::gray(rng.random_range(0.0..1.0), rng.random_range(alpha_max / 20.0..alpha_max))).collect())
}

/// Exact distribution of the gray composite under independent keeps:
/// `(probability, value)` for every mask.
pub fn mask_distribution(ray: &RaySlice, keep_prob: f64) -> Vec<(f64, f64)> {
    let n = ray.len();
    (0..1u32 << n)
        .map(|m| {
            let kept = m.count_ones() as i32;
            let p = keep_prob.powi(kept) * (1.0 - keep_prob).powi(n as i32 - kept);
            (p, ray.composite(m)[0])
        })
        .collect()
}

/// Mean, variance and fourth central moment of a discrete distribution.
pub fn moments(dist: &[(f64, f64)]) -> (f64, f64, f64) {
    let mean: f64 = dist.iter().map(|(p, v)| p * v).sum();
    let var: f64 = dist.iter().map(|(p, v)| p * (v - mean).powi(2)).sum();
    let m4: f64 = dist.iter().map(|(p, v)| p * (v - mean).powi(4)).sum();
    (mean, var, m4)
}

/// Standard deviation of the unbiased sample variance over `k` draws.
pub fn sample_variance_sd(var: f64, m4: f64, k: usize) -> f64 {
    let k = k as f64;
    (m4 / k - var * var * (k - 3.0) / (k * (k - 1.0))).max(0.0).sqrt()
}
