//! Mechanisms that suppress co-adaptation during training.
//!
//! Random perturbations are pure functions of `(seed, iteration)` and never
//! touch stored parameters. Only [`opacity_decay`] mutates a cloud.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::ParamGrads;
use crate::knn;
use crate::model::{logit, sigmoid, Camera, GaussianCloud};
use crate::render::{PreparedView, RenderOptions, RenderOutput};
use crate::rng;

/// Opacity range after multiplicative noise or concrete masking.
pub const NOISY_OPACITY_MIN: f64 = 1e-4;
pub const NOISY_OPACITY_MAX: f64 = 0.9999;
pub const NOISY_SCALE_MIN: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegularizeError {
    #[error("position noise needs at least two Gaussians to define neighbor distances")]
    NoNeighbors,
    #[error("density rates need more than {k} Gaussians, got {count}")]
    TooFewForDensity { k: usize, count: usize },
    #[error("noise sigma must be finite and non-negative, got {0}")]
    Sigma(f64),
}

/// Bernoulli keep flags for one training iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub keep: Vec<bool>,
    pub p: f64,
    pub seed: u64,
    pub iteration: u64,
}

impl DropoutMask {
    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// Drop each of `n` Gaussians independently with probability `p`.
pub fn sample_dropout_mask(n: usize, p: f64, seed: u64, iteration: u64) -> DropoutMask {
    assert!((0.0..1.0).contains(&p), "dropout probability must lie in [0, 1), got {p}");
    let mut r = rng::stream(seed, rng::DROPOUT, iteration);
    DropoutMask {
        keep: rng::keep_flags(n, p, &mut r),
        p,
        seed,
        iteration,
    }
}

/// Per-Gaussian dropout with individual probabilities.
pub fn sample_dropout_mask_rates(rates: &[f64], seed: u64, iteration: u64) -> Vec<bool> {
    let mut r = rng::stream(seed, rng::DROPOUT, iteration);
    rates.iter().map(|&p| r.random::<f64>() >= p).collect()
}

/// Opacity multiplier at inference for a model trained with dropout `p`.
pub fn test_time_opacity_scale(p: f64) -> f64 {
    1.0 - p
}

/// How a dropout-trained model is rendered at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// One random dropout render.
    SingleMask,
    /// Pixel-wise mean of several random dropout renders.
    AveragedMasks,
    /// Every Gaussian, with opacity scaled by `1 - p`.
    ScaledOpacity,
}

impl Strategy {
    pub const DEFAULT_AVERAGE_COUNT: usize = 5;

    pub fn letter(self) -> char {
        match self {
            Strategy::SingleMask => 'A',
            Strategy::AveragedMasks => 'B',
            Strategy::ScaledOpacity => 'C',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        match c.to_ascii_uppercase() {
            'A' => Some(Strategy::SingleMask),
            'B' => Some(Strategy::AveragedMasks),
            'C' => Some(Strategy::ScaledOpacity),
            _ => None,
        }
    }
}

/// Render with one of the inference strategies. `average_count` is used
/// only by [`Strategy::AveragedMasks`].
pub fn render_with_strategy(
    cloud: &GaussianCloud,
    cam: &Camera,
    p: f64,
    strategy: Strategy,
    average_count: usize,
    seed: u64,
) -> RenderOutput {
    assert!((0.0..1.0).contains(&p), "dropout probability must lie in [0, 1), got {p}");
    let masked = |b: u64| {
        let mut r = rng::stream(seed, rng::STRATEGY, b);
        let keep = rng::keep_flags(cloud.len(), p, &mut r);
        PreparedView::new(cloud, cam, &RenderOptions::masked(&keep)).render(false)
    };
    match strategy {
        Strategy::SingleMask => masked(0),
        Strategy::ScaledOpacity => {
            PreparedView::new(cloud, cam, &RenderOptions::scaled(test_time_opacity_scale(p))).render(false)
        }
        Strategy::AveragedMasks => {
            assert!(average_count >= 1, "averaging needs at least one render");
            let mut acc = masked(0);
            for b in 1..average_count {
                let next = masked(b as u64);
                let k = (b + 1) as f64;
                for (m, x) in acc.color.pixels.iter_mut().zip(&next.color.pixels) {
                    for ch in 0..3 {
                        m[ch] += (x[ch] - m[ch]) / k;
                    }
                }
                for (m, x) in acc.alpha.pixels.iter_mut().zip(&next.alpha.pixels) {
                    *m += (x - *m) / k;
                }
                for (m, x) in acc.depth.pixels.iter_mut().zip(&next.depth.pixels) {
                    *m += (x - *m) / k;
                }
            }
            acc
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseTarget {
    Opacity,
    Scale,
    Position,
    Sh,
}

impl NoiseTarget {
    pub fn name(self) -> &'static str {
        match self {
            NoiseTarget::Opacity => "opacity",
            NoiseTarget::Scale => "scale",
            NoiseTarget::Position => "position",
            NoiseTarget::Sh => "sh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "opacity" => Some(NoiseTarget::Opacity),
            "scale" => Some(NoiseTarget::Scale),
            "position" => Some(NoiseTarget::Position),
            "sh" => Some(NoiseTarget::Sh),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    Multiplicative,
    Additive,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub target: NoiseTarget,
    pub sigma: f64,
}

impl NoiseSpec {
    pub fn new(target: NoiseTarget, sigma: f64) -> Self {
        Self { target, sigma }
    }

    pub fn mode(&self) -> NoiseMode {
        match self.target {
            NoiseTarget::Position => NoiseMode::Additive,
            _ => NoiseMode::Multiplicative,
        }
    }
}

/// A transient copy of a cloud plus the factors that map gradients taken at
/// the copy back to the stored parameters. The perturbation itself is held
/// constant.
#[derive(Debug, Clone)]
pub struct Perturbed {
    pub cloud: GaussianCloud,
    /// `d logit' / d logit` per Gaussian.
    opacity_factor: Option<Vec<f64>>,
    /// `d c' / d c` per Gaussian and SH coefficient.
    sh_factor: Option<Vec<Vec<f64>>>,
}

impl Perturbed {
    pub fn identity(cloud: &GaussianCloud) -> Self {
        Self {
            cloud: cloud.clone(),
            opacity_factor: None,
            sh_factor: None,
        }
    }

    pub fn pull_back(&self, grads: &mut ParamGrads) {
        if let Some(f) = &self.opacity_factor {
            for (g, f) in grads.gaussians.iter_mut().zip(f) {
                g.opacity_logit *= f;
            }
        }
        if let Some(f) = &self.sh_factor {
            for (g, f) in grads.gaussians.iter_mut().zip(f) {
                for (c, f) in g.sh.iter_mut().zip(f) {
                    *c *= *f;
                }
            }
        }
    }
}

/// Opacity `o` replaced by `m * o` clamped to the noisy range, with `m`
/// treated as a constant. Returns the new logit and `d logit' / d logit`.
fn rescale_opacity(logit_value: f64, m: f64) -> (f64, f64) {
    let o = sigmoid(logit_value);
    let o2 = (o * m).clamp(NOISY_OPACITY_MIN, NOISY_OPACITY_MAX);
    // d logit(m o) / d logit(o) = (1 - o) / (1 - m o), using the clamped value.
    (logit(o2), (1.0 - o) / (1.0 - o2))
}

/// Perturb one parameter group of `cloud` for one iteration.
pub fn apply_noise(cloud: &GaussianCloud, spec: &NoiseSpec, seed: u64, iteration: u64) -> Result<Perturbed, RegularizeError> {
    let nn = match spec.target {
        NoiseTarget::Position if spec.sigma > 0.0 => {
            Some(knn::nearest_neighbor_distances(&cloud.positions()).ok_or(RegularizeError::NoNeighbors)?)
        }
        _ => None,
    };
    apply_noise_with_nn(cloud, spec, seed, iteration, nn.as_deref())
}

/// [`apply_noise`] with precomputed nearest-neighbor distances for position
/// noise, so callers can refresh them on their own schedule.
pub fn apply_noise_with_nn(
    cloud: &GaussianCloud,
    spec: &NoiseSpec,
    seed: u64,
    iteration: u64,
    nn: Option<&[f64]>,
) -> Result<Perturbed, RegularizeError> {
    if !(spec.sigma >= 0.0 && spec.sigma.is_finite()) {
        return Err(RegularizeError::Sigma(spec.sigma));
    }
    if spec.sigma == 0.0 {
        return Ok(Perturbed::identity(cloud));
    }
    let normal = Normal::new(0.0, spec.sigma).expect("sigma validated");
    let mut r = rng::stream(seed, rng::NOISE, iteration);
    let mut out = Perturbed::identity(cloud);
    match spec.target {
        NoiseTarget::Opacity => {
            let mut factors = Vec::with_capacity(cloud.len());
            for g in &mut out.cloud.gaussians {
                let eps: f64 = normal.sample(&mut r);
                let (l, f) = rescale_opacity(g.opacity_logit, 1.0 + eps);
                g.opacity_logit = l;
                factors.push(f);
            }
            out.opacity_factor = Some(factors);
        }
        NoiseTarget::Scale => {
            for g in &mut out.cloud.gaussians {
                let eps: f64 = normal.sample(&mut r);
                // Noise is held constant, so d log s' / d log s = 1.
                g.log_scale = g.log_scale.map(|ls| (ls.exp() * (1.0 + eps)).max(NOISY_SCALE_MIN).ln());
            }
        }
        NoiseTarget::Sh => {
            let mut factors = Vec::with_capacity(cloud.len());
            for g in &mut out.cloud.gaussians {
                let f: Vec<f64> = g
                    .sh
                    .iter_mut()
                    .map(|c| {
                        let m = 1.0 + normal.sample(&mut r);
                        *c *= m;
                        m
                    })
                    .collect();
                factors.push(f);
            }
            out.sh_factor = Some(factors);
        }
        NoiseTarget::Position => {
            let nn = nn.ok_or(RegularizeError::NoNeighbors)?;
            assert_eq!(nn.len(), cloud.len(), "neighbor distances must match cloud size");
            for (g, d) in out.cloud.gaussians.iter_mut().zip(nn) {
                let eta = Vector3::from_fn(|_, _| normal.sample(&mut r));
                g.position += eta * *d;
            }
        }
    }
    Ok(out)
}

/// Uniform sample in the open interval (0, 1).
fn open_uniform(r: &mut impl Rng) -> f64 {
    ((r.random::<u64>() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

/// Binary Concrete relaxation of a Bernoulli(`p`) drop indicator at noise `u`.
pub fn concrete_relaxation(p: f64, u: f64, tau: f64) -> f64 {
    sigmoid((logit(p) + logit(u)) / tau)
}

/// `d z / d p` of [`concrete_relaxation`].
pub fn concrete_relaxation_dp(p: f64, u: f64, tau: f64) -> f64 {
    let z = concrete_relaxation(p, u, tau);
    z * (1.0 - z) / (tau * p * (1.0 - p))
}

/// Soft drop indicators `z_i` in (0, 1), one per Gaussian.
pub fn concrete_dropout_mask(p: &[f64], tau: f64, seed: u64, iteration: u64) -> Vec<f64> {
    assert!(tau > 0.0, "temperature must be positive");
    concrete_noise(p.len(), seed, iteration)
        .into_iter()
        .zip(p)
        .map(|(u, &p)| concrete_relaxation(p, u, tau))
        .collect()
}

fn concrete_noise(n: usize, seed: u64, iteration: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, rng::CONCRETE, iteration);
    (0..n).map(|_| open_uniform(&mut r)).collect()
}

/// A cloud with opacities multiplied by `1 - z_i`.
#[derive(Debug, Clone)]
pub struct ConcreteApplied {
    pub perturbed: Perturbed,
    pub z: Vec<f64>,
    /// `d logit'_i / d z_i`.
    pub dlogit_dz: Vec<f64>,
}

impl ConcreteApplied {
    /// Gradient with respect to the drop logits `rho_i`, where
    /// `p_i = sigmoid(rho_i)`, given `dL/d logit'` at the perturbed cloud.
    pub fn rate_logit_grads(&self, dl_dlogit: impl IntoIterator<Item = f64>, tau: f64) -> Vec<f64> {
        dl_dlogit
            .into_iter()
            .zip(self.z.iter().zip(&self.dlogit_dz))
            .map(|(g, (&z, &d))| g * d * z * (1.0 - z) / tau)
            .collect()
    }
}

pub fn apply_concrete_dropout(cloud: &GaussianCloud, p: &[f64], tau: f64, seed: u64, iteration: u64) -> ConcreteApplied {
    assert_eq!(p.len(), cloud.len(), "one rate per Gaussian");
    let z = concrete_dropout_mask(p, tau, seed, iteration);
    let mut perturbed = Perturbed::identity(cloud);
    let mut factors = Vec::with_capacity(cloud.len());
    let mut dlogit_dz = Vec::with_capacity(cloud.len());
    for (g, &z) in perturbed.cloud.gaussians.iter_mut().zip(&z) {
        let o = sigmoid(g.opacity_logit);
        let (l, f) = rescale_opacity(g.opacity_logit, 1.0 - z);
        let o2 = sigmoid(l);
        let inside = o * (1.0 - z) > NOISY_OPACITY_MIN && o * (1.0 - z) < NOISY_OPACITY_MAX;
        g.opacity_logit = l;
        factors.push(f);
        dlogit_dz.push(if inside { -o / (o2 * (1.0 - o2)) } else { 0.0 });
    }
    perturbed.opacity_factor = Some(factors);
    ConcreteApplied { perturbed, z, dlogit_dz }
}

pub const DENSITY_DEFAULT_K: usize = 8;
pub const DENSITY_DEFAULT_LO: f64 = 0.2;
pub const DENSITY_DEFAULT_HI: f64 = 0.5;

/// Dropout rates growing linearly with local density: sparsest Gaussian gets
/// `lo`, densest gets `hi`. Density is the inverse mean distance to the `k`
/// nearest neighbors. Equal densities give every Gaussian `(lo + hi) / 2`.
pub fn density_based_rates(cloud: &GaussianCloud, k: usize, lo: f64, hi: f64) -> Result<Vec<f64>, RegularizeError> {
    let count = cloud.len();
    let mean_dist = knn::mean_knn_distances(&cloud.positions(), k).ok_or(RegularizeError::TooFewForDensity { k, count })?;
    let density: Vec<f64> = mean_dist.iter().map(|d| 1.0 / d.max(1e-12)).collect();
    let min = density.iter().copied().fold(f64::INFINITY, f64::min);
    let max = density.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max - min <= 1e-9 * max {
        return Ok(vec![(lo + hi) / 2.0; count]);
    }
    Ok(density.iter().map(|d| lo + (hi - lo) * (d - min) / (max - min)).collect())
}

/// Multiply every activated opacity by `factor`.
pub fn opacity_decay(cloud: &mut GaussianCloud, factor: f64) {
    assert!(factor > 0.0 && factor <= 1.0, "decay factor must lie in (0, 1], got {factor}");
    if factor == 1.0 {
        return;
    }
    for g in &mut cloud.gaussians {
        g.opacity_logit = logit(sigmoid(g.opacity_logit) * factor);
    }
}

/// Copy of `cloud` with opacity `i` multiplied by `scale[i]`, for inference
/// with per-Gaussian dropout rates.
pub fn scale_opacities(cloud: &GaussianCloud, scale: &[f64]) -> GaussianCloud {
    assert_eq!(scale.len(), cloud.len(), "one scale per Gaussian");
    let mut out = cloud.clone();
    for (g, s) in out.gaussians.iter_mut().zip(scale) {
        g.opacity_logit = logit(sigmoid(g.opacity_logit) * s);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Gaussian;

    fn grid_cloud() -> GaussianCloud {
        let gs = (0..27)
            .map(|i| Gaussian::isotropic(Vector3::new((i % 3) as f64, (i / 3 % 3) as f64, (i / 9) as f64), 0.1, 0.5, [0.5; 3], 1))
            .collect();
        GaussianCloud::from_gaussians(gs, 1).unwrap()
    }

    #[test]
    fn dropout_mask_examples() {
        assert!(sample_dropout_mask(100, 0.0, 3, 4).keep.iter().all(|&k| k));
        assert_eq!(sample_dropout_mask(50, 0.3, 1, 2), sample_dropout_mask(50, 0.3, 1, 2));
        assert_ne!(sample_dropout_mask(50, 0.3, 1, 2).keep, sample_dropout_mask(50, 0.3, 1, 3).keep);
        let n = 100_000;
        let m = sample_dropout_mask(n, 0.2, 9, 0);
        let frac = m.kept() as f64 / n as f64;
        let sd = (0.2f64 * 0.8 / n as f64).sqrt();
        assert!((frac - 0.8).abs() < 3.0 * sd, "{frac}");
    }

    #[test]
    fn test_time_scale_examples() {
        assert_eq!(test_time_opacity_scale(0.2), 0.8);
        assert_eq!(test_time_opacity_scale(0.0), 1.0);
        assert_eq!(test_time_opacity_scale(0.5), 0.5);
    }

    #[test]
    fn zero_sigma_is_identity() {
        let cloud = grid_cloud();
        for t in [NoiseTarget::Opacity, NoiseTarget::Scale, NoiseTarget::Position, NoiseTarget::Sh] {
            let p = apply_noise(&cloud, &NoiseSpec::new(t, 0.0), 1, 1).unwrap();
            assert_eq!(p.cloud, cloud);
        }
    }

    #[test]
    fn opacity_clamp_floor() {
        let (l, _) = rescale_opacity(0.0, 0.0);
        assert!((sigmoid(l) - NOISY_OPACITY_MIN).abs() < 1e-15);
        let (l, _) = rescale_opacity(3.0, 5.0);
        assert!((sigmoid(l) - NOISY_OPACITY_MAX).abs() < 1e-12);
    }

    #[test]
    fn opacity_noise_factor_matches_finite_difference() {
        for (l, m) in [(-1.0, 1.3), (0.5, 0.7), (2.0, 1.02)] {
            let (_, f) = rescale_opacity(l, m);
            let h = 1e-6;
            let fd = (rescale_opacity(l + h, m).0 - rescale_opacity(l - h, m).0) / (2.0 * h);
            assert!((f - fd).abs() < 1e-7, "{f} {fd}");
        }
    }

    #[test]
    fn position_noise_needs_neighbors() {
        let single = GaussianCloud::from_gaussians(vec![Gaussian::isotropic(Vector3::zeros(), 1.0, 0.5, [0.5; 3], 0)], 0).unwrap();
        let spec = NoiseSpec::new(NoiseTarget::Position, 0.1);
        assert_eq!(apply_noise(&single, &spec, 0, 0).unwrap_err(), RegularizeError::NoNeighbors);
        assert_eq!(spec.mode(), NoiseMode::Additive);
        assert_eq!(NoiseSpec::new(NoiseTarget::Sh, 0.1).mode(), NoiseMode::Multiplicative);
    }

    #[test]
    fn position_noise_scales_with_neighbor_distance() {
        let cloud = grid_cloud();
        let sigma = 0.3;
        let spec = NoiseSpec::new(NoiseTarget::Position, sigma);
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut n = 0.0;
        for it in 0..400 {
            let p = apply_noise(&cloud, &spec, 5, it).unwrap();
            for (a, b) in p.cloud.gaussians.iter().zip(&cloud.gaussians) {
                for d in (a.position - b.position).iter() {
                    sum += d;
                    sq += d * d;
                    n += 1.0;
                }
            }
        }
        let sd = (sq / n - (sum / n).powi(2)).sqrt();
        // Standard error of a sample standard deviation is about sd / sqrt(2n).
        assert!((sd - sigma).abs() < 3.0 * sigma / (2.0 * n).sqrt(), "{sd}");
    }

    #[test]
    fn concrete_examples() {
        assert_eq!(concrete_relaxation(0.5, 0.5, 0.1), 0.5);
        assert!(concrete_relaxation(0.3, 0.9, 1e-3) > 1.0 - 1e-12);
        assert!(concrete_relaxation(0.3, 0.4, 1e-3) < 1e-12);
        for (p, u, tau) in [(0.3, 0.6, 0.1), (0.5, 0.45, 0.5), (0.2, 0.85, 1.0)] {
            let h = 1e-7;
            let fd = (concrete_relaxation(p + h, u, tau) - concrete_relaxation(p - h, u, tau)) / (2.0 * h);
            let a = concrete_relaxation_dp(p, u, tau);
            assert!((a - fd).abs() / a.abs().max(fd.abs()) < 1e-4, "{a} {fd}");
        }
    }

    #[test]
    fn concrete_mean_matches_sampling_oracle() {
        let p = vec![0.3; 20_000];
        let z = concrete_dropout_mask(&p, 0.1, 3, 0);
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        // Independent Monte-Carlo of the same formula with a different generator.
        use rand::SeedableRng;
        let mut r = rand_chacha::ChaCha20Rng::seed_from_u64(77);
        let oracle = (0..20_000).map(|_| concrete_relaxation(0.3, open_uniform(&mut r), 0.1)).sum::<f64>() / 20_000.0;
        assert!((mean - oracle).abs() < 0.015, "{mean} {oracle}");
    }

    #[test]
    fn density_rates_examples() {
        let mut gs = Vec::new();
        for i in 0..30 {
            let t = i as f64 * 0.37;
            gs.push(Gaussian::isotropic(Vector3::new(t.sin() * 0.05, t.cos() * 0.05, (i as f64) * 0.003), 0.01, 0.5, [0.5; 3], 0));
        }
        for i in 0..30 {
            let t = i as f64 * 0.91;
            gs.push(Gaussian::isotropic(Vector3::new(t.sin() * 5.0, t.cos() * 5.0, i as f64 * 0.3 - 4.0), 0.01, 0.5, [0.5; 3], 0));
        }
        let cloud = GaussianCloud::from_gaussians(gs, 0).unwrap();
        let r = density_based_rates(&cloud, 8, 0.2, 0.5).unwrap();
        let tight = r[..30].iter().sum::<f64>() / 30.0;
        let halo = r[30..].iter().sum::<f64>() / 30.0;
        assert!(tight > 0.45 && halo < 0.25, "{tight} {halo}");
        assert!(r.iter().all(|&v| (0.2..=0.5).contains(&v)));
        let flat = density_based_rates(&grid_cloud_periodic(), 4, 0.2, 0.5).unwrap();
        assert!(flat.iter().all(|&v| v == 0.35));
        let same = density_based_rates(&cloud, 8, 0.3, 0.3).unwrap();
        assert!(same.iter().all(|&v| (v - 0.3).abs() < 1e-15));
        assert!(density_based_rates(&grid_cloud(), 27, 0.2, 0.5).is_err());
    }

    // Points on a circle: every point has the same neighbor distances.
    fn grid_cloud_periodic() -> GaussianCloud {
        let gs = (0..24)
            .map(|i| {
                let t = i as f64 * std::f64::consts::TAU / 24.0;
                Gaussian::isotropic(Vector3::new(t.cos(), t.sin(), 0.0), 0.1, 0.5, [0.5; 3], 0)
            })
            .collect();
        GaussianCloud::from_gaussians(gs, 0).unwrap()
    }

    #[test]
    fn opacity_decay_examples() {
        let mut cloud = grid_cloud();
        let before = cloud.clone();
        opacity_decay(&mut cloud, 1.0);
        assert_eq!(cloud, before);
        opacity_decay(&mut cloud, 0.995);
        assert!((cloud.gaussians[0].opacity() - 0.4975).abs() < 1e-12);
        for _ in 0..99 {
            opacity_decay(&mut cloud, 0.995);
        }
        assert!((cloud.gaussians[0].opacity() - 0.5 * 0.995f64.powi(100)).abs() < 1e-6);
    }
}
