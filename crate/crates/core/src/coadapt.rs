//! Co-adaptation measurements.
//!
//! The CA score is the per-pixel variance of renders under random Gaussian
//! dropout. This module holds the Monte-Carlo estimator, an exact
//! enumeration over keep-masks for single rays, the first-order small-alpha
//! approximation, and the contributor color-variance (CV) metric.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::image::{GrayImage, Image, Mask};
use crate::model::{logit, Camera, Gaussian, GaussianCloud};
use crate::render::{PreparedView, RenderOptions};
use crate::rng;
use crate::sh::SH_C0;

/// Longest ray accepted by the exact oracle.
pub const MAX_EXACT_RAY: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoadaptError {
    #[error("drop ratio must lie in (0, 1), got {0}")]
    DropRatio(f64),
    #[error("keep probability must lie in (0, 1), got {0}")]
    KeepProb(f64),
    #[error("at least 2 renders are needed for a variance, got {0}")]
    TooFewSamples(usize),
    #[error("ray has {0} entries; exact enumeration is limited to {MAX_EXACT_RAY}")]
    RayTooLong(usize),
}

/// Training dropout `p` to the drop ratio used when measuring CA.
///
/// Dropout-trained models are already robust to losing a fraction `p`, so the
/// measurement discards half of the remaining fraction on top of it.
pub fn effective_drop_ratio(train_p: f64) -> f64 {
    1.0 - (1.0 - train_p) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaSettings {
    pub drop_ratio: f64,
    /// Number of dropout renders.
    pub samples: usize,
    /// Accumulated-alpha threshold defining the commonly visible region.
    /// `None` keeps every pixel.
    pub threshold: Option<f64>,
    pub seed: u64,
}

impl CaSettings {
    pub const DEFAULT_SAMPLES: usize = 10;
    pub const DEFAULT_THRESHOLD: f64 = 0.8;

    pub fn new(drop_ratio: f64, seed: u64) -> Self {
        Self {
            drop_ratio,
            samples: Self::DEFAULT_SAMPLES,
            threshold: Some(Self::DEFAULT_THRESHOLD),
            seed,
        }
    }

    pub fn with_samples(mut self, samples: usize) -> Self {
        self.samples = samples;
        self
    }

    pub fn with_threshold(mut self, threshold: Option<f64>) -> Self {
        self.threshold = threshold;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaReport {
    /// Mean of `variance_map` over `common_mask`; `None` when the region is empty.
    pub ca: Option<f64>,
    /// Channel-averaged unbiased variance per pixel.
    pub variance_map: GrayImage,
    pub common_mask: Mask,
    pub samples: usize,
    pub drop_ratio: f64,
    pub seed: u64,
}

impl CaReport {
    pub fn visible_fraction(&self) -> f64 {
        if self.common_mask.is_empty() {
            return 0.0;
        }
        self.common_mask.count() as f64 / self.common_mask.len() as f64
    }
}

/// Monte-Carlo CA score of one view.
///
/// Render `k` uses keep-mask stream `k` of `settings.seed`, so the report does
/// not depend on evaluation order.
pub fn ca_score(cloud: &GaussianCloud, cam: &Camera, settings: &CaSettings) -> Result<CaReport, CoadaptError> {
    let CaSettings { drop_ratio, samples, threshold, seed } = *settings;
    if !(drop_ratio > 0.0 && drop_ratio < 1.0) {
        return Err(CoadaptError::DropRatio(drop_ratio));
    }
    if samples < 2 {
        return Err(CoadaptError::TooFewSamples(samples));
    }
    let (w, h) = (cam.width, cam.height);
    let n = w * h;
    let mut mean = vec![[0.0f64; 3]; n];
    let mut m2 = vec![[0.0f64; 3]; n];
    let mut common = vec![true; n];

    for k in 0..samples {
        let mut r = rng::stream(seed, rng::CA_MASK, k as u64);
        let keep = rng::keep_flags(cloud.len(), drop_ratio, &mut r);
        let out = PreparedView::new(cloud, cam, &RenderOptions::masked(&keep)).render(false);
        let count = (k + 1) as f64;
        for p in 0..n {
            let c = out.color.pixels[p];
            for ch in 0..3 {
                let delta = c[ch] - mean[p][ch];
                mean[p][ch] += delta / count;
                m2[p][ch] += delta * (c[ch] - mean[p][ch]);
            }
            if let Some(t) = threshold {
                common[p] &= out.alpha.pixels[p] > t;
            }
        }
    }

    let denom = (samples - 1) as f64;
    let variance: Vec<f64> = m2.iter().map(|v| (v[0] + v[1] + v[2]) / (3.0 * denom)).collect();
    let visible: Vec<f64> = variance.iter().zip(&common).filter(|(_, &c)| c).map(|(&v, _)| v).collect();
    let ca = (!visible.is_empty()).then(|| visible.iter().sum::<f64>() / visible.len() as f64);
    Ok(CaReport {
        ca,
        variance_map: Image::from_pixels(w, h, variance),
        common_mask: Image::from_pixels(w, h, common),
        samples,
        drop_ratio,
        seed,
    })
}

/// One Gaussian's contribution to a ray, front to back.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayEntry {
    pub color: [f64; 3],
    /// Opacity after falloff, in `[0, 1)`.
    pub alpha: f64,
}

impl RayEntry {
    pub fn gray(value: f64, alpha: f64) -> Self {
        Self { color: [value; 3], alpha }
    }
}

/// Depth-sorted contributions to one pixel.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RaySlice {
    pub entries: Vec<RayEntry>,
}

impl RaySlice {
    pub fn new(entries: Vec<RayEntry>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Same colors with every alpha multiplied by `t`.
    pub fn scaled_alpha(&self, t: f64) -> Self {
        Self::new(self.entries.iter().map(|e| RayEntry { alpha: e.alpha * t, ..*e }).collect())
    }

    /// Front-to-back composite of the entries whose bit is set in `mask`.
    pub fn composite(&self, mask: u32) -> [f64; 3] {
        let mut color = [0.0; 3];
        let mut t = 1.0;
        for (i, e) in self.entries.iter().enumerate() {
            if mask >> i & 1 == 0 {
                continue;
            }
            for ch in 0..3 {
                color[ch] += e.color[ch] * e.alpha * t;
            }
            t *= 1.0 - e.alpha;
        }
        color
    }
}

/// Exact distribution moments of a ray's composite under dropout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayMoments {
    pub mean: [f64; 3],
    pub variance: [f64; 3],
}

impl RayMoments {
    pub fn channel_mean_variance(&self) -> f64 {
        self.variance.iter().sum::<f64>() / 3.0
    }
}

/// Mean and variance of the composite over all `2^n` keep-masks.
pub fn exact_pixel_moments(ray: &RaySlice, keep_prob: f64) -> Result<RayMoments, CoadaptError> {
    if !(keep_prob > 0.0 && keep_prob < 1.0) {
        return Err(CoadaptError::KeepProb(keep_prob));
    }
    let n = ray.len();
    if n > MAX_EXACT_RAY {
        return Err(CoadaptError::RayTooLong(n));
    }
    let weight = |mask: u32| {
        let kept = mask.count_ones() as i32;
        keep_prob.powi(kept) * (1.0 - keep_prob).powi(n as i32 - kept)
    };
    let masks = 0..(1u32 << n);
    let mut mean = [0.0; 3];
    for m in masks.clone() {
        let (w, c) = (weight(m), ray.composite(m));
        for ch in 0..3 {
            mean[ch] += w * c[ch];
        }
    }
    let mut variance = [0.0; 3];
    for m in masks {
        let (w, c) = (weight(m), ray.composite(m));
        for ch in 0..3 {
            variance[ch] += w * (c[ch] - mean[ch]).powi(2);
        }
    }
    Ok(RayMoments { mean, variance })
}

/// Exact channel-averaged variance of a ray's composite under dropout.
pub fn exact_pixel_variance(ray: &RaySlice, keep_prob: f64) -> Result<f64, CoadaptError> {
    exact_pixel_moments(ray, keep_prob).map(|m| m.channel_mean_variance())
}

/// Small-alpha approximation `p (1 - p) sum (c_i alpha_i)^2`, channel-averaged.
pub fn first_order_ca(ray: &RaySlice, p_drop: f64) -> f64 {
    let sum: f64 = ray
        .entries
        .iter()
        .map(|e| e.color.iter().map(|c| (c * e.alpha).powi(2)).sum::<f64>() / 3.0)
        .sum();
    p_drop * (1.0 - p_drop) * sum
}

/// Single-pixel scene whose only pixel composites exactly the given ray.
///
/// Entry `i` becomes a huge isotropic Gaussian on the optical axis at depth
/// `1 + i`, so its falloff at the pixel center is exactly one.
pub fn ray_scene(ray: &RaySlice) -> (GaussianCloud, Camera) {
    let gaussians = ray
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let mut g = Gaussian::isotropic(Vector3::new(0.0, 0.0, 1.0 + i as f64), 10.0, 0.5, [0.5; 3], 0);
            g.opacity_logit = logit(e.alpha);
            g.sh[0] = Vector3::from_fn(|ch, _| (e.color[ch] - 0.5) / SH_C0);
            g
        })
        .collect();
    let cloud = GaussianCloud::from_gaussians(gaussians, 0).expect("degree-0 cloud is valid");
    let far = ray.len() as f64 + 10.0;
    let cam = Camera::new(1.0, 1.0, 0.5, 0.5, 1, 1, Matrix3::identity(), Vector3::zeros(), 0.1, far).expect("valid camera");
    (cloud, cam)
}

/// Contributor color variance of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    /// Mean of `map` over covered pixels; `None` when nothing is covered.
    pub cv: Option<f64>,
    pub map: GrayImage,
    /// Pixels with positive total compositing weight.
    pub coverage: Mask,
}

/// Weighted variance of contributor colors with weights `alpha_i * T_i`.
pub fn cv_score(cloud: &GaussianCloud, cam: &Camera, opacity_scale: f64) -> CvReport {
    let out = PreparedView::new(cloud, cam, &RenderOptions::scaled(opacity_scale)).render(true);
    let lists = out.contributors.expect("contributors were requested");
    let mut map = Vec::with_capacity(lists.len());
    let mut coverage = Vec::with_capacity(lists.len());
    for list in &lists {
        let weights = list.iter().map(|c| (c.alpha * c.transmittance, c.color));
        match weighted_color_variance(weights) {
            Some(v) => {
                map.push(v);
                coverage.push(true);
            }
            None => {
                map.push(0.0);
                coverage.push(false);
            }
        }
    }
    let covered: Vec<f64> = map.iter().zip(&coverage).filter(|(_, &c)| c).map(|(&v, _)| v).collect();
    let cv = (!covered.is_empty()).then(|| covered.iter().sum::<f64>() / covered.len() as f64);
    CvReport {
        cv,
        map: Image::from_pixels(out.color.width, out.color.height, map),
        coverage: Image::from_pixels(out.color.width, out.color.height, coverage),
    }
}

/// Channel-averaged weighted variance; `None` when the total weight is zero.
///
/// Weighted incremental update, so a single contributor or identical colors
/// give exactly zero.
pub fn weighted_color_variance(items: impl IntoIterator<Item = (f64, [f64; 3])>) -> Option<f64> {
    let (mut sw, mut mean, mut m2) = (0.0, [0.0; 3], [0.0; 3]);
    for (w, c) in items {
        if !(w > 0.0) {
            continue;
        }
        sw += w;
        for ch in 0..3 {
            let delta = c[ch] - mean[ch];
            mean[ch] += (w / sw) * delta;
            m2[ch] += w * delta * (c[ch] - mean[ch]);
        }
    }
    if !(sw > 0.0) {
        return None;
    }
    let var: f64 = m2.iter().map(|m| (m / sw).max(0.0)).sum();
    Some(var / 3.0)
}
