//! Photometric optimization of a Gaussian cloud against posed images.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coadapt::{ca_score, effective_drop_ratio, CaSettings};
use crate::grad::ParamGrads;
use crate::image::RgbImage;
use crate::knn;
use crate::metrics::{psnr, ssim_with_grad};
use crate::model::{logit, sigmoid, Camera, Gaussian, GaussianCloud};
use crate::regularize::{
    apply_concrete_dropout, apply_noise_with_nn, density_based_rates, opacity_decay, sample_dropout_mask,
    sample_dropout_mask_rates, scale_opacities, test_time_opacity_scale, NoiseSpec, NoiseTarget, Perturbed,
    RegularizeError,
};
use crate::render::{PreparedView, RenderOptions};
use crate::scene::{InitMode, SplitProtocol};

/// `(1 - lambda) * mean L1 + lambda * (1 - SSIM) / 2` and its gradient with
/// respect to `rendered`.
pub fn photometric_loss(rendered: &RgbImage, target: &RgbImage, lambda_ssim: f64) -> (f64, RgbImage) {
    assert!(rendered.same_shape(target), "image shapes differ");
    let n = (rendered.len() * 3) as f64;
    let mut l1 = 0.0;
    let mut grad = rendered.map(|_| [0.0; 3]);
    for ((g, r), t) in grad.pixels.iter_mut().zip(&rendered.pixels).zip(&target.pixels) {
        for ch in 0..3 {
            let d = r[ch] - t[ch];
            l1 += d.abs();
            let sign = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            g[ch] = (1.0 - lambda_ssim) * sign / n;
        }
    }
    let mut loss = (1.0 - lambda_ssim) * l1 / n;
    if lambda_ssim > 0.0 {
        let (s, sg) = ssim_with_grad(rendered, target, true);
        loss += lambda_ssim * (1.0 - s) / 2.0;
        for (g, d) in grad.pixels.iter_mut().zip(&sg.expect("gradient requested").pixels) {
            for ch in 0..3 {
                g[ch] -= lambda_ssim / 2.0 * d[ch];
            }
        }
    }
    (loss, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropoutMode {
    /// One dropout probability for every Gaussian.
    Uniform,
    /// Rates from local density, fixed at the start of training.
    Density,
    /// Learned per-Gaussian rates through a Concrete relaxation.
    Concrete,
}

/// Training configuration. Field names double as keys of the flat JSON
/// config file; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr_position: f64,
    pub lr_rotation: f64,
    pub lr_log_scale: f64,
    pub lr_opacity: f64,
    pub lr_sh_dc: f64,
    pub lr_sh_rest: f64,
    pub lambda_ssim: f64,
    pub dropout_p: f64,
    pub dropout_mode: DropoutMode,
    pub concrete_tau: f64,
    pub lr_concrete: f64,
    pub density_k: usize,
    pub density_lo: f64,
    pub density_hi: f64,
    pub noise_target: Option<NoiseTarget>,
    pub noise_sigma: f64,
    pub decay_factor: f64,
    /// Iterations between log records; the first and last iteration are
    /// always logged.
    pub ca_interval: usize,
    pub ca_samples: usize,
    pub ca_threshold: f64,
    /// Number of training views taken from the dataset.
    pub n_train: usize,
    pub split: SplitProtocol,
    pub init_mode: InitMode,
    pub init_count: usize,
    /// Edge of the cube sampled by random initialization.
    pub init_extent: f64,
    /// Position jitter of perturbed ground-truth initialization.
    pub init_jitter: f64,
    pub sh_degree: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 600,
            lr_position: 2e-3,
            lr_rotation: 5e-3,
            lr_log_scale: 1e-2,
            lr_opacity: 5e-2,
            lr_sh_dc: 2e-2,
            lr_sh_rest: 1e-3,
            lambda_ssim: 0.2,
            dropout_p: 0.0,
            dropout_mode: DropoutMode::Uniform,
            concrete_tau: 0.1,
            lr_concrete: 1e-2,
            density_k: crate::regularize::DENSITY_DEFAULT_K,
            density_lo: crate::regularize::DENSITY_DEFAULT_LO,
            density_hi: crate::regularize::DENSITY_DEFAULT_HI,
            noise_target: None,
            noise_sigma: 0.0,
            decay_factor: 1.0,
            ca_interval: 100,
            ca_samples: CaSettings::DEFAULT_SAMPLES,
            ca_threshold: CaSettings::DEFAULT_THRESHOLD,
            n_train: 3,
            split: SplitProtocol::EveryKth,
            init_mode: InitMode::Random,
            init_count: 800,
            init_extent: 2.0,
            init_jitter: 0.05,
            sh_degree: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Every key accepted in a config file.
    pub fn keys() -> Vec<String> {
        match serde_json::to_value(Self::default()) {
            Ok(serde_json::Value::Object(map)) => map.keys().cloned().collect(),
            _ => unreachable!("config serializes to an object"),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        if self.iterations < 1 {
            return bad("iterations must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.lambda_ssim) {
            return bad(format!("lambda_ssim must lie in [0, 1], got {}", self.lambda_ssim));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p must lie in [0, 1), got {}", self.dropout_p));
        }
        if self.dropout_mode == DropoutMode::Concrete && !(self.dropout_p > 0.0 && self.concrete_tau > 0.0) {
            return bad("concrete dropout needs dropout_p > 0 and concrete_tau > 0".into());
        }
        if self.dropout_mode == DropoutMode::Density
            && !(0.0 <= self.density_lo && self.density_lo <= self.density_hi && self.density_hi < 1.0)
        {
            return bad("density rates need 0 <= density_lo <= density_hi < 1".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay_factor must lie in (0, 1], got {}", self.decay_factor));
        }
        if self.ca_interval < 1 || self.ca_samples < 2 {
            return bad("ca_interval must be >= 1 and ca_samples >= 2".into());
        }
        if self.init_count < 1 || !(self.init_extent > 0.0) || !(self.init_jitter >= 0.0) {
            return bad("init_count must be >= 1, init_extent > 0 and init_jitter >= 0".into());
        }
        if self.sh_degree > crate::sh::MAX_SH_DEGREE {
            return bad(format!("sh_degree must be at most {}", crate::sh::MAX_SH_DEGREE));
        }
        let lrs = [self.lr_position, self.lr_rotation, self.lr_log_scale, self.lr_opacity, self.lr_sh_dc, self.lr_sh_rest, self.lr_concrete];
        if lrs.iter().any(|lr| !(*lr >= 0.0)) {
            return bad("learning rates must be >= 0".into());
        }
        Ok(())
    }

    fn noise(&self) -> Option<NoiseSpec> {
        self.noise_target.filter(|_| self.noise_sigma > 0.0).map(|t| NoiseSpec::new(t, self.noise_sigma))
    }

    fn uses_dropout(&self) -> bool {
        self.dropout_p > 0.0 || (self.dropout_mode == DropoutMode::Density && self.density_hi > 0.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("at least one training view is required")]
    NoTrainViews,
    #[error("training diverged at iteration {iteration}: {what}")]
    Diverged { iteration: usize, what: String },
    #[error(transparent)]
    Regularize(#[from] RegularizeError),
}

/// A posed ground-truth image.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub camera: Camera,
    pub image: RgbImage,
}

/// One log row. CA values are `None` when no view had a defined score.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub iteration: usize,
    pub train_loss: f64,
    pub train_psnr: f64,
    pub test_psnr: Option<f64>,
    pub train_ca: Option<f64>,
    pub test_ca: Option<f64>,
    pub gaussian_count: usize,
}

impl TrainRecord {
    pub const COLUMNS: [&'static str; 7] = ["iteration", "train_loss", "train_psnr", "test_psnr", "train_ca", "test_ca", "gaussian_count"];
}

/// How opacities are scaled for inference.
#[derive(Debug, Clone, PartialEq)]
pub enum InferenceScale {
    Uniform(f64),
    PerGaussian(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    /// Trained parameters, without inference scaling.
    pub cloud: GaussianCloud,
    pub log: Vec<TrainRecord>,
    pub inference: InferenceScale,
    /// Drop probability used for CA measurement before correction.
    pub train_p: f64,
    /// Final per-Gaussian rates for density or concrete dropout.
    pub rates: Option<Vec<f64>>,
}

impl TrainRun {
    /// Cloud to render at inference, with dropout scaling baked in.
    pub fn inference_cloud(&self) -> GaussianCloud {
        inference_cloud(&self.cloud, &self.inference)
    }
}

fn inference_cloud(cloud: &GaussianCloud, scale: &InferenceScale) -> GaussianCloud {
    match scale {
        InferenceScale::Uniform(s) if *s == 1.0 => cloud.clone(),
        InferenceScale::Uniform(s) => scale_opacities(cloud, &vec![*s; cloud.len()]),
        InferenceScale::PerGaussian(s) => scale_opacities(cloud, s),
    }
}

/// Adam with per-Gaussian step counts; Gaussians outside the update set
/// keep their parameters and moments untouched.
struct SparseAdam {
    stride: usize,
    lr: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: Vec<u32>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-15;

impl SparseAdam {
    fn new(cloud: &GaussianCloud, cfg: &TrainConfig) -> Self {
        let stride = Gaussian::param_count(cloud.sh_degree);
        let mut lr = vec![cfg.lr_sh_rest; stride];
        lr[0..3].fill(cfg.lr_position);
        lr[3..7].fill(cfg.lr_rotation);
        lr[7..10].fill(cfg.lr_log_scale);
        lr[10] = cfg.lr_opacity;
        lr[11..14].fill(cfg.lr_sh_dc);
        let n = cloud.len() * stride;
        Self { stride, lr, m: vec![0.0; n], v: vec![0.0; n], steps: vec![0; cloud.len()] }
    }

    fn step(&mut self, cloud: &mut GaussianCloud, grads: &ParamGrads, active: Option<&[bool]>) {
        let s = self.stride;
        let mut p = vec![0.0; s];
        let mut g = vec![0.0; s];
        for (i, gauss) in cloud.gaussians.iter_mut().enumerate() {
            if active.is_some_and(|a| !a[i]) {
                continue;
            }
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let c1 = 1.0 - BETA1.powi(t);
            let c2 = 1.0 - BETA2.powi(t);
            gauss.write_params(&mut p);
            grads.gaussians[i].write_flat(&mut g);
            for k in 0..s {
                let j = i * s + k;
                self.m[j] = BETA1 * self.m[j] + (1.0 - BETA1) * g[k];
                self.v[j] = BETA2 * self.v[j] + (1.0 - BETA2) * g[k] * g[k];
                p[k] -= self.lr[k] * (self.m[j] / c1) / ((self.v[j] / c2).sqrt() + ADAM_EPS);
            }
            gauss.read_params(&p);
            gauss.normalize_rotation();
        }
    }
}

/// Plain Adam for a flat parameter vector.
struct DenseAdam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl DenseAdam {
    fn new(n: usize, lr: f64) -> Self {
        Self { lr, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let (c1, c2) = (1.0 - BETA1.powi(self.t), 1.0 - BETA2.powi(self.t));
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }
}

/// Per-view mean loss and PSNR of a cloud rendered as given.
pub fn evaluate(cloud: &GaussianCloud, views: &[View], lambda_ssim: f64) -> Option<(f64, f64)> {
    if views.is_empty() {
        return None;
    }
    let (mut loss, mut db) = (0.0, 0.0);
    for v in views {
        let out = PreparedView::new(cloud, &v.camera, &RenderOptions::default()).render(false);
        loss += photometric_loss(&out.color, &v.image, lambda_ssim).0;
        db += psnr(&out.color, &v.image);
    }
    let n = views.len() as f64;
    Some((loss / n, db / n))
}

/// Unweighted mean CA over the views with a defined score.
pub fn mean_ca(cloud: &GaussianCloud, views: &[View], drop_ratio: f64, samples: usize, threshold: f64, seed: u64) -> Option<f64> {
    let scores: Vec<f64> = views
        .iter()
        .enumerate()
        .filter_map(|(i, v)| {
            let settings = CaSettings::new(drop_ratio, ca_seed(seed, i)).with_samples(samples).with_threshold(Some(threshold));
            ca_score(cloud, &v.camera, &settings).expect("validated settings").ca
        })
        .collect();
    (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64)
}

/// CA mask seed for view `i`; shared by every log record of a run.
pub fn ca_seed(seed: u64, view: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(view as u64)
}

/// Mutable regularizer state carried across iterations.
enum Rates {
    None,
    Fixed(Vec<f64>),
    /// Drop-rate logits.
    Learned(Vec<f64>, DenseAdam),
}

impl Rates {
    fn current(&self) -> Option<Vec<f64>> {
        match self {
            Rates::None => None,
            Rates::Fixed(r) => Some(r.clone()),
            Rates::Learned(rho, _) => Some(rho.iter().map(|&r| sigmoid(r)).collect()),
        }
    }
}

/// Optimize `init` against `train_views`. Deterministic given the config.
pub fn train(init: &GaussianCloud, train_views: &[View], test_views: &[View], cfg: &TrainConfig) -> Result<TrainRun, TrainError> {
    cfg.validate()?;
    if train_views.is_empty() {
        return Err(TrainError::NoTrainViews);
    }
    let mut cloud = init.clone();
    let n = cloud.len();
    let mut adam = SparseAdam::new(&cloud, cfg);
    let mut rates = match cfg.dropout_mode {
        _ if !cfg.uses_dropout() => Rates::None,
        DropoutMode::Uniform => Rates::None,
        DropoutMode::Density => Rates::Fixed(density_based_rates(&cloud, cfg.density_k, cfg.density_lo, cfg.density_hi)?),
        DropoutMode::Concrete => Rates::Learned(vec![logit(cfg.dropout_p); n], DenseAdam::new(n, cfg.lr_concrete)),
    };
    let noise = cfg.noise();
    let mut nn: Option<Vec<f64>> = None;
    let mut log = Vec::new();

    let snapshot = |cloud: &GaussianCloud, rates: &Rates| -> (InferenceScale, f64) {
        match rates.current() {
            None => (InferenceScale::Uniform(test_time_opacity_scale(cfg.dropout_p)), cfg.dropout_p),
            Some(r) => {
                let mean = r.iter().sum::<f64>() / r.len().max(1) as f64;
                debug_assert_eq!(r.len(), cloud.len());
                (InferenceScale::PerGaussian(r.iter().map(|p| 1.0 - p).collect()), mean)
            }
        }
    };
    let record = |iteration: usize, cloud: &GaussianCloud, rates: &Rates| -> Result<TrainRecord, TrainError> {
        let (scale, p) = snapshot(cloud, rates);
        let eval = inference_cloud(cloud, &scale);
        let (train_loss, train_psnr) = evaluate(&eval, train_views, cfg.lambda_ssim).expect("non-empty");
        let test_psnr = evaluate(&eval, test_views, cfg.lambda_ssim).map(|(_, db)| db);
        let drop = effective_drop_ratio(p);
        let train_ca = mean_ca(cloud, train_views, drop, cfg.ca_samples, cfg.ca_threshold, cfg.seed);
        let test_ca = mean_ca(cloud, test_views, drop, cfg.ca_samples, cfg.ca_threshold, cfg.seed ^ 0x5555);
        let rec = TrainRecord { iteration, train_loss, train_psnr, test_psnr, train_ca, test_ca, gaussian_count: cloud.len() };
        let finite = [Some(train_loss), Some(train_psnr), test_psnr, train_ca, test_ca].iter().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(TrainError::Diverged { iteration, what: "non-finite evaluation".into() });
        }
        Ok(rec)
    };

    log.push(record(0, &cloud, &rates)?);
    for it in 0..cfg.iterations {
        let view = &train_views[it % train_views.len()];
        let iter = it as u64;

        let mask: Option<Vec<bool>> = match &rates {
            Rates::None if cfg.dropout_p > 0.0 => Some(sample_dropout_mask(n, cfg.dropout_p, cfg.seed, iter).keep),
            Rates::Fixed(r) => Some(sample_dropout_mask_rates(r, cfg.seed, iter)),
            _ => None,
        };
        let concrete = match &rates {
            Rates::Learned(rho, _) => {
                let p: Vec<f64> = rho.iter().map(|&r| sigmoid(r)).collect();
                Some(apply_concrete_dropout(&cloud, &p, cfg.concrete_tau, cfg.seed, iter))
            }
            _ => None,
        };
        let base = concrete.as_ref().map_or(&cloud, |c| &c.perturbed.cloud);
        let perturbed = match &noise {
            Some(spec) => {
                if spec.target == NoiseTarget::Position && (nn.is_none() || it % 100 == 0) {
                    nn = Some(knn::nearest_neighbor_distances(&cloud.positions()).ok_or(RegularizeError::NoNeighbors)?);
                }
                apply_noise_with_nn(base, spec, cfg.seed, iter, nn.as_deref())?
            }
            None => Perturbed::identity(base),
        };

        let opts = RenderOptions { mask: mask.as_deref(), ..RenderOptions::default() };
        let prepared = PreparedView::new(&perturbed.cloud, &view.camera, &opts);
        let out = prepared.render(false);
        let (loss, dl) = photometric_loss(&out.color, &view.image, cfg.lambda_ssim);
        if !loss.is_finite() {
            return Err(TrainError::Diverged { iteration: it, what: format!("loss is {loss}") });
        }
        let mut grads = prepared.backward(&perturbed.cloud, &view.camera, &dl);
        perturbed.pull_back(&mut grads);
        if let (Some(c), Rates::Learned(rho, opt)) = (&concrete, &mut rates) {
            let g = c.rate_logit_grads(grads.gaussians.iter().map(|g| g.opacity_logit), cfg.concrete_tau);
            c.perturbed.pull_back(&mut grads);
            opt.step(rho, &g);
        }
        adam.step(&mut cloud, &grads, mask.as_deref());
        opacity_decay(&mut cloud, cfg.decay_factor);

        let done = it + 1;
        if !cloud_is_finite(&cloud) {
            return Err(TrainError::Diverged { iteration: done, what: "non-finite parameters".into() });
        }
        if done % cfg.ca_interval == 0 || done == cfg.iterations {
            log.push(record(done, &cloud, &rates)?);
        }
    }
    let (inference, train_p) = snapshot(&cloud, &rates);
    let rates = rates.current();
    Ok(TrainRun { cloud, log, inference, train_p, rates })
}

fn cloud_is_finite(cloud: &GaussianCloud) -> bool {
    let mut buf = vec![0.0; Gaussian::param_count(cloud.sh_degree)];
    cloud.gaussians.iter().all(|g| {
        g.write_params(&mut buf);
        buf.iter().all(|v| v.is_finite())
    })
}
