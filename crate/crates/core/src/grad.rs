//! Analytic backward pass of the renderer.
//!
//! Gradients flow from per-pixel color through the compositing recursion,
//! the Gaussian falloff, the EWA projection, the activations and the SH
//! evaluation. Accumulation order is fixed (tiles in raster order, pixels in
//! raster order inside a tile), so results do not depend on thread count.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::image::{Image, RgbImage};
use crate::model::{rotation_matrix, sigmoid, Camera, Gaussian, GaussianCloud};
use crate::render::{projection_jacobian, render, Evaluated, PreparedView, RenderOptions};
use crate::sh;

/// Gradient with respect to every field of one [`Gaussian`].
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGrad {
    pub position: Vector3<f64>,
    /// (w, x, y, z) order, matching the stored quaternion.
    pub rotation: Vector4<f64>,
    pub log_scale: Vector3<f64>,
    pub opacity_logit: f64,
    pub sh: Vec<Vector3<f64>>,
}

impl GaussianGrad {
    pub fn zeros(sh_degree: usize) -> Self {
        Self {
            position: Vector3::zeros(),
            rotation: Vector4::zeros(),
            log_scale: Vector3::zeros(),
            opacity_logit: 0.0,
            sh: vec![Vector3::zeros(); sh::coeff_count(sh_degree)],
        }
    }

    /// Same layout as [`Gaussian::write_params`].
    pub fn write_flat(&self, out: &mut [f64]) {
        out[0..3].copy_from_slice(self.position.as_slice());
        out[3..7].copy_from_slice(self.rotation.as_slice());
        out[7..10].copy_from_slice(self.log_scale.as_slice());
        out[10] = self.opacity_logit;
        for (k, c) in self.sh.iter().enumerate() {
            out[11 + 3 * k..14 + 3 * k].copy_from_slice(c.as_slice());
        }
    }

    fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
            && self.sh.iter().all(|c| c.iter().all(|v| v.is_finite()))
    }
}

/// Per-Gaussian gradients, index-aligned with the cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub gaussians: Vec<GaussianGrad>,
}

impl ParamGrads {
    pub fn zeros(cloud: &GaussianCloud) -> Self {
        Self {
            gaussians: vec![GaussianGrad::zeros(cloud.sh_degree); cloud.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.gaussians.iter().all(GaussianGrad::is_finite)
    }

    /// Flatten in parameter order; `stride` is [`Gaussian::param_count`].
    pub fn to_flat(&self, stride: usize) -> Vec<f64> {
        let mut out = vec![0.0; stride * self.len()];
        for (g, chunk) in self.gaussians.iter().zip(out.chunks_mut(stride)) {
            g.write_flat(chunk);
        }
        out
    }
}

/// Screen-space gradient of one projected splat.
#[derive(Debug, Clone, Copy, Default)]
struct SplatGrad {
    mean: Vector2<f64>,
    /// Full (symmetric) gradient with respect to the inverse covariance.
    conic: Matrix2<f64>,
    opacity: f64,
    color: [f64; 3],
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        self.mean += o.mean;
        self.conic += o.conic;
        self.opacity += o.opacity;
        for ch in 0..3 {
            self.color[ch] += o.color[ch];
        }
    }
}

impl PreparedView {
    /// Gradient of `sum_u <dl_dcolor(u), C(u)>` with respect to the
    /// parameters of `cloud`, which must be the cloud this view was prepared
    /// from.
    pub fn backward(&self, cloud: &GaussianCloud, cam: &Camera, dl_dcolor: &RgbImage) -> ParamGrads {
        assert_eq!((dl_dcolor.width, dl_dcolor.height), (self.width, self.height), "gradient image size mismatch");
        let splat_grads = self.screen_space_grads(dl_dcolor);
        let center = cam.center();
        let mut grads = ParamGrads::zeros(cloud);
        for (splat, sg) in self.splats.iter().zip(&splat_grads) {
            let g = &cloud.gaussians[splat.source_index];
            grads.gaussians[splat.source_index] =
                project_backward(g, cloud.sh_degree, cam, &center, self.opacity_scale, &splat.conic(), sg);
        }
        grads
    }

    fn screen_space_grads(&self, dl: &RgbImage) -> Vec<SplatGrad> {
        let tiles_y = self.height.div_ceil(16);
        let tiles_x = self.width.div_ceil(16);
        let tile_ids: Vec<(usize, usize)> = (0..tiles_y).flat_map(|ty| (0..tiles_x).map(move |tx| (tx, ty))).collect();
        #[cfg(feature = "parallel")]
        let partials: Vec<Vec<SplatGrad>> = tile_ids.par_iter().map(|&(tx, ty)| self.tile_backward(tx, ty, dl)).collect();
        #[cfg(not(feature = "parallel"))]
        let partials: Vec<Vec<SplatGrad>> = tile_ids.iter().map(|&(tx, ty)| self.tile_backward(tx, ty, dl)).collect();

        let mut out = vec![SplatGrad::default(); self.splats.len()];
        for (&(tx, ty), partial) in tile_ids.iter().zip(&partials) {
            let list = self.tile_of(tx * 16, ty * 16);
            for (&i, sg) in list.iter().zip(partial) {
                out[i as usize].add(sg);
            }
        }
        out
    }

    fn tile_backward(&self, tx: usize, ty: usize, dl: &RgbImage) -> Vec<SplatGrad> {
        let list = self.tile_of(tx * 16, ty * 16);
        let mut acc = vec![SplatGrad::default(); list.len()];
        if list.is_empty() {
            return acc;
        }
        let mut evals: Vec<Evaluated> = Vec::new();
        for y in ty * 16..((ty + 1) * 16).min(self.height) {
            for x in tx * 16..((tx + 1) * 16).min(self.width) {
                let d = dl.get(x, y);
                if d[0] == 0.0 && d[1] == 0.0 && d[2] == 0.0 {
                    continue;
                }
                evals.clear();
                self.composite_at(x, y, |e| evals.push(e));
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut behind = [0.0; 3];
                for e in evals.iter().rev() {
                    let s = &self.splats[e.splat];
                    let slot = list.binary_search(&(e.splat as u32)).expect("splat missing from its tile");
                    let g = &mut acc[slot];
                    let w = e.alpha * e.transmittance;
                    let mut dot_c = 0.0;
                    let mut dot_behind = 0.0;
                    for ch in 0..3 {
                        g.color[ch] += d[ch] * w;
                        dot_c += d[ch] * s.color[ch];
                        dot_behind += d[ch] * behind[ch];
                    }
                    let dl_dalpha = e.transmittance * dot_c - dot_behind / (1.0 - e.alpha);
                    for ch in 0..3 {
                        behind[ch] += s.color[ch] * w;
                    }
                    if e.clamped {
                        continue;
                    }
                    g.opacity += dl_dalpha * e.falloff;
                    let dl_dq = -0.5 * dl_dalpha * s.base_opacity * e.falloff;
                    let dx = px - s.mean2d.x;
                    let dy = py - s.mean2d.y;
                    g.conic += Matrix2::new(dx * dx, dx * dy, dx * dy, dy * dy) * dl_dq;
                    let c = &self.conics[e.splat];
                    // dq/dmean = -2 * conic * d
                    g.mean.x += dl_dq * -2.0 * (c[0] * dx + c[1] * dy);
                    g.mean.y += dl_dq * -2.0 * (c[1] * dx + c[2] * dy);
                }
            }
        }
        acc
    }
}

fn quaternion_backward(q: &nalgebra::Quaternion<f64>, g: &Matrix3<f64>) -> Vector4<f64> {
    let n = q.norm();
    let (w, x, y, z) = (q.w / n, q.i / n, q.j / n, q.k / n);
    let gw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)] + x * g[(2, 1)]);
    let gx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)] + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)] - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    let gn = Vector4::new(gw, gx, gy, gz);
    let qn = Vector4::new(w, x, y, z);
    (gn - qn * qn.dot(&gn)) / n
}

fn project_backward(
    g: &Gaussian,
    sh_degree: usize,
    cam: &Camera,
    center: &Vector3<f64>,
    opacity_scale: f64,
    conic: &[f64; 3],
    sg: &SplatGrad,
) -> GaussianGrad {
    let mut out = GaussianGrad::zeros(sh_degree);

    // opacity
    let o = sigmoid(g.opacity_logit);
    out.opacity_logit = sg.opacity * opacity_scale * o * (1.0 - o);

    // covariance chain: conic -> cov2d -> (J W) Sigma (J W)^T
    let t = cam.to_camera(&g.position);
    let jac = projection_jacobian(cam, &t);
    let w = cam.rotation;
    let a = jac * w;
    let rot = rotation_matrix(&g.rotation);
    let s = g.scale();
    let m = rot * Matrix3::from_diagonal(&s);
    let sigma = m * m.transpose();
    let q2 = Matrix2::new(conic[0], conic[1], conic[1], conic[2]);
    let g_cov = -(q2 * sg.conic * q2);
    let g_sigma = a.transpose() * g_cov * a;
    let g_a = 2.0 * g_cov * a * sigma;
    let g_j = g_a * w.transpose();

    let (fx, fy) = (cam.fx, cam.fy);
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut dl_dt = Vector3::new(
        sg.mean.x * fx * iz,
        sg.mean.y * fy * iz,
        -sg.mean.x * fx * t.x * iz2 - sg.mean.y * fy * t.y * iz2,
    );
    dl_dt.x += g_j[(0, 2)] * (-fx * iz2);
    dl_dt.y += g_j[(1, 2)] * (-fy * iz2);
    dl_dt.z += g_j[(0, 0)] * (-fx * iz2)
        + g_j[(0, 2)] * (2.0 * fx * t.x * iz3)
        + g_j[(1, 1)] * (-fy * iz2)
        + g_j[(1, 2)] * (2.0 * fy * t.y * iz3);
    out.position = w.transpose() * dl_dt;

    let g_m = 2.0 * g_sigma * m;
    for i in 0..3 {
        let mut ds = 0.0;
        for r in 0..3 {
            ds += g_m[(r, i)] * rot[(r, i)];
        }
        out.log_scale[i] = ds * s[i];
    }
    let g_rot = g_m * Matrix3::from_diagonal(&s);
    out.rotation = quaternion_backward(&g.rotation, &g_rot);

    // color
    let view = g.position - center;
    let dist = view.norm();
    let dir = view / dist;
    let basis = sh::basis(sh_degree, &dir);
    let n = sh::coeff_count(sh_degree);
    let mut raw = [0.5; 3];
    for (k, c) in g.sh.iter().take(n).enumerate() {
        for ch in 0..3 {
            raw[ch] += c[ch] * basis[k];
        }
    }
    let dl_draw: [f64; 3] = std::array::from_fn(|ch| if raw[ch] > 0.0 && raw[ch] < 1.0 { sg.color[ch] } else { 0.0 });
    for k in 0..n {
        out.sh[k] = Vector3::new(dl_draw[0], dl_draw[1], dl_draw[2]) * basis[k];
    }
    if sh_degree > 0 {
        let bgrad = sh::basis_gradient(sh_degree, &dir);
        let mut dl_ddir = Vector3::zeros();
        for (k, c) in g.sh.iter().take(n).enumerate().skip(1) {
            let weight = dl_draw[0] * c[0] + dl_draw[1] * c[1] + dl_draw[2] * c[2];
            dl_ddir += bgrad[k] * weight;
        }
        out.position += (dl_ddir - dir * dir.dot(&dl_ddir)) / dist;
    }
    out
}

/// Exact gradient of `sum_u <dl_dcolor(u), C(u)>`.
///
/// Masked-out Gaussians receive exactly zero gradient.
pub fn render_backward(
    cloud: &GaussianCloud,
    cam: &Camera,
    opts: &RenderOptions<'_>,
    dl_dcolor: &RgbImage,
) -> ParamGrads {
    PreparedView::new(cloud, cam, opts).backward(cloud, cam, dl_dcolor)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradCheckError {
    #[error("at least one sample is required")]
    NoSamples,
    #[error("cloud is empty")]
    EmptyCloud,
    #[error("non-finite analytic gradient for gaussian {gaussian}, parameter {param}")]
    NonFinite { gaussian: usize, param: String },
}

/// Identifies one scalar parameter of a cloud.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId {
    pub gaussian: usize,
    /// Offset in the [`Gaussian::write_params`] layout.
    pub slot: usize,
}

impl ParamId {
    pub fn name(&self) -> String {
        let field = match self.slot {
            0..=2 => format!("position[{}]", self.slot),
            3..=6 => format!("rotation[{}]", self.slot - 3),
            7..=9 => format!("log_scale[{}]", self.slot - 7),
            10 => "opacity_logit".to_string(),
            s => format!("sh[{}][{}]", (s - 11) / 3, (s - 11) % 3),
        };
        format!("gaussian {} {}", self.gaussian, field)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: ParamId,
    pub samples: usize,
    /// Samples where the base step straddled a compositing discontinuity and
    /// a smaller step was used.
    pub refined: usize,
    /// Samples where no step size gave a consistent difference quotient.
    pub unresolved: usize,
    /// Smallest activated scale in the cloud is below 1e-4.
    pub degenerate: bool,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-4;
pub const FD_TOLERANCE_DEGENERATE: f64 = 1e-3;

/// Relative error `|a - f| / max(|a|, |f|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn weighted_difference(cloud_p: &GaussianCloud, cloud_m: &GaussianCloud, cam: &Camera, weights: &RgbImage) -> f64 {
    let opts = RenderOptions::default();
    let a = render(cloud_p, cam, &opts).color;
    let b = render(cloud_m, cam, &opts).color;
    // Sum per-pixel differences so the large common part cancels first.
    let mut sum = 0.0;
    let mut comp = 0.0;
    for ((pa, pb), w) in a.pixels.iter().zip(&b.pixels).zip(&weights.pixels) {
        for ch in 0..3 {
            let term = w[ch] * (pa[ch] - pb[ch]);
            let t = sum + term;
            if sum.abs() >= term.abs() {
                comp += (sum - t) + term;
            } else {
                comp += (term - t) + sum;
            }
            sum = t;
        }
    }
    sum + comp
}

fn central_difference(cloud: &GaussianCloud, cam: &Camera, weights: &RgbImage, id: ParamId, h: f64) -> f64 {
    let stride = Gaussian::param_count(cloud.sh_degree);
    let mut buf = vec![0.0; stride];
    cloud.gaussians[id.gaussian].write_params(&mut buf);
    let mut plus = cloud.clone();
    let mut minus = cloud.clone();
    let base = buf[id.slot];
    buf[id.slot] = base + h;
    plus.gaussians[id.gaussian].read_params(&buf);
    buf[id.slot] = base - h;
    minus.gaussians[id.gaussian].read_params(&buf);
    weighted_difference(&plus, &minus, cam, weights) / (2.0 * h)
}

/// Compare analytic gradients against central differences on `samples`
/// randomly chosen scalar parameters.
///
/// The renderer has a few hard thresholds (minimum alpha, early
/// termination) that make the loss piecewise smooth. When the difference
/// quotient changes between step `h` and `h/2`, the step straddles such a
/// jump and is halved until two consecutive quotients agree.
pub fn finite_diff_check(cloud: &GaussianCloud, cam: &Camera, samples: usize, seed: u64) -> Result<GradCheckReport, GradCheckError> {
    if samples == 0 {
        return Err(GradCheckError::NoSamples);
    }
    if cloud.is_empty() {
        return Err(GradCheckError::EmptyCloud);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = Image::from_pixels(
        cam.width,
        cam.height,
        (0..cam.pixel_count())
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect(),
    );
    let analytic = render_backward(cloud, cam, &RenderOptions::default(), &weights);
    let stride = Gaussian::param_count(cloud.sh_degree);
    for (gi, g) in analytic.gaussians.iter().enumerate() {
        let mut flat = vec![0.0; stride];
        g.write_flat(&mut flat);
        if let Some(slot) = flat.iter().position(|v| !v.is_finite()) {
            return Err(GradCheckError::NonFinite {
                gaussian: gi,
                param: ParamId { gaussian: gi, slot }.name(),
            });
        }
    }
    let flat = analytic.to_flat(stride);

    let degenerate = cloud.gaussians.iter().any(|g| g.scale().min() < 1e-4);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: ParamId { gaussian: 0, slot: 0 },
        samples,
        refined: 0,
        unresolved: 0,
        degenerate,
        tolerance: if degenerate { FD_TOLERANCE_DEGENERATE } else { FD_TOLERANCE },
    };
    for _ in 0..samples {
        let id = ParamId {
            gaussian: rng.random_range(0..cloud.len()),
            slot: rng.random_range(0..stride),
        };
        let a = flat[id.gaussian * stride + id.slot];
        let mut h = FD_STEP;
        let mut coarse = central_difference(cloud, cam, &weights, id, h);
        let mut numeric = None;
        for level in 0..10 {
            let fine = central_difference(cloud, cam, &weights, id, h / 2.0);
            let noise = 1e-12 / h;
            if (coarse - fine).abs() <= 1e-6 * coarse.abs().max(fine.abs()) + noise {
                if level > 0 {
                    report.refined += 1;
                }
                numeric = Some(coarse);
                break;
            }
            h /= 2.0;
            coarse = fine;
        }
        let numeric = numeric.unwrap_or_else(|| {
            report.unresolved += 1;
            coarse
        });
        let err = relative_error(a, numeric);
        if err > report.max_rel_error || !err.is_finite() {
            report.max_rel_error = err;
            report.worst = id;
        }
    }
    Ok(report)
}
