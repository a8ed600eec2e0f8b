//! Image quality metrics: PSNR, SSIM and depth errors.

use crate::image::{GrayImage, Mask, RgbImage};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

pub fn mse(a: &RgbImage, b: &RgbImage) -> f64 {
    assert!(a.same_shape(b), "image shapes differ");
    let sum: f64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(p, q)| (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>())
        .sum();
    sum / (3 * a.len()) as f64
}

/// Peak signal-to-noise ratio for images in [0, 1], capped at [`PSNR_CAP`].
pub fn psnr(a: &RgbImage, b: &RgbImage) -> f64 {
    let m = mse(a, b);
    if m <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / m).log10()).min(PSNR_CAP)
}

/// Averaging operator used for the local SSIM statistics.
///
/// Images at least as large as the window use a truncated Gaussian window
/// renormalized at the borders; smaller images use one window covering the
/// whole image.
enum Window {
    Gaussian {
        kernel: Vec<f64>,
        norm_x: Vec<f64>,
        norm_y: Vec<f64>,
    },
    Global,
}

impl Window {
    fn new(width: usize, height: usize) -> Self {
        if width < SSIM_WINDOW || height < SSIM_WINDOW {
            return Window::Global;
        }
        let r = (SSIM_WINDOW / 2) as isize;
        let kernel: Vec<f64> = (-r..=r)
            .map(|d| (-((d * d) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
            .collect();
        let norm = |len: usize| -> Vec<f64> {
            (0..len as isize)
                .map(|i| {
                    (-r..=r)
                        .filter(|d| (0..len as isize).contains(&(i + d)))
                        .map(|d| kernel[(d + r) as usize])
                        .sum()
                })
                .collect()
        };
        let norm_x = norm(width);
        let norm_y = norm(height);
        Window::Gaussian { kernel, norm_x, norm_y }
    }

    fn pass(src: &[f64], width: usize, height: usize, kernel: &[f64], norm: &[f64], horizontal: bool, adjoint: bool) -> Vec<f64> {
        let r = (kernel.len() / 2) as isize;
        let mut out = vec![0.0; src.len()];
        for y in 0..height {
            for x in 0..width {
                let (i, len) = if horizontal { (x as isize, width as isize) } else { (y as isize, height as isize) };
                let mut acc = 0.0;
                for d in -r..=r {
                    let j = i + d;
                    if j < 0 || j >= len {
                        continue;
                    }
                    let idx = if horizontal { y * width + j as usize } else { j as usize * width + x };
                    let v = if adjoint { src[idx] / norm[j as usize] } else { src[idx] };
                    acc += kernel[(d + r) as usize] * v;
                }
                out[y * width + x] = if adjoint { acc } else { acc / norm[i as usize] };
            }
        }
        out
    }

    fn apply(&self, src: &[f64], width: usize, height: usize) -> Vec<f64> {
        match self {
            Window::Gaussian { kernel, norm_x, norm_y } => {
                let h = Self::pass(src, width, height, kernel, norm_x, true, false);
                Self::pass(&h, width, height, kernel, norm_y, false, false)
            }
            Window::Global => {
                let m = src.iter().sum::<f64>() / src.len() as f64;
                vec![m; src.len()]
            }
        }
    }

    fn adjoint(&self, src: &[f64], width: usize, height: usize) -> Vec<f64> {
        match self {
            Window::Gaussian { kernel, norm_x, norm_y } => {
                let v = Self::pass(src, width, height, kernel, norm_y, false, true);
                Self::pass(&v, width, height, kernel, norm_x, true, true)
            }
            Window::Global => self.apply(src, width, height),
        }
    }
}

/// Mean SSIM of one channel and, optionally, its gradient with respect to `x`.
fn ssim_channel(x: &[f64], y: &[f64], width: usize, height: usize, want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let win = Window::new(width, height);
    let n = x.len() as f64;
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = win.apply(x, width, height);
    let my = win.apply(y, width, height);
    let exx = win.apply(&xx, width, height);
    let eyy = win.apply(&yy, width, height);
    let exy = win.apply(&xy, width, height);

    let len = x.len();
    let mut total = 0.0;
    let (mut d_mu, mut d_var, mut d_cov) = (vec![0.0; len], vec![0.0; len], vec![0.0; len]);
    for p in 0..len {
        let (ux, uy) = (mx[p], my[p]);
        let vx = exx[p] - ux * ux;
        let vy = eyy[p] - uy * uy;
        let cxy = exy[p] - ux * uy;
        let n1 = 2.0 * ux * uy + SSIM_C1;
        let n2 = 2.0 * cxy + SSIM_C2;
        let d1 = ux * ux + uy * uy + SSIM_C1;
        let d2 = vx + vy + SSIM_C2;
        let s = (n1 * n2) / (d1 * d2);
        total += s;
        if want_grad {
            d_mu[p] = (2.0 * uy * n2 / (d1 * d2) - s * 2.0 * ux / d1) / n;
            d_var[p] = -s / d2 / n;
            d_cov[p] = 2.0 * n1 / (d1 * d2) / n;
        }
    }
    let mean = total / n;
    if !want_grad {
        return (mean, None);
    }
    let base: Vec<f64> = (0..len).map(|p| d_mu[p] - 2.0 * mx[p] * d_var[p] - my[p] * d_cov[p]).collect();
    let t_base = win.adjoint(&base, width, height);
    let t_var = win.adjoint(&d_var, width, height);
    let t_cov = win.adjoint(&d_cov, width, height);
    let grad = (0..len).map(|q| t_base[q] + 2.0 * x[q] * t_var[q] + y[q] * t_cov[q]).collect();
    (mean, Some(grad))
}

/// Mean SSIM averaged over the RGB channels.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> f64 {
    ssim_with_grad(a, b, false).0
}

/// SSIM of `a` against `b` and, when requested, `d SSIM / d a`.
pub fn ssim_with_grad(a: &RgbImage, b: &RgbImage, want_grad: bool) -> (f64, Option<RgbImage>) {
    assert!(a.same_shape(b), "image shapes differ");
    let (w, h) = (a.width, a.height);
    let mut value = 0.0;
    let mut grad = want_grad.then(|| a.map(|_| [0.0; 3]));
    for ch in 0..3 {
        let x = a.channel(ch).pixels;
        let y = b.channel(ch).pixels;
        let (s, g) = ssim_channel(&x, &y, w, h, want_grad);
        value += s / 3.0;
        if let (Some(out), Some(g)) = (grad.as_mut(), g) {
            for (px, gv) in out.pixels.iter_mut().zip(g) {
                px[ch] = gv / 3.0;
            }
        }
    }
    (value, grad)
}

/// Depth error statistics over a validity mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthMetrics {
    pub absrel: f64,
    pub rmse: f64,
    pub mae: f64,
    pub log10: f64,
    /// Fraction of valid pixels left out of `log10` because the prediction
    /// was not positive.
    pub log10_excluded: f64,
    pub valid_pixels: usize,
}

/// AbsRel, RMSE, MAE and mean absolute log10 error. Pixels where the mask
/// is false or the reference is not positive are ignored; `None` when no
/// pixel remains.
pub fn depth_metrics(pred: &GrayImage, reference: &GrayImage, valid: &Mask) -> Option<DepthMetrics> {
    assert!(pred.same_shape(reference) && pred.same_shape(valid), "image shapes differ");
    let (mut abs_rel, mut sq, mut abs, mut log_sum) = (0.0, 0.0, 0.0, 0.0);
    let (mut count, mut log_count) = (0usize, 0usize);
    for ((&p, &r), &ok) in pred.pixels.iter().zip(&reference.pixels).zip(&valid.pixels) {
        if !ok || !(r > 0.0) {
            continue;
        }
        let e = p - r;
        abs_rel += e.abs() / r;
        sq += e * e;
        abs += e.abs();
        count += 1;
        if p > 0.0 {
            log_sum += (p.log10() - r.log10()).abs();
            log_count += 1;
        }
    }
    if count == 0 {
        return None;
    }
    let n = count as f64;
    Some(DepthMetrics {
        absrel: abs_rel / n,
        rmse: (sq / n).sqrt(),
        mae: abs / n,
        log10: if log_count > 0 { log_sum / log_count as f64 } else { f64::NAN },
        log10_excluded: (count - log_count) as f64 / n,
        valid_pixels: count,
    })
}
