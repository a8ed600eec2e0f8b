//! Forward splatting: EWA projection, depth sorting and front-to-back
//! alpha compositing.
//!
//! The tiled path in [`PreparedView`] evaluates exactly the same floating
//! point expressions as [`composite_pixel`]; tiles only skip splats whose
//! conservative bounding box excludes the pixel, where their alpha is below
//! [`MIN_ALPHA`] anyway. Both paths are therefore bit-identical.

use std::cmp::Ordering;

use nalgebra::{Matrix2, Matrix2x3, Vector2, Vector3};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::image::{GrayImage, Image, Mask, RgbImage};
use crate::model::{covariance_world, sh_color_unclamped, sigmoid, Camera, Gaussian, GaussianCloud};

/// Isotropic screen-space low-pass added to every projected covariance (px^2).
pub const LOW_PASS: f64 = 0.3;
/// Per-splat alpha clamp.
pub const MAX_ALPHA: f64 = 0.99;
/// Contributions below this alpha are skipped.
pub const MIN_ALPHA: f64 = 1.0 / 255.0;
/// Compositing stops once transmittance falls below this value.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;

const TILE: usize = 16;

/// A Gaussian projected to the image plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Splat2D {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
    pub base_opacity: f64,
    pub color: [f64; 3],
    pub source_index: usize,
}

impl Splat2D {
    /// Inverse covariance as (a, b, c) of `[[a, b], [b, c]]`.
    pub fn conic(&self) -> [f64; 3] {
        let (a, b, c) = (self.cov2d[(0, 0)], self.cov2d[(0, 1)], self.cov2d[(1, 1)]);
        let det = a * c - b * b;
        [c / det, -b / det, a / det]
    }

    /// Inclusive pixel range whose centers can receive alpha >= MIN_ALPHA at
    /// the given effective opacity. `None` if nothing can.
    fn pixel_bounds(&self, opacity: f64, width: usize, height: usize) -> Option<[usize; 4]> {
        if !(opacity >= MIN_ALPHA) {
            return None;
        }
        let q_max = 2.0 * (opacity / MIN_ALPHA).ln() * (1.0 + 1e-9) + 1e-9;
        let rx = (q_max * self.cov2d[(0, 0)]).sqrt() * (1.0 + 1e-6) + 1e-9;
        let ry = (q_max * self.cov2d[(1, 1)]).sqrt() * (1.0 + 1e-6) + 1e-9;
        let x0 = (self.mean2d.x - rx - 0.5).ceil();
        let x1 = (self.mean2d.x + rx - 0.5).floor();
        let y0 = (self.mean2d.y - ry - 0.5).ceil();
        let y1 = (self.mean2d.y + ry - 0.5).floor();
        if !(x0.is_finite() && x1.is_finite() && y0.is_finite() && y1.is_finite()) {
            return None;
        }
        if x1 < 0.0 || y1 < 0.0 || x0 > (width - 1) as f64 || y0 > (height - 1) as f64 || x1 < x0 || y1 < y0 {
            return None;
        }
        Some([
            x0.max(0.0) as usize,
            (x1 as usize).min(width - 1),
            y0.max(0.0) as usize,
            (y1 as usize).min(height - 1),
        ])
    }
}

/// Total order used for compositing: depth, then source index.
pub fn splat_order(a: &Splat2D, b: &Splat2D) -> Ordering {
    a.depth
        .total_cmp(&b.depth)
        .then(a.source_index.cmp(&b.source_index))
}

pub fn sort_splats(splats: &mut [Splat2D]) {
    splats.sort_by(splat_order);
}

/// 2x3 Jacobian of the perspective projection at camera-space point `t`.
pub(crate) fn projection_jacobian(cam: &Camera, t: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * t.x * iz2,
        0.0,
        cam.fy * iz,
        -cam.fy * t.y * iz2,
    )
}

/// Project one Gaussian. Returns `None` when it lies outside the depth range
/// or its footprint misses the viewport.
pub fn project_gaussian(g: &Gaussian, cam: &Camera) -> Option<Splat2D> {
    project_with(g, 0, sh_degree_of(g), cam, &cam.center())
}

fn sh_degree_of(g: &Gaussian) -> usize {
    match g.sh.len() {
        0 | 1 => 0,
        2..=4 => 1,
        5..=9 => 2,
        _ => 3,
    }
}

pub(crate) fn project_with(
    g: &Gaussian,
    index: usize,
    sh_degree: usize,
    cam: &Camera,
    cam_center: &Vector3<f64>,
) -> Option<Splat2D> {
    let t = cam.to_camera(&g.position);
    if !(t.z > cam.near && t.z < cam.far) {
        return None;
    }
    let a = projection_jacobian(cam, &t) * cam.rotation;
    let cov = a * covariance_world(g) * a.transpose();
    let off = 0.5 * (cov[(0, 1)] + cov[(1, 0)]);
    let cov2d = Matrix2::new(cov[(0, 0)] + LOW_PASS, off, off, cov[(1, 1)] + LOW_PASS);
    let mean2d = Vector2::new(cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy);
    let view = g.position - cam_center;
    let dir = view / view.norm();
    let color = sh_color_unclamped(&g.sh, sh_degree, &dir).map(|c| c.clamp(0.0, 1.0));
    let splat = Splat2D {
        mean2d,
        cov2d,
        depth: t.z,
        base_opacity: sigmoid(g.opacity_logit),
        color,
        source_index: index,
    };
    splat.pixel_bounds(splat.base_opacity, cam.width, cam.height)?;
    Some(splat)
}

/// Alpha of a splat at a pixel center, before the MIN_ALPHA test.
/// Returns (alpha, gaussian falloff, clamped?).
#[inline]
pub(crate) fn splat_alpha(opacity: f64, mean: &Vector2<f64>, conic: &[f64; 3], px: f64, py: f64) -> (f64, f64, bool) {
    let dx = px - mean.x;
    let dy = py - mean.y;
    let q = conic[0] * dx * dx + 2.0 * conic[1] * dx * dy + conic[2] * dy * dy;
    let falloff = (-0.5 * q).exp();
    let raw = opacity * falloff;
    if raw > MAX_ALPHA {
        (MAX_ALPHA, falloff, true)
    } else {
        (raw, falloff, false)
    }
}

/// One entry of a pixel's compositing list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contributor {
    pub source_index: usize,
    pub alpha: f64,
    /// Transmittance in front of this contributor.
    pub transmittance: f64,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelComposite {
    pub color: [f64; 3],
    pub alpha: f64,
    pub depth: f64,
    pub contributors: Vec<Contributor>,
}

/// Composite a depth-sorted splat list at one pixel position (pixel centers
/// sit at half-integer coordinates).
pub fn composite_pixel(splats: &[Splat2D], pixel: [f64; 2]) -> PixelComposite {
    let conics: Vec<[f64; 3]> = splats.iter().map(Splat2D::conic).collect();
    let mut contributors = Vec::new();
    let (color, alpha, depth) = composite_indices(splats, &conics, 0..splats.len(), pixel[0], pixel[1], |e| {
        contributors.push(e.contributor(splats))
    });
    PixelComposite {
        color,
        alpha,
        depth,
        contributors,
    }
}

/// Per-contribution state exposed to visitors (forward and backward).
#[derive(Debug, Clone, Copy)]
pub(crate) struct Evaluated {
    pub splat: usize,
    pub alpha: f64,
    pub transmittance: f64,
    pub falloff: f64,
    pub clamped: bool,
}

impl Evaluated {
    fn contributor(&self, splats: &[Splat2D]) -> Contributor {
        let s = &splats[self.splat];
        Contributor {
            source_index: s.source_index,
            alpha: self.alpha,
            transmittance: self.transmittance,
            color: s.color,
        }
    }
}

#[inline]
pub(crate) fn composite_indices(
    splats: &[Splat2D],
    conics: &[[f64; 3]],
    order: impl IntoIterator<Item = usize>,
    px: f64,
    py: f64,
    mut visit: impl FnMut(Evaluated),
) -> ([f64; 3], f64, f64) {
    let mut t = 1.0;
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    for i in order {
        let s = &splats[i];
        let (alpha, falloff, clamped) = splat_alpha(s.base_opacity, &s.mean2d, &conics[i], px, py);
        if alpha < MIN_ALPHA {
            continue;
        }
        let w = alpha * t;
        color[0] += s.color[0] * w;
        color[1] += s.color[1] * w;
        color[2] += s.color[2] * w;
        depth += s.depth * w;
        visit(Evaluated {
            splat: i,
            alpha,
            transmittance: t,
            falloff,
            clamped,
        });
        t *= 1.0 - alpha;
        if t < MIN_TRANSMITTANCE {
            break;
        }
    }
    let acc = 1.0 - t;
    let depth = if acc > 0.0 { depth / acc } else { 0.0 };
    (color, acc, depth)
}

/// Options for [`render`].
#[derive(Debug, Clone, Copy)]
pub struct RenderOptions<'a> {
    /// Per-Gaussian keep flags; dropped Gaussians are not rendered.
    pub mask: Option<&'a [bool]>,
    /// Multiplies every activated opacity before the alpha clamp.
    pub opacity_scale: f64,
    pub record_contributors: bool,
}

impl Default for RenderOptions<'_> {
    fn default() -> Self {
        Self {
            mask: None,
            opacity_scale: 1.0,
            record_contributors: false,
        }
    }
}

impl<'a> RenderOptions<'a> {
    pub fn masked(mask: &'a [bool]) -> Self {
        Self {
            mask: Some(mask),
            ..Self::default()
        }
    }

    pub fn scaled(opacity_scale: f64) -> Self {
        Self {
            opacity_scale,
            ..Self::default()
        }
    }

    pub fn with_contributors(mut self) -> Self {
        self.record_contributors = true;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub color: RgbImage,
    /// Accumulated alpha per pixel.
    pub alpha: GrayImage,
    /// Alpha-weighted expected depth normalized by accumulated alpha.
    pub depth: GrayImage,
    pub contributors: Option<Vec<Vec<Contributor>>>,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.color.width
    }

    pub fn height(&self) -> usize {
        self.color.height
    }
}

/// Projected, sorted and tile-binned splats for one (cloud, camera, options).
pub struct PreparedView {
    pub(crate) width: usize,
    pub(crate) height: usize,
    pub(crate) splats: Vec<Splat2D>,
    pub(crate) conics: Vec<[f64; 3]>,
    tiles_x: usize,
    tiles: Vec<Vec<u32>>,
    pub(crate) opacity_scale: f64,
}

impl PreparedView {
    pub fn new(cloud: &GaussianCloud, cam: &Camera, opts: &RenderOptions<'_>) -> Self {
        if let Some(mask) = opts.mask {
            assert_eq!(mask.len(), cloud.len(), "mask length must equal cloud size");
        }
        assert!(
            opts.opacity_scale > 0.0 && opts.opacity_scale <= 1.0,
            "opacity_scale must lie in (0, 1], got {}",
            opts.opacity_scale
        );
        let center = cam.center();
        let mut splats: Vec<Splat2D> = cloud
            .gaussians
            .iter()
            .enumerate()
            .filter(|(i, _)| opts.mask.is_none_or(|m| m[*i]))
            .filter_map(|(i, g)| project_with(g, i, cloud.sh_degree, cam, &center))
            .map(|mut s| {
                s.base_opacity *= opts.opacity_scale;
                s
            })
            .collect();
        sort_splats(&mut splats);
        let conics: Vec<[f64; 3]> = splats.iter().map(Splat2D::conic).collect();

        let tiles_x = cam.width.div_ceil(TILE);
        let tiles_y = cam.height.div_ceil(TILE);
        let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
        for (i, s) in splats.iter().enumerate() {
            if let Some([x0, x1, y0, y1]) = s.pixel_bounds(s.base_opacity, cam.width, cam.height) {
                for ty in y0 / TILE..=y1 / TILE {
                    for tx in x0 / TILE..=x1 / TILE {
                        tiles[ty * tiles_x + tx].push(i as u32);
                    }
                }
            }
        }
        Self {
            width: cam.width,
            height: cam.height,
            splats,
            conics,
            tiles_x,
            tiles,
            opacity_scale: opts.opacity_scale,
        }
    }

    pub fn splats(&self) -> &[Splat2D] {
        &self.splats
    }

    pub(crate) fn tile_of(&self, x: usize, y: usize) -> &[u32] {
        &self.tiles[(y / TILE) * self.tiles_x + x / TILE]
    }

    #[inline]
    pub(crate) fn composite_at(&self, x: usize, y: usize, visit: impl FnMut(Evaluated)) -> ([f64; 3], f64, f64) {
        let order = self.tile_of(x, y).iter().map(|&i| i as usize);
        composite_indices(&self.splats, &self.conics, order, x as f64 + 0.5, y as f64 + 0.5, visit)
    }

    fn render_row(&self, y: usize, record: bool) -> Vec<([f64; 3], f64, f64, Vec<Contributor>)> {
        (0..self.width)
            .map(|x| {
                let mut list = Vec::new();
                let (c, a, d) = self.composite_at(x, y, |e| {
                    if record {
                        list.push(e.contributor(&self.splats));
                    }
                });
                (c, a, d, list)
            })
            .collect()
    }

    pub fn render(&self, record_contributors: bool) -> RenderOutput {
        #[cfg(feature = "parallel")]
        let rows: Vec<_> = (0..self.height)
            .into_par_iter()
            .map(|y| self.render_row(y, record_contributors))
            .collect();
        #[cfg(not(feature = "parallel"))]
        let rows: Vec<_> = (0..self.height).map(|y| self.render_row(y, record_contributors)).collect();

        let n = self.width * self.height;
        let mut color = Vec::with_capacity(n);
        let mut alpha = Vec::with_capacity(n);
        let mut depth = Vec::with_capacity(n);
        let mut contributors = record_contributors.then(|| Vec::with_capacity(n));
        for (c, a, d, list) in rows.into_iter().flatten() {
            color.push(c);
            alpha.push(a);
            depth.push(d);
            if let Some(all) = contributors.as_mut() {
                all.push(list);
            }
        }
        RenderOutput {
            color: Image::from_pixels(self.width, self.height, color),
            alpha: Image::from_pixels(self.width, self.height, alpha),
            depth: Image::from_pixels(self.width, self.height, depth),
            contributors,
        }
    }
}

/// Render a cloud from a camera.
///
/// Zero surviving Gaussians produce a black image with zero alpha.
pub fn render(cloud: &GaussianCloud, cam: &Camera, opts: &RenderOptions<'_>) -> RenderOutput {
    PreparedView::new(cloud, cam, opts).render(opts.record_contributors)
}

/// Pixels whose accumulated alpha exceeds `threshold`.
pub fn visibility_mask(out: &RenderOutput, threshold: f64) -> Mask {
    out.alpha.map(|&a| a > threshold)
}
