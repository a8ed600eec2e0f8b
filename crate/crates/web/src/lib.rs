//! WebAssembly bindings for the static page in `www/`.
//!
//! Build with `wasm-pack build --target web crates/web` and serve `www/`
//! next to the generated `pkg/`. Every export also works natively, which is
//! how the tests drive it.

use coadapt::coadapt::{ca_score, exact_pixel_variance, first_order_ca, CaSettings, RayEntry, RaySlice};
use coadapt::regularize::{render_with_strategy, Strategy};
use coadapt::scene::{make_rig, make_scene, CameraRig, RigKind, SceneKind, SceneSpec};
use coadapt::{Camera, GaussianCloud, GrayImage, RgbImage};
use wasm_bindgen::prelude::*;

/// Enumeration is exponential in the ray length.
const MAX_RAY: usize = 16;

#[wasm_bindgen]
pub struct Demo {
    cloud: GaussianCloud,
    cameras: Vec<Camera>,
    last_ca: f64,
}

#[wasm_bindgen]
impl Demo {
    /// `scene` is one of `random-blob-field`, `textured-plane-stack` or `checker-box`.
    #[wasm_bindgen(constructor)]
    pub fn new(scene: &str, count: usize, views: usize, size: usize, seed: u64) -> Result<Demo, JsError> {
        Demo::build(scene, count, views, size, seed).map_err(js)
    }

    pub fn views(&self) -> usize {
        self.cameras.len()
    }

    pub fn size(&self) -> usize {
        self.cameras[0].width
    }

    /// RGBA bytes of `view` rendered with strategy `A`, `B` or `C`.
    pub fn render(&self, view: usize, strategy: char, p: f64, seed: u64) -> Result<Vec<u8>, JsError> {
        self.render_rgba(view, strategy, p, seed).map_err(js)
    }

    /// RGBA heat map of the per-pixel dropout variance. Pixels outside the
    /// commonly visible region are drawn dark blue. The scalar score is kept
    /// for [`Demo::last_ca`].
    pub fn variance_map(&mut self, view: usize, drop_ratio: f64, samples: usize, seed: u64) -> Result<Vec<u8>, JsError> {
        self.variance_rgba(view, drop_ratio, samples, seed).map_err(js)
    }

    /// Score of the last [`Demo::variance_map`] call; NaN when its region was empty.
    pub fn last_ca(&self) -> f64 {
        self.last_ca
    }
}

// Native entry points. `JsError` can only be built inside a JS host.
impl Demo {
    pub fn build(scene: &str, count: usize, views: usize, size: usize, seed: u64) -> Result<Demo, String> {
        let kind: SceneKind = scene.parse()?;
        if count == 0 || views == 0 || size == 0 {
            return Err("count, views and size must be positive".into());
        }
        let cloud = make_scene(&SceneSpec::new(kind, count, seed));
        let cameras = make_rig(&CameraRig::new(RigKind::Arc, views, size, size));
        Ok(Demo { cloud, cameras, last_ca: f64::NAN })
    }

    pub fn render_rgba(&self, view: usize, strategy: char, p: f64, seed: u64) -> Result<Vec<u8>, String> {
        let cam = self.camera(view)?;
        let strategy = Strategy::from_letter(strategy).ok_or("strategy must be A, B or C")?;
        if !(0.0..1.0).contains(&p) {
            return Err("p must lie in [0, 1)".into());
        }
        let out = render_with_strategy(&self.cloud, cam, p, strategy, Strategy::DEFAULT_AVERAGE_COUNT, seed);
        Ok(rgba_color(&out.color))
    }

    pub fn variance_rgba(&mut self, view: usize, drop_ratio: f64, samples: usize, seed: u64) -> Result<Vec<u8>, String> {
        let settings = CaSettings::new(drop_ratio, seed).with_samples(samples);
        let report = ca_score(&self.cloud, self.camera(view)?, &settings).map_err(|e| e.to_string())?;
        self.last_ca = report.ca.unwrap_or(f64::NAN);
        Ok(rgba_heat(&report.variance_map, &report.common_mask.pixels))
    }

    fn camera(&self, view: usize) -> Result<&Camera, String> {
        self.cameras.get(view).ok_or_else(|| format!("view {view} out of range, have {}", self.cameras.len()))
    }
}

/// Exact and first-order pixel variance of a gray ray over `steps` drop
/// rates spread evenly in `(0, 1)`. Returns `[p, exact, first_order]` triples
/// flattened into one array.
#[wasm_bindgen]
pub fn drop_rate_profile(values: &[f64], alphas: &[f64], steps: usize) -> Result<Vec<f64>, JsError> {
    profile(values, alphas, steps).map_err(js)
}

pub fn profile(values: &[f64], alphas: &[f64], steps: usize) -> Result<Vec<f64>, String> {
    if values.len() != alphas.len() || values.is_empty() || values.len() > MAX_RAY {
        return Err(format!("need between 1 and {MAX_RAY} entries with one alpha per value"));
    }
    if alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err("alphas must lie in [0, 1]".into());
    }
    let ray = RaySlice::new(values.iter().zip(alphas).map(|(&v, &a)| RayEntry::gray(v, a)).collect());
    let mut out = Vec::with_capacity(3 * steps);
    for i in 0..steps {
        let p = (i + 1) as f64 / (steps + 1) as f64;
        let exact = exact_pixel_variance(&ray, 1.0 - p).map_err(|e| e.to_string())?;
        out.extend([p, exact, first_order_ca(&ray, p)]);
    }
    Ok(out)
}

fn js(e: String) -> JsError {
    JsError::new(&e)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn rgba_color(img: &RgbImage) -> Vec<u8> {
    img.pixels.iter().flat_map(|c| [to_byte(c[0]), to_byte(c[1]), to_byte(c[2]), 255]).collect()
}

/// Black to red to yellow to white, normalized by the largest value inside the mask.
fn rgba_heat(img: &GrayImage, inside: &[bool]) -> Vec<u8> {
    let max = img.pixels.iter().zip(inside).filter(|(_, &m)| m).map(|(&v, _)| v).fold(0.0f64, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    img.pixels
        .iter()
        .enumerate()
        .flat_map(|(i, &v)| {
            if !inside[i] {
                return [10, 20, 60, 255];
            }
            let t = (v * scale).sqrt();
            [to_byte(3.0 * t), to_byte(3.0 * t - 1.0), to_byte(3.0 * t - 2.0), 255]
        })
        .collect()
}
