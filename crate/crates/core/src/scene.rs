//! Synthetic ground-truth scenes, camera rigs and view splits.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::image::RgbImage;
use crate::model::{logit, random_rotation, Camera, Gaussian, GaussianCloud};
use crate::render::{render, RenderOptions};
use crate::rng;
use crate::sh::rgb_to_dc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    /// Three textured planes stacked in depth.
    TexturedPlaneStack,
    /// Randomly placed anisotropic blobs filling a cube.
    RandomBlobField,
    /// Flat Gaussians tiling the faces of a box with a checker pattern.
    CheckerBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Palette {
    Continuous,
    /// Every target color is gray.
    GrayscaleTargets,
}

macro_rules! name_table {
    ($ty:ty, $( $variant:path => $name:literal ),+ $(,)?) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                match self { $( $variant => $name ),+ }
            }
        }
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $( $name => Ok($variant), )+
                    _ => Err(format!("unknown value '{s}', expected one of: {}", [$( $name ),+].join(", "))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

name_table!(SceneKind,
    SceneKind::TexturedPlaneStack => "textured-plane-stack",
    SceneKind::RandomBlobField => "random-blob-field",
    SceneKind::CheckerBox => "checker-box",
);
name_table!(Palette, Palette::Continuous => "continuous", Palette::GrayscaleTargets => "grayscale-targets");
name_table!(RigKind, RigKind::Arc => "arc", RigKind::Ring => "ring");
name_table!(SplitProtocol, SplitProtocol::EveryKth => "every-kth", SplitProtocol::FirstN => "first-n");

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub gaussian_count: usize,
    /// Edge length of the cube centered at the origin that bounds all centers.
    pub extent: f64,
    pub palette: Palette,
    pub seed: u64,
}

impl SceneSpec {
    pub fn new(kind: SceneKind, gaussian_count: usize, seed: u64) -> Self {
        Self {
            kind,
            gaussian_count,
            extent: 2.0,
            palette: Palette::Continuous,
            seed,
        }
    }
}

/// Build a degree-0 ground-truth cloud.
pub fn make_scene(spec: &SceneSpec) -> GaussianCloud {
    assert!(spec.gaussian_count >= 1, "scene needs at least one Gaussian");
    assert!(spec.extent > 0.0, "extent must be positive");
    let mut r = rng::stream(spec.seed, rng::SCENE, 0);
    let half = spec.extent / 2.0;
    let mut gaussians = if spec.gaussian_count == 1 {
        vec![Gaussian::isotropic(Vector3::zeros(), spec.extent / 4.0, 0.9, [0.8, 0.5, 0.3], 0)]
    } else {
        match spec.kind {
            SceneKind::RandomBlobField => blob_field(spec.gaussian_count, half, &mut r),
            SceneKind::TexturedPlaneStack => plane_stack(spec.gaussian_count, half, &mut r),
            SceneKind::CheckerBox => checker_box(spec.gaussian_count, half, &mut r),
        }
    };
    for g in &mut gaussians {
        g.position = g.position.map(|v| v.clamp(-half, half));
        if spec.palette == Palette::GrayscaleTargets {
            let c = dc_to_rgb(&g.sh[0]);
            let y = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
            g.sh[0] = rgb_to_dc([y; 3]);
        }
    }
    GaussianCloud::from_gaussians(gaussians, 0).expect("generated cloud is valid")
}

fn dc_to_rgb(dc: &Vector3<f64>) -> [f64; 3] {
    std::array::from_fn(|ch| dc[ch] * crate::sh::SH_C0 + 0.5)
}

fn blob(position: Vector3<f64>, scale: Vector3<f64>, rotation: Quaternion<f64>, opacity: f64, rgb: [f64; 3]) -> Gaussian {
    Gaussian {
        position,
        rotation,
        log_scale: scale.map(f64::ln),
        opacity_logit: logit(opacity),
        sh: vec![rgb_to_dc(rgb)],
    }
}

fn random_color(r: &mut ChaCha8Rng) -> [f64; 3] {
    std::array::from_fn(|_| r.random_range(0.1..0.9))
}

fn blob_field(n: usize, half: f64, r: &mut ChaCha8Rng) -> Vec<Gaussian> {
    let spacing = (8.0 * half.powi(3) / n as f64).cbrt();
    (0..n)
        .map(|_| {
            let p = Vector3::from_fn(|_, _| r.random_range(-half..half));
            let s = Vector3::from_fn(|_, _| spacing * r.random_range(0.3f64..0.8));
            blob(p, s, random_rotation(r), r.random_range(0.7..0.98), random_color(r))
        })
        .collect()
}

/// Smooth color texture over a plane, distinct per layer.
fn texture(u: f64, v: f64, layer: usize) -> [f64; 3] {
    let phase = layer as f64 * 1.7;
    [
        0.5 + 0.4 * (3.0 * u + phase).sin(),
        0.5 + 0.4 * (4.0 * v - phase).cos(),
        0.5 + 0.4 * (2.5 * (u + v) + 2.0 * phase).sin(),
    ]
}

fn plane_stack(n: usize, half: f64, r: &mut ChaCha8Rng) -> Vec<Gaussian> {
    const LAYERS: usize = 3;
    let sizes = [0.5, 0.75, 1.0];
    let depths = [-half * 2.0 / 3.0, 0.0, half * 2.0 / 3.0];
    let mut out = Vec::with_capacity(n);
    for layer in 0..LAYERS {
        let count = n / LAYERS + usize::from(layer < n % LAYERS);
        if count == 0 {
            continue;
        }
        let size = half * sizes[layer];
        let side = (count as f64).sqrt().ceil() as usize;
        let spacing = 2.0 * size / side as f64;
        for i in 0..count {
            let (gx, gy) = (i % side, i / side);
            let u = -size + spacing * (gx as f64 + r.random_range(0.25..0.75));
            let v = -size + spacing * (gy as f64 + r.random_range(0.25..0.75));
            let s = Vector3::new(spacing * 0.6, spacing * 0.6, spacing * 0.08);
            let rot = UnitQuaternion::from_euler_angles(0.0, 0.0, r.random_range(0.0..PI));
            out.push(blob(Vector3::new(u, v, depths[layer]), s, *rot.quaternion(), 0.9, texture(u / half, v / half, layer)));
        }
    }
    out
}

fn checker_box(n: usize, half: f64, r: &mut ChaCha8Rng) -> Vec<Gaussian> {
    let size = half * 0.8;
    let colors = [[0.85, 0.3, 0.2], [0.2, 0.35, 0.8], [0.9, 0.85, 0.3], [0.25, 0.7, 0.35], [0.8, 0.8, 0.8], [0.55, 0.3, 0.7]];
    let mut out = Vec::with_capacity(n);
    for face in 0..6 {
        let count = n / 6 + usize::from(face < n % 6);
        if count == 0 {
            continue;
        }
        let side = (count as f64).sqrt().ceil() as usize;
        let spacing = 2.0 * size / side as f64;
        let axis = face / 2;
        let sign = if face % 2 == 0 { -1.0 } else { 1.0 };
        // Rotation taking the local thin z axis onto the face normal.
        let rot = match axis {
            0 => UnitQuaternion::from_euler_angles(0.0, PI / 2.0, 0.0),
            1 => UnitQuaternion::from_euler_angles(PI / 2.0, 0.0, 0.0),
            _ => UnitQuaternion::identity(),
        };
        for i in 0..count {
            let (gx, gy) = (i % side, i / side);
            let u = -size + spacing * (gx as f64 + r.random_range(0.3..0.7));
            let v = -size + spacing * (gy as f64 + r.random_range(0.3..0.7));
            let mut p = Vector3::zeros();
            p[axis] = sign * size;
            p[(axis + 1) % 3] = u;
            p[(axis + 2) % 3] = v;
            let checker = (gx / 2 + gy / 2) % 2;
            let base = colors[face];
            let rgb = if checker == 0 { base } else { base.map(|c| c * 0.35) };
            let s = Vector3::new(spacing * 0.6, spacing * 0.6, spacing * 0.08);
            out.push(blob(p, s, *rot.quaternion(), 0.95, rgb));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RigKind {
    /// Forward-facing cameras on an arc of at most 60 degrees.
    Arc,
    /// Inward-facing cameras evenly spaced on a full circle.
    Ring,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraRig {
    pub kind: RigKind,
    pub count: usize,
    pub radius: f64,
    pub width: usize,
    pub height: usize,
    pub fov_deg: f64,
    /// Random pose perturbation amplitude in degrees; zero disables it.
    pub jitter_deg: f64,
    pub jitter_seed: u64,
}

impl CameraRig {
    pub const ARC_SPAN_DEG: f64 = 60.0;
    pub const RING_ELEVATION_DEG: f64 = 20.0;

    pub fn new(kind: RigKind, count: usize, width: usize, height: usize) -> Self {
        Self {
            kind,
            count,
            radius: 4.0,
            width,
            height,
            fov_deg: 32.0,
            jitter_deg: 0.0,
            jitter_seed: 0,
        }
    }
}

/// Cameras looking at the origin.
pub fn make_rig(rig: &CameraRig) -> Vec<Camera> {
    assert!(rig.count >= 1, "rig needs at least one camera");
    let focal = rig.width as f64 / 2.0 / (rig.fov_deg.to_radians() / 2.0).tan();
    let mut r = rng::stream(rig.jitter_seed, rng::RIG, 0);
    (0..rig.count)
        .map(|i| {
            let (mut azimuth, mut elevation) = match rig.kind {
                RigKind::Arc if rig.count == 1 => (0.0, 0.0),
                RigKind::Arc => {
                    let t = i as f64 / (rig.count - 1) as f64;
                    let span = CameraRig::ARC_SPAN_DEG.to_radians();
                    (span * (t - 0.5), 0.12 * (TAU * t).sin())
                }
                RigKind::Ring => (TAU * i as f64 / rig.count as f64, CameraRig::RING_ELEVATION_DEG.to_radians()),
            };
            if rig.jitter_deg > 0.0 {
                let j = rig.jitter_deg.to_radians();
                azimuth += r.random_range(-j..j);
                elevation += r.random_range(-j..j);
            }
            let eye = rig.radius * Vector3::new(azimuth.sin() * elevation.cos(), -elevation.sin(), -azimuth.cos() * elevation.cos());
            Camera::look_at(eye, Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0), focal, rig.width, rig.height, 0.05, rig.radius * 4.0)
                .expect("rig camera is valid")
        })
        .collect()
}

/// Noiseless ground-truth renders.
pub fn render_dataset(gt: &GaussianCloud, cams: &[Camera]) -> Vec<RgbImage> {
    cams.iter().map(|c| render(gt, c, &RenderOptions::default()).color).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitProtocol {
    /// Training views spread evenly over the rig.
    EveryKth,
    /// The first `n_train` views.
    FirstN,
}

/// Disjoint, exhaustive train and test index lists.
pub fn split_views(count: usize, n_train: usize, protocol: SplitProtocol) -> (Vec<usize>, Vec<usize>) {
    assert!(n_train >= 1 && n_train < count, "need 1 <= n_train < count, got {n_train} of {count}");
    let train: Vec<usize> = match protocol {
        SplitProtocol::EveryKth => (0..n_train).map(|i| i * count / n_train).collect(),
        SplitProtocol::FirstN => (0..n_train).collect(),
    };
    let test = (0..count).filter(|i| !train.contains(i)).collect();
    (train, test)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitMode {
    /// Uniform positions in the scene cube with random colors.
    #[serde(rename = "random")]
    Random,
    /// Ground truth with jittered positions and colors.
    #[serde(rename = "perturbed-gt")]
    PerturbedGroundTruth,
}

name_table!(InitMode, InitMode::Random => "random", InitMode::PerturbedGroundTruth => "perturbed-gt");

/// Random initial cloud inside the cube of edge `extent`.
pub fn init_random(count: usize, extent: f64, sh_degree: usize, seed: u64) -> GaussianCloud {
    let mut r = rng::stream(seed, rng::INIT, 0);
    let half = extent / 2.0;
    let spacing = (extent.powi(3) / count.max(1) as f64).cbrt();
    let gaussians = (0..count)
        .map(|_| {
            let p = Vector3::from_fn(|_, _| r.random_range(-half..half));
            let mut g = Gaussian::isotropic(p, spacing * 0.5, 0.3, random_color(&mut r), sh_degree);
            g.rotation = random_rotation(&mut r);
            g
        })
        .collect();
    GaussianCloud::from_gaussians(gaussians, sh_degree).expect("generated cloud is valid")
}

/// Ground truth copy with positions jittered by `position_sigma` and colors
/// by `color_sigma`, lifted to `sh_degree`.
pub fn init_perturbed(gt: &GaussianCloud, position_sigma: f64, color_sigma: f64, sh_degree: usize, seed: u64) -> GaussianCloud {
    use rand_distr::{Distribution, Normal};
    let mut r = rng::stream(seed, rng::INIT, 1);
    let pos = Normal::new(0.0, position_sigma.max(0.0)).expect("finite sigma");
    let col = Normal::new(0.0, color_sigma.max(0.0)).expect("finite sigma");
    let mut cloud = gt.with_sh_degree(sh_degree).expect("supported degree");
    for g in &mut cloud.gaussians {
        g.position += Vector3::from_fn(|_, _| pos.sample(&mut r));
        let rgb = dc_to_rgb(&g.sh[0]).map(|c| (c + col.sample(&mut r)).clamp(0.0, 1.0));
        g.sh[0] = rgb_to_dc(rgb);
    }
    cloud
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_gaussian_scene_is_centered() {
        for kind in [SceneKind::RandomBlobField, SceneKind::TexturedPlaneStack, SceneKind::CheckerBox] {
            let c = make_scene(&SceneSpec::new(kind, 1, 4));
            assert_eq!(c.len(), 1);
            assert_eq!(c.gaussians[0].position, Vector3::zeros());
        }
    }

    #[test]
    fn scenes_are_deterministic_and_bounded() {
        for kind in [SceneKind::RandomBlobField, SceneKind::TexturedPlaneStack, SceneKind::CheckerBox] {
            let mut spec = SceneSpec::new(kind, 200, 9);
            spec.extent = 3.0;
            let a = make_scene(&spec);
            assert_eq!(a, make_scene(&spec));
            assert_eq!(a.len(), 200);
            assert!(a.gaussians.iter().all(|g| g.position.iter().all(|v| v.abs() <= 1.5)));
            a.validate().unwrap();
        }
    }

    #[test]
    fn grayscale_palette_is_gray() {
        let mut spec = SceneSpec::new(SceneKind::RandomBlobField, 50, 2);
        spec.palette = Palette::GrayscaleTargets;
        for g in &make_scene(&spec).gaussians {
            assert!((g.sh[0].x - g.sh[0].y).abs() < 1e-15 && (g.sh[0].y - g.sh[0].z).abs() < 1e-15);
        }
    }

    #[test]
    fn blob_field_covers_first_view() {
        let cloud = make_scene(&SceneSpec::new(SceneKind::RandomBlobField, 500, 1));
        let cam = &make_rig(&CameraRig::new(RigKind::Arc, 12, 48, 48))[0];
        let out = render(&cloud, cam, &RenderOptions::default());
        let covered = out.alpha.pixels.iter().filter(|&&a| a > 0.8).count();
        assert!(covered * 2 >= out.alpha.len(), "{covered} of {}", out.alpha.len());
    }

    #[test]
    fn rig_examples() {
        let one = make_rig(&CameraRig::new(RigKind::Arc, 1, 16, 16));
        assert_eq!(one.len(), 1);
        let c = one[0].center();
        assert!(c.x.abs() < 1e-12 && c.y.abs() < 1e-12);

        let ring = make_rig(&CameraRig::new(RigKind::Ring, 8, 16, 16));
        let az: Vec<f64> = ring.iter().map(|c| c.center().x.atan2(-c.center().z)).collect();
        for i in 0..8 {
            let gap = (az[(i + 1) % 8] - az[i]).rem_euclid(TAU).to_degrees();
            assert!((gap - 45.0).abs() < 1e-9, "{gap}");
        }

        let arc = make_rig(&CameraRig::new(RigKind::Arc, 12, 16, 16));
        let az: Vec<f64> = arc.iter().map(|c| c.center().x.atan2(-c.center().z).to_degrees()).collect();
        let span = az.iter().cloned().fold(f64::MIN, f64::max) - az.iter().cloned().fold(f64::MAX, f64::min);
        assert!(span <= 60.0 + 1e-9);

        let mut jittered = CameraRig::new(RigKind::Ring, 5, 20, 12);
        jittered.jitter_deg = 3.0;
        for cam in arc.iter().chain(&ring).chain(&make_rig(&jittered)) {
            let p = cam.to_camera(&Vector3::zeros());
            let (u, v) = (cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy);
            assert!(p.z > 0.0 && (0.0..cam.width as f64).contains(&u) && (0.0..cam.height as f64).contains(&v));
        }
    }

    #[test]
    fn split_examples() {
        assert_eq!(split_views(12, 3, SplitProtocol::EveryKth), (vec![0, 4, 8], vec![1, 2, 3, 5, 6, 7, 9, 10, 11]));
        assert_eq!(split_views(12, 11, SplitProtocol::FirstN).1, vec![11]);
        for n in 1..12 {
            for proto in [SplitProtocol::EveryKth, SplitProtocol::FirstN] {
                let (tr, te) = split_views(12, n, proto);
                let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
                all.sort();
                assert_eq!(all, (0..12).collect::<Vec<_>>());
                assert_eq!(tr.len(), n);
            }
        }
    }

    #[test]
    fn empty_cloud_renders_black() {
        let cams = make_rig(&CameraRig::new(RigKind::Arc, 2, 8, 8));
        let imgs = render_dataset(&GaussianCloud::new(0).unwrap(), &cams);
        assert!(imgs.iter().all(|i| i.pixels.iter().all(|p| *p == [0.0; 3])));
    }

    #[test]
    fn names_round_trip() {
        for k in [SceneKind::RandomBlobField, SceneKind::TexturedPlaneStack, SceneKind::CheckerBox] {
            assert_eq!(k.name().parse::<SceneKind>().unwrap(), k);
        }
        assert!("sphere".parse::<SceneKind>().is_err());
        assert_eq!("every-kth".parse::<SplitProtocol>().unwrap(), SplitProtocol::EveryKth);
    }
}
