//! Scene representation: Gaussians, clouds and pinhole cameras.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::sh;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("SH degree {0} is not supported (maximum is 3)")]
    UnsupportedShDegree(usize),
    #[error("gaussian {index} has {found} SH coefficients, expected {expected}")]
    ShLengthMismatch {
        index: usize,
        found: usize,
        expected: usize,
    },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One anisotropic 3D Gaussian.
///
/// Opacity and scale are stored pre-activation (logit and log) so that the
/// optimizer works in an unconstrained space.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub position: Vector3<f64>,
    /// Stored as (w, x, y, z); unit norm after every optimizer step.
    pub rotation: Quaternion<f64>,
    pub log_scale: Vector3<f64>,
    pub opacity_logit: f64,
    /// One RGB triple per basis function, `(degree + 1)^2` entries.
    pub sh: Vec<Vector3<f64>>,
}

impl Gaussian {
    /// An axis-aligned Gaussian with a constant color.
    pub fn isotropic(position: Vector3<f64>, scale: f64, opacity: f64, rgb: [f64; 3], sh_degree: usize) -> Self {
        let mut coeffs = vec![Vector3::zeros(); sh::coeff_count(sh_degree)];
        coeffs[0] = sh::rgb_to_dc(rgb);
        Self {
            position,
            rotation: Quaternion::identity(),
            log_scale: Vector3::repeat(scale.ln()),
            opacity_logit: logit(opacity),
            sh: coeffs,
        }
    }

    pub fn opacity(&self) -> f64 {
        activate_opacity(self)
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        rotation_matrix(&self.rotation)
    }

    pub fn normalize_rotation(&mut self) {
        let n = self.rotation.norm();
        if n > 0.0 {
            self.rotation /= n;
        } else {
            self.rotation = Quaternion::identity();
        }
    }

    /// Number of scalar parameters for the given SH degree.
    pub const fn param_count(sh_degree: usize) -> usize {
        3 + 4 + 3 + 1 + 3 * sh::coeff_count(sh_degree)
    }

    /// Write parameters in storage order: position, quaternion (w,x,y,z),
    /// log_scale, opacity_logit, SH coefficients.
    pub fn write_params(&self, out: &mut [f64]) {
        out[0..3].copy_from_slice(self.position.as_slice());
        out[3] = self.rotation.w;
        out[4] = self.rotation.i;
        out[5] = self.rotation.j;
        out[6] = self.rotation.k;
        out[7..10].copy_from_slice(self.log_scale.as_slice());
        out[10] = self.opacity_logit;
        for (k, c) in self.sh.iter().enumerate() {
            out[11 + 3 * k..14 + 3 * k].copy_from_slice(c.as_slice());
        }
    }

    pub fn read_params(&mut self, src: &[f64]) {
        self.position = Vector3::new(src[0], src[1], src[2]);
        self.rotation = Quaternion::new(src[3], src[4], src[5], src[6]);
        self.log_scale = Vector3::new(src[7], src[8], src[9]);
        self.opacity_logit = src[10];
        for (k, c) in self.sh.iter_mut().enumerate() {
            *c = Vector3::new(src[11 + 3 * k], src[12 + 3 * k], src[13 + 3 * k]);
        }
    }
}

/// Ordered set of Gaussians sharing one SH degree. Indices are stable and
/// identify Gaussians across dropout masks.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub gaussians: Vec<Gaussian>,
    pub sh_degree: usize,
}

impl GaussianCloud {
    pub fn new(sh_degree: usize) -> Result<Self, ModelError> {
        if sh_degree > sh::MAX_SH_DEGREE {
            return Err(ModelError::UnsupportedShDegree(sh_degree));
        }
        Ok(Self {
            gaussians: Vec::new(),
            sh_degree,
        })
    }

    pub fn from_gaussians(gaussians: Vec<Gaussian>, sh_degree: usize) -> Result<Self, ModelError> {
        let cloud = Self {
            gaussians,
            sh_degree,
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.sh_degree > sh::MAX_SH_DEGREE {
            return Err(ModelError::UnsupportedShDegree(self.sh_degree));
        }
        let expected = sh::coeff_count(self.sh_degree);
        for (index, g) in self.gaussians.iter().enumerate() {
            if g.sh.len() != expected {
                return Err(ModelError::ShLengthMismatch {
                    index,
                    found: g.sh.len(),
                    expected,
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.gaussians.iter().map(|g| g.position).collect()
    }

    /// Copy of the cloud keeping only flagged Gaussians, in order.
    pub fn filtered(&self, keep: &[bool]) -> Self {
        Self {
            gaussians: self
                .gaussians
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(g, _)| g.clone())
                .collect(),
            sh_degree: self.sh_degree,
        }
    }

    /// Change the SH degree, truncating or zero-padding the coefficients.
    pub fn with_sh_degree(&self, degree: usize) -> Result<Self, ModelError> {
        if degree > sh::MAX_SH_DEGREE {
            return Err(ModelError::UnsupportedShDegree(degree));
        }
        let n = sh::coeff_count(degree);
        let gaussians = self
            .gaussians
            .iter()
            .map(|g| {
                let mut g = g.clone();
                g.sh.resize(n, Vector3::zeros());
                g
            })
            .collect();
        Ok(Self {
            gaussians,
            sh_degree: degree,
        })
    }
}

/// Activated opacity, strictly inside (0, 1) for finite logits.
pub fn activate_opacity(g: &Gaussian) -> f64 {
    sigmoid(g.opacity_logit)
}

pub fn rotation_matrix(q: &Quaternion<f64>) -> Matrix3<f64> {
    let n = q.norm();
    let (w, x, y, z) = (q.w / n, q.i / n, q.j / n, q.k / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// World-space covariance `R diag(s^2) R^T`.
pub fn covariance_world(g: &Gaussian) -> Matrix3<f64> {
    let m = g.rotation_matrix() * Matrix3::from_diagonal(&g.scale());
    m * m.transpose()
}

/// View-dependent color: `clamp(sum_k c_k Y_k(dir) + 0.5, 0, 1)` per channel.
pub fn sh_to_color(coeffs: &[Vector3<f64>], degree: usize, view_dir: &Vector3<f64>) -> Result<[f64; 3], ModelError> {
    if degree > sh::MAX_SH_DEGREE {
        return Err(ModelError::UnsupportedShDegree(degree));
    }
    Ok(sh_color_unclamped(coeffs, degree, view_dir).map(|c| c.clamp(0.0, 1.0)))
}

pub(crate) fn sh_color_unclamped(coeffs: &[Vector3<f64>], degree: usize, view_dir: &Vector3<f64>) -> [f64; 3] {
    let b = sh::basis(degree, view_dir);
    let mut rgb = [0.5; 3];
    for (k, c) in coeffs.iter().take(sh::coeff_count(degree)).enumerate() {
        for ch in 0..3 {
            rgb[ch] += c[ch] * b[k];
        }
    }
    rgb
}

/// Pinhole camera with an OpenCV-style frame: x right, y down, z forward.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation.
    pub translation: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        near: f64,
        far: f64,
    ) -> Result<Self, ModelError> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            translation,
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`. `up` is the world direction that
    /// should appear upwards in the image.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Self, ModelError> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| ModelError::InvalidCamera("eye coincides with target".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| ModelError::InvalidCamera("up is parallel to the view direction".into()))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::new(
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
            rotation,
            translation,
            near,
            far,
        )
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.near > 0.0) {
            return Err(ModelError::InvalidCamera(format!("near must be > 0, got {}", self.near)));
        }
        if !(self.far > self.near) {
            return Err(ModelError::InvalidCamera(format!(
                "far ({}) must exceed near ({})",
                self.far, self.near
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(ModelError::InvalidCamera("image size must be at least 1x1".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(ModelError::InvalidCamera("focal lengths must be positive".into()));
        }
        let r = self.rotation;
        if ((r * r.transpose()) - Matrix3::identity()).abs().max() > 1e-6 {
            return Err(ModelError::InvalidCamera("rotation is not orthonormal".into()));
        }
        Ok(())
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Random unit quaternion, uniformly distributed on SO(3).
pub fn random_rotation<R: rand::Rng + ?Sized>(rng: &mut R) -> Quaternion<f64> {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random::<f64>() * std::f64::consts::TAU;
    let u3: f64 = rng.random::<f64>() * std::f64::consts::TAU;
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    let q = UnitQuaternion::from_quaternion(Quaternion::new(a * u2.sin(), a * u2.cos(), b * u3.sin(), b * u3.cos()));
    *q.quaternion()
}
