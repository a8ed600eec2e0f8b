//! Real spherical-harmonics basis up to degree 3.
//!
//! Uses the same sign and normalization convention as the common splatting
//! rasterizers, so coefficients are interchangeable with those tools.

use nalgebra::Vector3;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
pub const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

pub const MAX_SH_DEGREE: usize = 3;

/// Number of coefficients per color channel for `degree`.
pub const fn coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Basis values `Y_k(dir)` for `k < coeff_count(degree)`; unused slots are zero.
pub fn basis(degree: usize, dir: &Vector3<f64>) -> [f64; 16] {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let mut b = [0.0; 16];
    b[0] = SH_C0;
    if degree >= 1 {
        b[1] = -SH_C1 * y;
        b[2] = SH_C1 * z;
        b[3] = -SH_C1 * x;
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b[4] = SH_C2[0] * x * y;
        b[5] = SH_C2[1] * y * z;
        b[6] = SH_C2[2] * (2.0 * zz - xx - yy);
        b[7] = SH_C2[3] * x * z;
        b[8] = SH_C2[4] * (xx - yy);
        if degree >= 3 {
            b[9] = SH_C3[0] * y * (3.0 * xx - yy);
            b[10] = SH_C3[1] * x * y * z;
            b[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
            b[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
            b[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
            b[14] = SH_C3[5] * z * (xx - yy);
            b[15] = SH_C3[6] * x * (xx - 3.0 * yy);
        }
    }
    b
}

/// Partial derivatives of each basis polynomial with respect to the
/// (unnormalized) direction components.
pub fn basis_gradient(degree: usize, dir: &Vector3<f64>) -> [Vector3<f64>; 16] {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let mut g = [Vector3::zeros(); 16];
    if degree >= 1 {
        g[1] = Vector3::new(0.0, -SH_C1, 0.0);
        g[2] = Vector3::new(0.0, 0.0, SH_C1);
        g[3] = Vector3::new(-SH_C1, 0.0, 0.0);
    }
    if degree >= 2 {
        g[4] = Vector3::new(y, x, 0.0) * SH_C2[0];
        g[5] = Vector3::new(0.0, z, y) * SH_C2[1];
        g[6] = Vector3::new(-2.0 * x, -2.0 * y, 4.0 * z) * SH_C2[2];
        g[7] = Vector3::new(z, 0.0, x) * SH_C2[3];
        g[8] = Vector3::new(2.0 * x, -2.0 * y, 0.0) * SH_C2[4];
        if degree >= 3 {
            let (xx, yy, zz) = (x * x, y * y, z * z);
            g[9] = Vector3::new(6.0 * x * y, 3.0 * xx - 3.0 * yy, 0.0) * SH_C3[0];
            g[10] = Vector3::new(y * z, x * z, x * y) * SH_C3[1];
            g[11] = Vector3::new(-2.0 * x * y, 4.0 * zz - xx - 3.0 * yy, 8.0 * y * z) * SH_C3[2];
            g[12] = Vector3::new(-6.0 * x * z, -6.0 * y * z, 6.0 * zz - 3.0 * xx - 3.0 * yy)
                * SH_C3[3];
            g[13] = Vector3::new(4.0 * zz - 3.0 * xx - yy, -2.0 * x * y, 8.0 * x * z) * SH_C3[4];
            g[14] = Vector3::new(2.0 * x * z, -2.0 * y * z, xx - yy) * SH_C3[5];
            g[15] = Vector3::new(3.0 * xx - 3.0 * yy, -6.0 * x * y, 0.0) * SH_C3[6];
        }
    }
    g
}

/// Degree of each basis slot.
pub const fn band_of(k: usize) -> usize {
    match k {
        0 => 0,
        1..=3 => 1,
        4..=8 => 2,
        _ => 3,
    }
}

/// Convert a linear RGB value to the DC coefficient that reproduces it.
pub fn rgb_to_dc(rgb: [f64; 3]) -> Vector3<f64> {
    Vector3::new(
        (rgb[0] - 0.5) / SH_C0,
        (rgb[1] - 0.5) / SH_C0,
        (rgb[2] - 0.5) / SH_C0,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_matches_central_differences() {
        let d = Vector3::new(0.3, -0.5, 0.81);
        let g = basis_gradient(3, &d);
        let h = 1e-6;
        for axis in 0..3 {
            let mut p = d;
            let mut m = d;
            p[axis] += h;
            m[axis] -= h;
            let bp = basis(3, &p);
            let bm = basis(3, &m);
            for k in 0..16 {
                let fd = (bp[k] - bm[k]) / (2.0 * h);
                assert!((fd - g[k][axis]).abs() < 1e-8, "k={k} axis={axis}");
            }
        }
    }

    #[test]
    fn parity_follows_band() {
        let d = Vector3::new(0.2, 0.7, -0.4).normalize();
        let b = basis(3, &d);
        let f = basis(3, &(-d));
        for k in 0..16 {
            let sign = if band_of(k) % 2 == 0 { 1.0 } else { -1.0 };
            assert!((b[k] - sign * f[k]).abs() < 1e-15);
        }
    }
}
