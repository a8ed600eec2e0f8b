//! On-disk formats: CSPL clouds, PFM/PPM images and dataset manifests.
//!
//! CSPL layout, all little-endian: magic `CSPL`, u32 format version, u32 SH
//! degree, u64 Gaussian count, then per Gaussian the f64 fields in
//! parameter order (position, quaternion w x y z, log-scale, opacity logit,
//! SH coefficients).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::image::{GrayImage, Image, RgbImage};
use crate::model::{Camera, Gaussian, GaussianCloud, ModelError};

pub const CSPL_MAGIC: &[u8; 4] = b"CSPL";
pub const CSPL_VERSION: u32 = 1;
const CSPL_HEADER: usize = 4 + 4 + 4 + 8;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: bad magic {found:?}, expected {expected:?}")]
    BadMagic { path: PathBuf, found: String, expected: String },
    #[error("{path}: unsupported format version {found}, expected {CSPL_VERSION}")]
    Version { path: PathBuf, found: u32 },
    #[error("{path}: expected {expected} bytes, found {actual}")]
    Length { path: PathBuf, expected: u64, actual: u64 },
    #[error("{path}: malformed header: {reason}")]
    Header { path: PathBuf, reason: String },
    #[error("{path}:{line}: {reason}")]
    Manifest { path: PathBuf, line: usize, reason: String },
    #[error("{path}: {source}")]
    Model { path: PathBuf, source: ModelError },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_owned(), source }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))
}

pub fn encode_cloud(cloud: &GaussianCloud) -> Vec<u8> {
    let stride = Gaussian::param_count(cloud.sh_degree);
    let mut out = Vec::with_capacity(CSPL_HEADER + cloud.len() * stride * 8);
    out.extend_from_slice(CSPL_MAGIC);
    out.extend_from_slice(&CSPL_VERSION.to_le_bytes());
    out.extend_from_slice(&(cloud.sh_degree as u32).to_le_bytes());
    out.extend_from_slice(&(cloud.len() as u64).to_le_bytes());
    let mut buf = vec![0.0; stride];
    for g in &cloud.gaussians {
        g.write_params(&mut buf);
        for v in &buf {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_cloud(bytes: &[u8], path: &Path) -> Result<GaussianCloud, IoError> {
    let len = bytes.len() as u64;
    if bytes.len() < CSPL_HEADER {
        return Err(IoError::Length { path: path.to_owned(), expected: CSPL_HEADER as u64, actual: len });
    }
    if &bytes[..4] != CSPL_MAGIC {
        return Err(IoError::BadMagic {
            path: path.to_owned(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
            expected: "CSPL".into(),
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != CSPL_VERSION {
        return Err(IoError::Version { path: path.to_owned(), found: version });
    }
    let degree = u32_at(8) as usize;
    let count = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let model_err = |source| IoError::Model { path: path.to_owned(), source };
    let mut cloud = GaussianCloud::new(degree).map_err(model_err)?;
    let stride = Gaussian::param_count(degree);
    let expected = (count as u128) * (stride as u128) * 8 + CSPL_HEADER as u128;
    if expected != len as u128 {
        return Err(IoError::Length {
            path: path.to_owned(),
            expected: expected.min(u64::MAX as u128) as u64,
            actual: len,
        });
    }
    let mut buf = vec![0.0; stride];
    for chunk in bytes[CSPL_HEADER..].chunks_exact(stride * 8) {
        for (v, b) in buf.iter_mut().zip(chunk.chunks_exact(8)) {
            *v = f64::from_le_bytes(b.try_into().expect("8 bytes"));
        }
        let mut g = Gaussian::isotropic(Vector3::zeros(), 1.0, 0.5, [0.5; 3], degree);
        g.read_params(&buf);
        cloud.gaussians.push(g);
    }
    cloud.validate().map_err(model_err)?;
    Ok(cloud)
}

pub fn save_cloud(path: &Path, cloud: &GaussianCloud) -> Result<(), IoError> {
    write_file(path, &encode_cloud(cloud))
}

pub fn load_cloud(path: &Path) -> Result<GaussianCloud, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_cloud(&bytes, path)
}

/// Parse the first `tokens` whitespace-separated header fields of a PFM or PPM file
/// and return them with the offset of the binary payload.
fn read_header<'a>(bytes: &'a [u8], path: &Path, tokens: usize) -> Result<(Vec<&'a str>, usize), IoError> {
    let header_err = |reason: &str| IoError::Header { path: path.to_owned(), reason: reason.into() };
    let mut out = Vec::with_capacity(tokens);
    let mut i = 0;
    while out.len() < tokens {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(header_err("unexpected end of header"));
        }
        out.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| header_err("header is not ASCII"))?);
    }
    // Exactly one whitespace byte separates the header from the payload.
    if i >= bytes.len() {
        return Err(header_err("missing payload"));
    }
    Ok((out, i + 1))
}

fn parse_dims(w: &str, h: &str, path: &Path) -> Result<(usize, usize), IoError> {
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| IoError::Header { path: path.to_owned(), reason: format!("bad dimension '{s}'") })
    };
    Ok((parse(w)?, parse(h)?))
}

/// PFM encoding: rows bottom to top, little-endian `f32`, negative scale.
fn encode_pfm(width: usize, height: usize, channels: usize, value: impl Fn(usize, usize) -> f64) -> Vec<u8> {
    let tag = if channels == 3 { "PF" } else { "Pf" };
    let mut out = format!("{tag}\n{width} {height}\n-1.0\n").into_bytes();
    out.reserve(width * height * channels * 4);
    for y in (0..height).rev() {
        for x in 0..width {
            for ch in 0..channels {
                out.extend_from_slice(&(value(y * width + x, ch) as f32).to_le_bytes());
            }
        }
    }
    out
}

fn decode_pfm(bytes: &[u8], path: &Path, channels: usize) -> Result<(usize, usize, Vec<f64>), IoError> {
    let (tokens, offset) = read_header(bytes, path, 4)?;
    let tag = if channels == 3 { "PF" } else { "Pf" };
    if tokens[0] != tag {
        return Err(IoError::BadMagic { path: path.to_owned(), found: tokens[0].into(), expected: tag.into() });
    }
    let (w, h) = parse_dims(tokens[1], tokens[2], path)?;
    let scale: f64 = tokens[3]
        .parse()
        .map_err(|_| IoError::Header { path: path.to_owned(), reason: format!("bad scale '{}'", tokens[3]) })?;
    let little = scale < 0.0;
    let expected = offset + w * h * channels * 4;
    if bytes.len() != expected {
        return Err(IoError::Length { path: path.to_owned(), expected: expected as u64, actual: bytes.len() as u64 });
    }
    let mut values = vec![0.0; w * h * channels];
    for (k, b) in bytes[offset..].chunks_exact(4).enumerate() {
        let raw: [u8; 4] = b.try_into().expect("4 bytes");
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (pixel, ch) = (k / channels, k % channels);
        let (row_from_bottom, x) = (pixel / w, pixel % w);
        let y = h - 1 - row_from_bottom;
        values[(y * w + x) * channels + ch] = v as f64;
    }
    Ok((w, h, values))
}

pub fn save_pfm(path: &Path, img: &RgbImage) -> Result<(), IoError> {
    write_file(path, &encode_pfm(img.width, img.height, 3, |i, ch| img.pixels[i][ch]))
}

pub fn load_pfm(path: &Path) -> Result<RgbImage, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (w, h, v) = decode_pfm(&bytes, path, 3)?;
    Ok(Image::from_pixels(w, h, v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()))
}

pub fn save_pfm_gray(path: &Path, img: &GrayImage) -> Result<(), IoError> {
    write_file(path, &encode_pfm(img.width, img.height, 1, |i, _| img.pixels[i]))
}

pub fn load_pfm_gray(path: &Path) -> Result<GrayImage, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (w, h, v) = decode_pfm(&bytes, path, 1)?;
    Ok(Image::from_pixels(w, h, v))
}

/// 8-bit binary PPM for viewing; values are clamped to [0, 1].
pub fn save_ppm(path: &Path, img: &RgbImage) -> Result<(), IoError> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    for p in &img.pixels {
        out.extend(p.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    write_file(path, &out)
}

pub fn load_ppm(path: &Path) -> Result<RgbImage, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (tokens, offset) = read_header(&bytes, path, 4)?;
    if tokens[0] != "P6" {
        return Err(IoError::BadMagic { path: path.to_owned(), found: tokens[0].into(), expected: "P6".into() });
    }
    if tokens[3] != "255" {
        return Err(IoError::Header { path: path.to_owned(), reason: format!("unsupported maxval {}", tokens[3]) });
    }
    let (w, h) = parse_dims(tokens[1], tokens[2], path)?;
    let expected = offset + w * h * 3;
    if bytes.len() != expected {
        return Err(IoError::Length { path: path.to_owned(), expected: expected as u64, actual: bytes.len() as u64 });
    }
    let pixels = bytes[offset..].chunks_exact(3).map(|c| [c[0], c[1], c[2]].map(|b| b as f64 / 255.0)).collect();
    Ok(Image::from_pixels(w, h, pixels))
}

/// One manifest line: image path and camera.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub image: String,
    pub camera: Camera,
}

/// Floats per manifest line after the image path: intrinsics and size (6),
/// the 3x4 world-to-camera matrix row by row (12), near and far (2).
pub const MANIFEST_FLOATS: usize = 20;

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        let c = &e.camera;
        let mut fields = vec![e.image.clone()];
        fields.extend([c.fx, c.fy, c.cx, c.cy, c.width as f64, c.height as f64].iter().map(f64::to_string));
        for r in 0..3 {
            for col in 0..3 {
                fields.push(c.rotation[(r, col)].to_string());
            }
            fields.push(c.translation[r].to_string());
        }
        fields.push(c.near.to_string());
        fields.push(c.far.to_string());
        s.push_str(&fields.join(" "));
        s.push('\n');
    }
    s
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestEntry>, IoError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: String| IoError::Manifest { path: path.to_owned(), line: i + 1, reason };
        let mut parts = line.split_whitespace();
        let image = parts.next().expect("non-empty line").to_owned();
        let v: Vec<f64> = parts
            .map(|t| t.parse::<f64>().map_err(|_| err(format!("bad number '{t}'"))))
            .collect::<Result<_, _>>()?;
        if v.len() != MANIFEST_FLOATS {
            return Err(err(format!("expected {MANIFEST_FLOATS} numbers after the image path, found {}", v.len())));
        }
        let dim = |x: f64| {
            (x >= 1.0 && x.fract() == 0.0)
                .then_some(x as usize)
                .ok_or_else(|| err(format!("bad image dimension {x}")))
        };
        let (w, h) = (dim(v[4])?, dim(v[5])?);
        let rotation = Matrix3::from_fn(|r, c| v[6 + r * 4 + c]);
        let translation = Vector3::from_fn(|r, _| v[6 + r * 4 + 3]);
        let camera = Camera::new(v[0], v[1], v[2], v[3], w, h, rotation, translation, v[18], v[19])
            .map_err(|e| err(e.to_string()))?;
        out.push(ManifestEntry { image, camera });
    }
    Ok(out)
}

pub const GT_FILE: &str = "gt.cspl";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// A generated dataset: ground truth, cameras and float images.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub gt: Option<GaussianCloud>,
    pub cameras: Vec<Camera>,
    pub images: Vec<RgbImage>,
}

/// Write `gt.cspl`, `manifest.txt` and `views/view_NNN.{pfm,ppm}`.
pub fn save_dataset(dir: &Path, gt: &GaussianCloud, cameras: &[Camera], images: &[RgbImage]) -> Result<(), IoError> {
    assert_eq!(cameras.len(), images.len(), "one image per camera");
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    save_cloud(&dir.join(GT_FILE), gt)?;
    let mut entries = Vec::with_capacity(cameras.len());
    for (i, (cam, img)) in cameras.iter().zip(images).enumerate() {
        let rel = format!("views/view_{i:03}.pfm");
        save_pfm(&dir.join(&rel), img)?;
        save_ppm(&dir.join(format!("views/view_{i:03}.ppm")), img)?;
        entries.push(ManifestEntry { image: rel, camera: cam.clone() });
    }
    write_file(&dir.join(MANIFEST_FILE), format_manifest(&entries).as_bytes())
}

/// Load a dataset directory; the ground-truth cloud is optional.
pub fn load_dataset(dir: &Path) -> Result<Dataset, IoError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let entries = parse_manifest(&text, &manifest_path)?;
    let mut images = Vec::with_capacity(entries.len());
    for e in &entries {
        let path = dir.join(&e.image);
        let img = load_pfm(&path)?;
        if img.width != e.camera.width || img.height != e.camera.height {
            return Err(IoError::Header {
                path,
                reason: format!("image is {}x{}, camera expects {}x{}", img.width, img.height, e.camera.width, e.camera.height),
            });
        }
        images.push(img);
    }
    let gt_path = dir.join(GT_FILE);
    let gt = if gt_path.exists() { Some(load_cloud(&gt_path)?) } else { None };
    Ok(Dataset {
        gt,
        cameras: entries.into_iter().map(|e| e.camera).collect(),
        images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::random_rotation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, degree: usize, seed: u64) -> GaussianCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gs = (0..n)
            .map(|_| {
                let mut g = Gaussian::isotropic(Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)), 0.2, 0.6, [0.3, 0.6, 0.9], degree);
                g.rotation = random_rotation(&mut rng);
                g.log_scale = Vector3::from_fn(|_, _| rng.random_range(-3.0..0.0));
                for c in &mut g.sh {
                    *c = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
                }
                g
            })
            .collect();
        GaussianCloud::from_gaussians(gs, degree).unwrap()
    }

    #[test]
    fn cloud_round_trip_is_bit_exact() {
        for degree in 0..=3 {
            let c = random_cloud(17, degree, degree as u64);
            let back = decode_cloud(&encode_cloud(&c), Path::new("mem")).unwrap();
            assert_eq!(encode_cloud(&back), encode_cloud(&c));
            assert_eq!(back, c);
        }
    }

    #[test]
    fn cloud_errors_are_structured() {
        let bytes = encode_cloud(&random_cloud(3, 1, 1));
        match decode_cloud(&bytes[..bytes.len() - 5], Path::new("t")) {
            Err(IoError::Length { expected, actual, .. }) => assert_eq!(expected, actual + 5),
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_cloud(&bad, Path::new("t")), Err(IoError::BadMagic { .. })));
        let mut bad = bytes;
        bad[4] = 9;
        assert!(matches!(decode_cloud(&bad, Path::new("t")), Err(IoError::Version { found: 9, .. })));
        let err = decode_cloud(&[0u8; 3], Path::new("t")).unwrap_err().to_string();
        assert!(err.contains("expected 20 bytes, found 3"), "{err}");
    }

    #[test]
    fn manifest_round_trip() {
        let cam = Camera::look_at(Vector3::new(0.3, -0.2, -4.0), Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0), 41.3, 40, 30, 0.05, 16.0).unwrap();
        let entries = vec![ManifestEntry { image: "views/view_000.pfm".into(), camera: cam }];
        let text = format_manifest(&entries);
        assert_eq!(text.split_whitespace().count(), 1 + MANIFEST_FLOATS);
        assert_eq!(parse_manifest(&text, Path::new("m")).unwrap(), entries);
        assert!(matches!(parse_manifest("a 1 2 3", Path::new("m")), Err(IoError::Manifest { line: 1, .. })));
    }

    #[test]
    fn pfm_and_ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img: RgbImage = Image::from_pixels(5, 3, (0..15).map(|_| std::array::from_fn(|_| rng.random::<f64>())).collect());
        let p = dir.path().join("a.pfm");
        save_pfm(&p, &img).unwrap();
        assert_eq!(load_pfm(&p).unwrap(), img.quantize_f32());
        let gray = img.channel(1);
        save_pfm_gray(&p, &gray).unwrap();
        assert_eq!(load_pfm_gray(&p).unwrap(), gray.map(|v| *v as f32 as f64));
        let q = dir.path().join("a.ppm");
        save_ppm(&q, &img).unwrap();
        let back = load_ppm(&q).unwrap();
        for (a, b) in back.pixels.iter().zip(&img.pixels) {
            for ch in 0..3 {
                assert!((a[ch] - b[ch]).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }
}
