//! Minimal row-major image containers.

/// Row-major image with `width * height` pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<P> {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<P>,
}

pub type RgbImage = Image<[f64; 3]>;
pub type GrayImage = Image<f64>;
pub type Mask = Image<bool>;

impl<P: Clone> Image<P> {
    pub fn filled(width: usize, height: usize, value: P) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }
}

impl<P> Image<P> {
    pub fn from_pixels(width: usize, height: usize, pixels: Vec<P>) -> Self {
        assert_eq!(pixels.len(), width * height, "pixel buffer does not match dimensions");
        Self { width, height, pixels }
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn same_shape<Q>(&self, other: &Image<Q>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn get(&self, x: usize, y: usize) -> &P {
        &self.pixels[y * self.width + x]
    }

    pub fn map<Q>(&self, f: impl FnMut(&P) -> Q) -> Image<Q> {
        Image {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(f).collect(),
        }
    }
}

impl RgbImage {
    pub fn channel(&self, ch: usize) -> GrayImage {
        self.map(|p| p[ch])
    }

    /// Round every value through `f32`, the precision of the PFM format.
    pub fn quantize_f32(&self) -> Self {
        self.map(|p| p.map(|v| v as f32 as f64))
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|&&b| b).count()
    }
}
