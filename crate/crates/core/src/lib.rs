//! Deterministic CPU Gaussian splatting with tools to measure and suppress
//! co-adaptation between Gaussians.
//!
//! The crate is organized bottom-up: [`model`] holds the scene types,
//! [`render`] and [`grad`] implement the differentiable rasterizer,
//! [`coadapt`] measures dropout variance, [`regularize`] holds the
//! suppression mechanisms, and [`train`] ties them into an optimization loop.

pub mod coadapt;
pub mod grad;
pub mod image;
pub mod io;
pub mod knn;
pub mod metrics;
pub mod model;
pub mod regularize;
pub mod render;
mod rng;
pub mod scene;
pub mod sh;
pub mod train;

pub use grad::{finite_diff_check, render_backward, GaussianGrad, ParamGrads};
pub use image::{GrayImage, Image, Mask, RgbImage};
pub use model::{activate_opacity, covariance_world, sh_to_color, Camera, Gaussian, GaussianCloud, ModelError};
pub use render::{composite_pixel, project_gaussian, render, visibility_mask, RenderOptions, RenderOutput, Splat2D};
