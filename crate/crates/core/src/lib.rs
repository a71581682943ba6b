//! Patch-based low-rank image denoising.
//!
//! Similar patches are stacked into matrices whose singular values are
//! shrunk with noise-adaptive weights. The residual noise level driving the
//! shrinkage is re-estimated every iteration from both the filtered noise and
//! a weak-texture PCA estimate, and the high/low halves of the shrunk
//! spectrum are fed back to sharpen edges and texture.

pub mod bench;
pub mod imgio;
pub mod lowrank;
pub mod noisest;
pub mod patchgrid;
pub mod pipeline;

pub use imgio::{add_gaussian_noise, load_image, psnr, save_image, Image};
pub use pipeline::{denoise, parameter_defaults, DenoiseConfig, DenoiseOutput, Mode};
