//! Voxel radiance-field training with a trimmed, spatially-smoothed robust loss.
//!
//! The crate covers the full desk-scale experiment loop:
//!
//! - [`scene`]: synthetic room scenes with static primitives and per-frame
//!   repositioned distractor objects, ray-traced ground truth and oracle
//!   distractor masks, dataset (de)serialization.
//! - [`field`]: a trainable density + spherical-harmonic color voxel grid
//!   with hand-written adjoints.
//! - [`render`]: pinhole ray generation and emission-absorption volumetric
//!   rendering, forward and reverse.
//! - [`kernels`]: the robust kernel family (cost / influence / IRLS weight).
//! - [`mask`]: the trimmed -> diffused -> patch-aggregated inlier mask.
//! - [`train`]: the patch-based minibatch trainer (L2/L1/Charbonnier/oracle/
//!   robust losses, Adam, warmup + exponential decay).
//! - [`eval`]: PSNR, SSIM, mask quality vs. oracle, residual histograms.

pub mod camera;
pub mod error;
pub mod eval;
pub mod field;
pub mod img;
pub mod json17;
pub mod kernels;
pub mod mask;
pub mod math;
pub mod render;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
