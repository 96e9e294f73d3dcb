//! Per-pixel inlier mask for robust training: residual magnitudes are
//! trimmed at a batch quantile, the binary labels are spatially diffused
//! with a 3x3 box filter, and entire centered inner patches are promoted to
//! inlier when their surrounding neighborhood is mostly inlier.
//!
//! The mask is a constant of the optimization step: no derivative flows
//! through its computation (the weights come from residuals at the previous
//! iterate, IRLS-style).

use crate::error::{Error, Result};
use crate::img::{ImageRgb, MaskImage};
use serde::{Deserialize, Serialize};

/// 2-D array of per-pixel residual magnitudes (L2 norm of the RGB residual).
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl ResidualMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("residual map dimensions must be > 0"));
        }
        if values.len() != width * height {
            return Err(Error::invalid(format!(
                "residual map has {} values, expected {}x{}",
                values.len(),
                width,
                height
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::invalid(format!(
                "residual values must be finite and >= 0, got {v}"
            )));
        }
        Ok(ResidualMap {
            width,
            height,
            values,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Mask pipeline stages for one neighborhood. Inlier sets only grow across
/// stages (with the default soft patch labeling): trimmed ⊆ diffused ⊆ final.
#[derive(Debug, Clone, PartialEq)]
pub struct InlierMask {
    pub trimmed: MaskImage,
    pub diffused: MaskImage,
    pub final_mask: MaskImage,
    /// Realized trim threshold (residual units) shared by the whole batch.
    pub threshold_used: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Trimming only (stage 1).
    TrimOnly,
    /// Trimming plus 3x3 diffusion (stages 1-2).
    TrimDiffuse,
    /// Full pipeline including patch aggregation (stages 1-3).
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    /// Fraction of batch pixels kept as trimmed inliers, in (0, 1].
    pub trim_quantile: f64,
    /// Box-filter vote needed to diffuse a pixel back to inlier.
    pub diffuse_threshold: f64,
    /// Neighborhood inlier mean needed to promote the whole inner patch.
    pub patch_threshold: f64,
    /// Side of the sampled square neighborhood, in pixels.
    pub neighborhood: usize,
    /// Side of the centered inner patch that contributes to the loss.
    pub inner_patch: usize,
    pub mode: MaskMode,
    /// Alternative reading of the patch rule: when the neighborhood mean is
    /// below the threshold, force the whole inner patch to outlier instead of
    /// keeping per-pixel labels. Off by default; breaks stage monotonicity.
    pub hard_patch_labeling: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            trim_quantile: 0.5,
            diffuse_threshold: 0.5,
            patch_threshold: 0.6,
            neighborhood: 16,
            inner_patch: 8,
            mode: MaskMode::Full,
            hard_patch_labeling: false,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.trim_quantile > 0.0 && self.trim_quantile <= 1.0) {
            return Err(Error::invalid(format!(
                "trim_quantile must be in (0, 1], got {}",
                self.trim_quantile
            )));
        }
        for (name, v) in [
            ("diffuse_threshold", self.diffuse_threshold),
            ("patch_threshold", self.patch_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if self.neighborhood == 0 || self.inner_patch == 0 {
            return Err(Error::invalid("neighborhood and inner_patch must be > 0"));
        }
        if self.inner_patch > self.neighborhood {
            return Err(Error::invalid(format!(
                "inner_patch {} exceeds neighborhood {}",
                self.inner_patch, self.neighborhood
            )));
        }
        if (self.neighborhood - self.inner_patch) % 2 != 0 {
            return Err(Error::invalid(
                "inner patch cannot be centered: neighborhood - inner_patch must be even",
            ));
        }
        Ok(())
    }

    /// Offset of the centered inner patch inside the neighborhood.
    pub fn inner_offset(&self) -> usize {
        (self.neighborhood - self.inner_patch) / 2
    }

    pub fn in_inner_patch(&self, x: usize, y: usize) -> bool {
        let o = self.inner_offset();
        x >= o && x < o + self.inner_patch && y >= o && y < o + self.inner_patch
    }
}

/// Per-pixel Euclidean norm of the RGB residual between two patches.
pub fn compute_residual_map(predicted: &ImageRgb, observed: &ImageRgb) -> Result<ResidualMap> {
    if predicted.width != observed.width || predicted.height != observed.height {
        return Err(Error::invalid(format!(
            "patch dimensions differ: {}x{} vs {}x{}",
            predicted.width, predicted.height, observed.width, observed.height
        )));
    }
    let values = predicted
        .data
        .chunks_exact(3)
        .zip(observed.data.chunks_exact(3))
        .map(|(p, o)| {
            let d0 = p[0] - o[0];
            let d1 = p[1] - o[1];
            let d2 = p[2] - o[2];
            (d0 * d0 + d1 * d1 + d2 * d2).sqrt()
        })
        .collect();
    ResidualMap::new(predicted.width, predicted.height, values)
}

/// Nearest-rank quantile: sort ascending and return the element at 1-based
/// index ceil(q * n). Deterministic, no interpolation.
pub fn trim_threshold(residuals: &[f64], quantile: f64) -> Result<f64> {
    if residuals.is_empty() {
        return Err(Error::invalid("cannot take a quantile of an empty set"));
    }
    if !(quantile > 0.0 && quantile <= 1.0) {
        return Err(Error::invalid(format!(
            "quantile must be in (0, 1], got {quantile}"
        )));
    }
    if let Some(v) = residuals.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("non-finite residual {v}")));
    }
    let mut sorted = residuals.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let rank = (quantile * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Run the staged mask pipeline over a batch of neighborhood-sized residual
/// maps. The trim threshold is computed once over all pixels of the batch.
pub fn compute_robust_mask(
    residuals: &[ResidualMap],
    config: &MaskConfig,
) -> Result<Vec<InlierMask>> {
    config.validate()?;
    if residuals.is_empty() {
        return Err(Error::invalid("mask batch must be non-empty"));
    }
    let n = config.neighborhood;
    for (i, map) in residuals.iter().enumerate() {
        if map.width != n || map.height != n {
            return Err(Error::invalid(format!(
                "residual map {i} is {}x{}, expected neighborhood {n}x{n}",
                map.width, map.height
            )));
        }
    }

    let all: Vec<f64> = residuals
        .iter()
        .flat_map(|m| m.values.iter().copied())
        .collect();
    let threshold = trim_threshold(&all, config.trim_quantile)?;

    Ok(residuals
        .iter()
        .map(|map| stage_mask(map, threshold, config))
        .collect())
}

fn stage_mask(map: &ResidualMap, threshold: f64, config: &MaskConfig) -> InlierMask {
    let n = config.neighborhood;

    // stage 1: inclusive trim against the batch threshold
    let trimmed = MaskImage {
        width: n,
        height: n,
        data: map.values.iter().map(|&v| v <= threshold).collect(),
    };

    // stage 2: 3x3 box vote with zero (outlier) padding
    let diffused = if config.mode == MaskMode::TrimOnly {
        trimmed.clone()
    } else {
        diffuse_box3(&trimmed, config.diffuse_threshold)
    };

    // stage 3: promote the centered inner patch when the whole neighborhood
    // is mostly inlier
    let final_mask = if config.mode != MaskMode::Full {
        diffused.clone()
    } else {
        let mean = diffused.count_true() as f64 / (n * n) as f64;
        let mut out = diffused.clone();
        if mean >= config.patch_threshold {
            for y in 0..n {
                for x in 0..n {
                    if config.in_inner_patch(x, y) {
                        out.set(x, y, true);
                    }
                }
            }
        } else if config.hard_patch_labeling {
            for y in 0..n {
                for x in 0..n {
                    if config.in_inner_patch(x, y) {
                        out.set(x, y, false);
                    }
                }
            }
        }
        out
    };

    InlierMask {
        trimmed,
        diffused,
        final_mask,
        threshold_used: threshold,
    }
}

fn diffuse_box3(mask: &MaskImage, vote: f64) -> MaskImage {
    let (w, h) = (mask.width, mask.height);
    let mut out = mask.clone();
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                continue;
            }
            let mut count = 0u32;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx >= 0
                        && ny >= 0
                        && (nx as usize) < w
                        && (ny as usize) < h
                        && mask.get(nx as usize, ny as usize)
                    {
                        count += 1;
                    }
                }
            }
            // zero padding: the denominator stays 9 at borders
            if count as f64 / 9.0 >= vote {
                out.set(x, y, true);
            }
        }
    }
    out
}
