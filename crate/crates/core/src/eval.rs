//! Quantitative evaluation: PSNR, SSIM, outlier-mask quality against the
//! oracle, residual histograms split by oracle label, and full checkpoint
//! evaluation over the eval split.

use crate::error::{Error, Result};
use crate::field::VoxelField;
use crate::img::{ImageRgb, MaskImage};
use crate::mask::compute_residual_map;
use crate::render::render_image;
use crate::scene::{FrameRecord, Split};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

/// 10 log10(1 / MSE) over all channels; identical images give +inf.
pub fn compute_psnr(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::invalid(format!(
            "image dimensions differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let mse: f64 = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dx = x as f64 - c;
            let dy = y as f64 - c;
            let v = (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[y * SSIM_WINDOW + x] = v;
            sum += v;
        }
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

fn to_gray(image: &ImageRgb) -> Vec<f64> {
    image
        .data
        .chunks_exact(3)
        .map(|px| (px[0] + px[1] + px[2]) / 3.0)
        .collect()
}

/// Standard single-scale SSIM on channel-mean grayscale: 11x11 Gaussian
/// window (sigma 1.5), K1 = 0.01, K2 = 0.03, dynamic range 1, averaged over
/// valid (non-padded) window positions.
pub fn compute_ssim(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::invalid("image dimensions differ"));
    }
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM"
        )));
    }
    let ga = to_gray(a);
    let gb = to_gray(b);
    let w = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let (width, height) = (a.width, a.height);
    let mut total = 0.0;
    let mut count = 0usize;
    for wy in 0..=(height - SSIM_WINDOW) {
        for wx in 0..=(width - SSIM_WINDOW) {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            for ky in 0..SSIM_WINDOW {
                let row = (wy + ky) * width + wx;
                let wrow = ky * SSIM_WINDOW;
                for kx in 0..SSIM_WINDOW {
                    let weight = w[wrow + kx];
                    let va = ga[row + kx];
                    let vb = gb[row + kx];
                    mu_a += weight * va;
                    mu_b += weight * vb;
                    aa += weight * va * va;
                    bb += weight * vb * vb;
                    ab += weight * va * vb;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
            let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskMetrics {
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
}

/// Confusion counts of the OUTLIER class: the prediction is the complement
/// of the final inlier mask, the reference is the oracle distractor mask.
/// Returns (true positives, false positives, false negatives).
pub fn mask_outlier_confusion(
    predicted_inlier: &MaskImage,
    oracle_distractor: &MaskImage,
) -> Result<(u64, u64, u64)> {
    if predicted_inlier.width != oracle_distractor.width
        || predicted_inlier.height != oracle_distractor.height
    {
        return Err(Error::invalid("mask dimensions differ"));
    }
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fneg = 0u64;
    for (inlier, oracle) in predicted_inlier
        .data
        .iter()
        .zip(oracle_distractor.data.iter())
    {
        let predicted_outlier = !inlier;
        match (predicted_outlier, *oracle) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    Ok((tp, fp, fneg))
}

pub fn metrics_from_confusion(tp: u64, fp: u64, fneg: u64) -> MaskMetrics {
    let precision = if tp + fp == 0 {
        1.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fneg == 0 {
        1.0
    } else {
        tp as f64 / (tp + fneg) as f64
    };
    let iou = if tp + fp + fneg == 0 {
        1.0
    } else {
        tp as f64 / (tp + fp + fneg) as f64
    };
    MaskMetrics {
        precision,
        recall,
        iou,
    }
}

/// Precision / recall / IoU of the outlier class.
pub fn compute_mask_metrics(
    predicted_inlier: &MaskImage,
    oracle_distractor: &MaskImage,
) -> Result<MaskMetrics> {
    let (tp, fp, fneg) = mask_outlier_confusion(predicted_inlier, oracle_distractor)?;
    Ok(metrics_from_confusion(tp, fp, fneg))
}

/// Residual histograms split by oracle label. Edges span [0, sqrt(3)], the
/// maximum possible RGB residual norm, so counts always conserve.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualHistograms {
    pub edges: Vec<f64>,
    pub clean: Vec<u64>,
    pub distractor: Vec<u64>,
}

impl ResidualHistograms {
    pub fn median(counts: &[u64], edges: &[f64]) -> f64 {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return 0.0;
        }
        let mut acc = 0u64;
        for (i, &c) in counts.iter().enumerate() {
            acc += c;
            if acc * 2 >= total {
                return 0.5 * (edges[i] + edges[i + 1]);
            }
        }
        *edges.last().unwrap()
    }
}

/// Render each frame (deterministic midpoints) and histogram the per-pixel
/// residual norms, split by the oracle distractor label. Every frame must
/// carry an oracle mask.
pub fn residual_histogram(
    field: &VoxelField,
    frames: &[FrameRecord],
    n_samples: usize,
    background: crate::math::Vec3,
    bins: usize,
) -> Result<ResidualHistograms> {
    if bins == 0 {
        return Err(Error::invalid("bins must be > 0"));
    }
    if frames.is_empty() {
        return Err(Error::invalid("histogram needs at least one frame"));
    }
    let hi = 3f64.sqrt();
    let edges: Vec<f64> = (0..=bins).map(|i| hi * i as f64 / bins as f64).collect();
    let mut clean = vec![0u64; bins];
    let mut distractor = vec![0u64; bins];
    for (i, frame) in frames.iter().enumerate() {
        let mask = frame.oracle_mask.as_ref().ok_or_else(|| {
            Error::invalid(format!("frame {i} has no oracle mask"))
        })?;
        let rendered = render_image(field, &frame.camera, n_samples, background)?;
        let residuals = compute_residual_map(&rendered, &frame.image)?;
        for (value, is_distractor) in residuals.values.iter().zip(mask.data.iter()) {
            let bin = (((value / hi) * bins as f64) as usize).min(bins - 1);
            if *is_distractor {
                distractor[bin] += 1;
            } else {
                clean[bin] += 1;
            }
        }
    }
    Ok(ResidualHistograms {
        edges,
        clean,
        distractor,
    })
}

/// Write `hist_clean.csv` / `hist_distractor.csv` with edge_lo,edge_hi,count.
pub fn write_histograms(hist: &ResidualHistograms, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (label, counts) in [("clean", &hist.clean), ("distractor", &hist.distractor)] {
        let mut text = String::from("edge_lo,edge_hi,count\n");
        for (i, &c) in counts.iter().enumerate() {
            writeln!(
                text,
                "{:.6},{:.6},{}",
                hist.edges[i],
                hist.edges[i + 1],
                c
            )
            .expect("write to string");
        }
        let path = dir.join(format!("hist_{label}.csv"));
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub frame: usize,
    pub split: Split,
    pub psnr: f64,
    pub ssim: f64,
    pub mask: Option<MaskMetrics>,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<MetricsRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

fn format_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

/// Evaluate a field over the eval split: deterministic renders, per-frame
/// PSNR/SSIM, aggregate means, CSV written to `out_csv`.
pub fn evaluate_checkpoint(
    field: &VoxelField,
    frames: &[FrameRecord],
    n_samples: usize,
    background: crate::math::Vec3,
    out_csv: &Path,
) -> Result<EvalReport> {
    let mut rows = Vec::new();
    for (i, frame) in frames.iter().enumerate() {
        if frame.split != Split::Eval {
            continue;
        }
        let rendered = render_image(field, &frame.camera, n_samples, background)?;
        let psnr = compute_psnr(&rendered, &frame.image)?;
        let ssim = compute_ssim(&rendered, &frame.image)?;
        rows.push(MetricsRow {
            frame: i,
            split: Split::Eval,
            psnr,
            ssim,
            mask: None,
        });
    }
    if rows.is_empty() {
        return Err(Error::invalid("dataset has no eval frames"));
    }
    let mean_psnr = rows.iter().map(|r| r.psnr).sum::<f64>() / rows.len() as f64;
    let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / rows.len() as f64;

    let mut text = String::from("frame,split,psnr,ssim,mask_precision,mask_recall,mask_iou\n");
    for row in &rows {
        let (p, r, i2) = match row.mask {
            Some(m) => (
                format!("{:.6}", m.precision),
                format!("{:.6}", m.recall),
                format!("{:.6}", m.iou),
            ),
            None => (String::new(), String::new(), String::new()),
        };
        writeln!(
            text,
            "{},{},{},{},{},{},{}",
            row.frame,
            match row.split {
                Split::Train => "train",
                Split::Eval => "eval",
            },
            format_db(row.psnr),
            format!("{:.6}", row.ssim),
            p,
            r,
            i2
        )
        .expect("write to string");
    }
    writeln!(
        text,
        "mean,eval,{},{:.6},,,",
        format_db(mean_psnr),
        mean_ssim
    )
    .expect("write to string");
    if let Some(parent) = out_csv.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(out_csv, text).map_err(|e| Error::io(out_csv, e))?;
    Ok(EvalReport {
        rows,
        mean_psnr,
        mean_ssim,
    })
}
