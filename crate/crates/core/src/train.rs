//! Patch-based minibatch training: stratified forward renders, one of five
//! photometric losses, hand-written backpropagation through the renderer,
//! and Adam with linear warmup followed by exponential decay.
//!
//! One IRLS iteration is one optimizer step: in robust mode the inlier mask
//! is computed from the current forward pass, treated as a constant, and
//! only final-inlier pixels of each neighborhood's centered inner patch
//! contribute to the loss.

use crate::error::{Error, Result};
use crate::eval;
use crate::field::{FieldGradient, FieldInit, GradSink, VoxelField};
use crate::img::{self, MaskImage};
use crate::kernels::{self, KernelKind, KernelSpec};
use crate::mask::{compute_residual_map, compute_robust_mask, InlierMask, MaskConfig, MaskMode};
use crate::math::{derive_seed, SplitMix64, Vec3};
use crate::render::{self, generate_ray, render_pixel_into, Ray, RenderSample};
use crate::scene::{DatasetManifest, FrameRecord, Split};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

const DOMAIN_TRAIN_JITTER: u64 = 0xD4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    L2,
    L1,
    Charbonnier,
    Oracle,
    Robust,
}

impl LossMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossMode::L2 => "l2",
            LossMode::L1 => "l1",
            LossMode::Charbonnier => "charbonnier",
            LossMode::Oracle => "oracle",
            LossMode::Robust => "robust",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss_mode: LossMode,
    pub mask: MaskConfig,
    /// Kernel applied per channel in Charbonnier mode.
    pub kernel: KernelSpec,
    pub patches_per_batch: usize,
    /// Side of the sampled square patch; equals the mask neighborhood.
    pub neighborhood: usize,
    pub steps: u64,
    pub lr_init: f64,
    pub lr_final: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub n_samples: usize,
    pub min_near: f64,
    pub stratified: bool,
    pub grid_resolution: [usize; 3],
    pub sh_degree: u8,
    pub seed: u64,
    /// Worker threads; 0 = all available. 1 gives the bit-reproducible
    /// single-worker reduction order.
    pub threads: usize,
    pub log_interval: u64,
    pub eval_interval: u64,
    /// Eval frames rendered for the logged PSNR curve.
    pub eval_frames: usize,
    pub mask_metric_interval: u64,
    /// Cluttered training frames scored for the logged mask IoU.
    pub mask_metric_frames: usize,
    /// Dump mask stages for the first cluttered frame every N steps (0 = off).
    pub dump_mask_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss_mode: LossMode::Robust,
            mask: MaskConfig::default(),
            kernel: KernelSpec::new(KernelKind::Charbonnier, 0.001),
            patches_per_batch: 16,
            neighborhood: 16,
            steps: 15_000,
            lr_init: 0.002,
            lr_final: 0.00002,
            warmup_steps: 512,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            n_samples: 64,
            min_near: 0.05,
            stratified: true,
            grid_resolution: [64, 64, 64],
            sh_degree: 1,
            seed: 1,
            threads: 0,
            log_interval: 100,
            eval_interval: 500,
            eval_frames: 3,
            mask_metric_interval: 1000,
            mask_metric_frames: 4,
            dump_mask_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patches_per_batch == 0 || self.steps == 0 || self.n_samples == 0 {
            return Err(Error::invalid(
                "patches_per_batch, steps and n_samples must be positive",
            ));
        }
        if self.lr_final > self.lr_init || self.lr_init <= 0.0 {
            return Err(Error::invalid("need 0 < lr_final <= lr_init"));
        }
        if self.warmup_steps == 0 {
            return Err(Error::invalid("warmup_steps must be >= 1"));
        }
        self.mask.validate()?;
        self.kernel.validate()?;
        if self.loss_mode == LossMode::Robust && self.mask.neighborhood != self.neighborhood {
            return Err(Error::invalid(format!(
                "robust loss requires mask.neighborhood ({}) == neighborhood ({})",
                self.mask.neighborhood, self.neighborhood
            )));
        }
        if self.grid_resolution.iter().any(|&n| n < 2) {
            return Err(Error::invalid("grid resolution must be >= 2 per axis"));
        }
        Ok(())
    }

    pub fn resolved_threads(&self) -> usize {
        if self.threads > 0 {
            self.threads
        } else {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        }
    }
}

/// Linear warmup to lr_init over warmup_steps, then exponential interpolation
/// from lr_init to lr_final across the full run.
pub fn lr_schedule(cfg: &TrainConfig, step: u64) -> f64 {
    if step < cfg.warmup_steps {
        cfg.lr_init * (step + 1) as f64 / cfg.warmup_steps as f64
    } else {
        let t = step as f64 / cfg.steps.max(1) as f64;
        cfg.lr_init * (cfg.lr_final / cfg.lr_init).powf(t)
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    /// dL/dC per pixel; zero on pixels excluded from the loss.
    pub grad: Vec<Vec3>,
    pub masks: Option<Vec<InlierMask>>,
    /// Fraction of batch pixels carrying nonzero loss weight (final-stage
    /// inliers over all pixels in robust mode).
    pub inlier_fraction: f64,
    pub n_contributing: usize,
}

/// Photometric loss over a batch of patches laid out patch-major, row-major
/// within each patch. `oracle_outlier` marks distractor pixels and is
/// required in Oracle mode.
pub fn compute_loss(
    predicted: &[Vec3],
    observed: &[Vec3],
    oracle_outlier: Option<&[bool]>,
    mode: LossMode,
    mask_config: &MaskConfig,
    kernel: Option<&KernelSpec>,
    patch_size: usize,
) -> Result<LossOutput> {
    if predicted.len() != observed.len() || predicted.is_empty() {
        return Err(Error::invalid("predicted/observed shape mismatch"));
    }
    let pixels_per_patch = patch_size * patch_size;
    if predicted.len() % pixels_per_patch != 0 {
        return Err(Error::invalid("batch is not a whole number of patches"));
    }
    let n = predicted.len();
    let mut grad = vec![Vec3::ZERO; n];

    match mode {
        LossMode::L2 => {
            let mut loss = 0.0;
            for i in 0..n {
                let r = predicted[i] - observed[i];
                loss += r.dot(r);
                grad[i] = r * (2.0 / n as f64);
            }
            Ok(LossOutput {
                loss: loss / n as f64,
                grad,
                masks: None,
                inlier_fraction: 1.0,
                n_contributing: n,
            })
        }
        LossMode::L1 => {
            let mut loss = 0.0;
            for i in 0..n {
                let r = predicted[i] - observed[i];
                loss += r.x.abs() + r.y.abs() + r.z.abs();
                grad[i] = Vec3::new(sign(r.x), sign(r.y), sign(r.z)) / n as f64;
            }
            Ok(LossOutput {
                loss: loss / n as f64,
                grad,
                masks: None,
                inlier_fraction: 1.0,
                n_contributing: n,
            })
        }
        LossMode::Charbonnier => {
            let default = KernelSpec::new(KernelKind::Charbonnier, 0.001);
            let spec = kernel.unwrap_or(&default);
            spec.validate()?;
            let mut loss = 0.0;
            for i in 0..n {
                let r = predicted[i] - observed[i];
                for (axis, v) in [r.x, r.y, r.z].into_iter().enumerate() {
                    loss += kernels::kernel_value(v.abs(), spec)?;
                    let g = kernels::influence(v.abs(), spec)? * sign(v) / n as f64;
                    match axis {
                        0 => grad[i].x = g,
                        1 => grad[i].y = g,
                        _ => grad[i].z = g,
                    }
                }
            }
            Ok(LossOutput {
                loss: loss / n as f64,
                grad,
                masks: None,
                inlier_fraction: 1.0,
                n_contributing: n,
            })
        }
        LossMode::Oracle => {
            let oracle = oracle_outlier
                .ok_or_else(|| Error::invalid("oracle mode requires oracle masks"))?;
            if oracle.len() != n {
                return Err(Error::invalid("oracle mask length mismatch"));
            }
            let clean = oracle.iter().filter(|&&o| !o).count();
            if clean == 0 {
                log::warn!("degenerate batch: every pixel is oracle-flagged; loss = 0");
                return Ok(LossOutput {
                    loss: 0.0,
                    grad,
                    masks: None,
                    inlier_fraction: 0.0,
                    n_contributing: 0,
                });
            }
            let mut loss = 0.0;
            for i in 0..n {
                if oracle[i] {
                    continue;
                }
                let r = predicted[i] - observed[i];
                loss += r.dot(r);
                grad[i] = r * (2.0 / clean as f64);
            }
            Ok(LossOutput {
                loss: loss / clean as f64,
                grad,
                masks: None,
                inlier_fraction: clean as f64 / n as f64,
                n_contributing: clean,
            })
        }
        LossMode::Robust => {
            if patch_size != mask_config.neighborhood {
                return Err(Error::invalid(
                    "robust loss patch size must equal the mask neighborhood",
                ));
            }
            let n_patches = n / pixels_per_patch;
            let mut maps = Vec::with_capacity(n_patches);
            for p in 0..n_patches {
                let base = p * pixels_per_patch;
                let values: Vec<f64> = (0..pixels_per_patch)
                    .map(|i| {
                        let r = predicted[base + i] - observed[base + i];
                        r.dot(r).sqrt()
                    })
                    .collect();
                maps.push(crate::mask::ResidualMap::new(
                    patch_size, patch_size, values,
                )?);
            }
            let masks = compute_robust_mask(&maps, mask_config)?;

            let mut contributing = Vec::new();
            let mut inliers_total = 0usize;
            for (p, m) in masks.iter().enumerate() {
                inliers_total += m.final_mask.count_true();
                let base = p * pixels_per_patch;
                for y in 0..patch_size {
                    for x in 0..patch_size {
                        if mask_config.in_inner_patch(x, y) && m.final_mask.get(x, y) {
                            contributing.push(base + y * patch_size + x);
                        }
                    }
                }
            }
            let inlier_fraction = inliers_total as f64 / n as f64;
            if contributing.is_empty() {
                log::warn!("degenerate batch: no inner-patch inliers; loss = 0");
                return Ok(LossOutput {
                    loss: 0.0,
                    grad,
                    masks: Some(masks),
                    inlier_fraction,
                    n_contributing: 0,
                });
            }
            let count = contributing.len();
            let mut loss = 0.0;
            for &i in &contributing {
                let r = predicted[i] - observed[i];
                loss += r.dot(r);
                grad[i] = r * (2.0 / count as f64);
            }
            Ok(LossOutput {
                loss: loss / count as f64,
                grad,
                masks: Some(masks),
                inlier_fraction,
                n_contributing: count,
            })
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One sampled neighborhood: a frame index and the patch's top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchJob {
    pub frame: usize,
    pub x0: usize,
    pub y0: usize,
}

/// Epoch-tagged sparse gradient accumulator: dense storage, but only voxels
/// touched in the current epoch are valid, and a touched list makes merging
/// proportional to the rays actually traced.
struct GradBuffer {
    density: Vec<f64>,
    color: Vec<f64>,
    tag: Vec<u32>,
    touched: Vec<u32>,
    epoch: u32,
    stride: usize,
}

impl GradBuffer {
    fn new(field: &VoxelField) -> Self {
        GradBuffer {
            density: vec![0.0; field.num_voxels()],
            color: vec![0.0; field.color_coeffs.len()],
            tag: vec![0; field.num_voxels()],
            touched: Vec::new(),
            epoch: 0,
            stride: field.color_stride(),
        }
    }

    fn begin_epoch(&mut self, epoch: u32) {
        if epoch == 0 {
            self.tag.fill(0);
        }
        self.epoch = epoch.wrapping_add(1).max(1);
        if self.epoch == 1 {
            self.tag.fill(0);
        }
        self.touched.clear();
    }
}

impl GradSink for GradBuffer {
    #[inline]
    fn add_corner(&mut self, voxel: usize, weight: f64, d_density: f64, d_color: &[f64]) {
        let base = voxel * self.stride;
        if self.tag[voxel] != self.epoch {
            self.tag[voxel] = self.epoch;
            self.touched.push(voxel as u32);
            self.density[voxel] = weight * d_density;
            for (k, &dv) in d_color.iter().enumerate() {
                self.color[base + k] = weight * dv;
            }
        } else {
            self.density[voxel] += weight * d_density;
            for (k, &dv) in d_color.iter().enumerate() {
                self.color[base + k] += weight * dv;
            }
        }
    }
}

struct ChunkScratch {
    rays: Vec<Ray>,
    samples: Vec<RenderSample>,
    grad: GradBuffer,
}

/// Reusable per-batch buffers. Chunk count is fixed by the configured thread
/// count, so gradient reduction order is deterministic for a given config.
pub struct BatchScratch {
    chunks: Vec<ChunkScratch>,
    merged: GradBuffer,
    epoch: u32,
    chunk_patches: usize,
    predicted: Vec<Vec3>,
    observed: Vec<Vec3>,
    oracle: Vec<bool>,
}

impl BatchScratch {
    pub fn new(field: &VoxelField, cfg: &TrainConfig) -> Self {
        let threads = cfg.resolved_threads();
        let chunk_patches = cfg.patches_per_batch.div_ceil(threads);
        let n_chunks = cfg.patches_per_batch.div_ceil(chunk_patches);
        let pixels = cfg.neighborhood * cfg.neighborhood;
        let chunks = (0..n_chunks)
            .map(|_| ChunkScratch {
                rays: Vec::with_capacity(chunk_patches * pixels),
                samples: (0..chunk_patches * pixels)
                    .map(|_| RenderSample::default())
                    .collect(),
                grad: GradBuffer::new(field),
            })
            .collect();
        BatchScratch {
            chunks,
            merged: GradBuffer::new(field),
            epoch: 0,
            chunk_patches,
            predicted: Vec::new(),
            observed: Vec::new(),
            oracle: Vec::new(),
        }
    }
}

/// Forward-render a batch of patch jobs, evaluate the loss, and backpropagate
/// into a gradient over the field parameters. Pure with respect to the field;
/// the scratch provides reusable buffers and the worker layout.
pub fn batch_loss_and_gradient(
    field: &VoxelField,
    train_frames: &[FrameRecord],
    jobs: &[PatchJob],
    cfg: &TrainConfig,
    background: Vec3,
    step: u64,
    scratch: &mut BatchScratch,
) -> Result<LossOutput> {
    let n = cfg.neighborhood;
    let pixels = n * n;
    let total = jobs.len() * pixels;
    let bounds = field.bounds();
    let jitter_base = derive_seed(cfg.seed, DOMAIN_TRAIN_JITTER, step);

    scratch.predicted.clear();
    scratch.predicted.resize(total, Vec3::ZERO);
    scratch.observed.clear();
    scratch.observed.resize(total, Vec3::ZERO);
    scratch.oracle.clear();
    scratch.oracle.resize(total, false);

    // observed pixels and oracle flags (sequential, cheap)
    for (j, job) in jobs.iter().enumerate() {
        let frame = &train_frames[job.frame];
        for y in 0..n {
            for x in 0..n {
                let idx = j * pixels + y * n + x;
                scratch.observed[idx] = frame.image.pixel(job.x0 + x, job.y0 + y);
                if let Some(mask) = &frame.oracle_mask {
                    scratch.oracle[idx] = mask.get(job.x0 + x, job.y0 + y);
                }
            }
        }
    }

    // forward pass, parallel over fixed chunks
    let chunk_patches = scratch.chunk_patches;
    let job_chunks: Vec<&[PatchJob]> = jobs.chunks(chunk_patches).collect();
    scratch
        .chunks
        .iter_mut()
        .zip(job_chunks.iter())
        .enumerate()
        .collect::<Vec<_>>()
        .into_par_iter()
        .zip(scratch.predicted.par_chunks_mut(chunk_patches * pixels))
        .try_for_each(|((chunk_idx, (scr, chunk_jobs)), out)| -> Result<()> {
            scr.rays.clear();
            for (pj, job) in chunk_jobs.iter().enumerate() {
                let frame = &train_frames[job.frame];
                for y in 0..n {
                    for x in 0..n {
                        let slot = pj * pixels + y * n + x;
                        let ray = generate_ray(
                            &frame.camera,
                            (
                                (job.x0 + x) as f64 + 0.5,
                                (job.y0 + y) as f64 + 0.5,
                            ),
                            &bounds,
                            cfg.min_near,
                        )?;
                        let global = (chunk_idx * chunk_patches + pj) * pixels + y * n + x;
                        let mut jitter = cfg.stratified.then(|| {
                            SplitMix64::new(derive_seed(jitter_base, global as u64, 0))
                        });
                        render_pixel_into(
                            field,
                            &ray,
                            cfg.n_samples,
                            jitter.as_mut(),
                            background,
                            &mut scr.samples[slot],
                        )?;
                        out[slot] = scr.samples[slot].final_color;
                        scr.rays.push(ray);
                    }
                }
            }
            Ok(())
        })?;

    let loss = compute_loss(
        &scratch.predicted,
        &scratch.observed,
        Some(&scratch.oracle),
        cfg.loss_mode,
        &cfg.mask,
        Some(&cfg.kernel),
        n,
    )?;
    if !loss.loss.is_finite() {
        return Err(Error::Train(format!(
            "loss is not finite at step {step}: {}",
            loss.loss
        )));
    }

    // adjoint pass into per-chunk buffers, then ordered merge
    let epoch = scratch.epoch;
    scratch.epoch = scratch.epoch.wrapping_add(1);
    let grad_slices: Vec<&[Vec3]> = loss.grad.chunks(chunk_patches * pixels).collect();
    scratch
        .chunks
        .iter_mut()
        .zip(grad_slices.iter())
        .collect::<Vec<_>>()
        .into_par_iter()
        .for_each(|(scr, grads)| {
            scr.grad.begin_epoch(epoch);
            for (slot, d_color) in grads.iter().enumerate() {
                if *d_color == Vec3::ZERO {
                    continue;
                }
                render_pixel_adjoint_fast(
                    field,
                    &scr.rays[slot],
                    &scr.samples[slot],
                    *d_color,
                    background,
                    &mut scr.grad,
                );
            }
        });

    scratch.merged.begin_epoch(epoch);
    for chunk in scratch.chunks.iter().take(grad_slices.len()) {
        let stride = chunk.grad.stride;
        for &vox32 in chunk.touched_list() {
            let vox = vox32 as usize;
            let base = vox * stride;
            if scratch.merged.tag[vox] != scratch.merged.epoch {
                scratch.merged.tag[vox] = scratch.merged.epoch;
                scratch.merged.touched.push(vox32);
                scratch.merged.density[vox] = chunk.grad.density[vox];
                scratch.merged.color[base..base + stride]
                    .copy_from_slice(&chunk.grad.color[base..base + stride]);
            } else {
                scratch.merged.density[vox] += chunk.grad.density[vox];
                for k in 0..stride {
                    scratch.merged.color[base + k] += chunk.grad.color[base + k];
                }
            }
        }
    }
    Ok(loss)
}

impl ChunkScratch {
    fn touched_list(&self) -> &[u32] {
        &self.grad.touched
    }
}

fn render_pixel_adjoint_fast<S: GradSink>(
    field: &VoxelField,
    ray: &Ray,
    sample: &RenderSample,
    d_color: Vec3,
    background: Vec3,
    sink: &mut S,
) {
    render::render_pixel_adjoint_sink(field, ray, sample, d_color, background, sink);
}

/// Export the merged gradient of the last batch as a dense accumulator
/// (entries untouched by the batch are zero). Intended for tests.
pub fn dense_gradient(field: &VoxelField, scratch: &BatchScratch) -> FieldGradient {
    let mut out = FieldGradient::zeros(field);
    let merged = &scratch.merged;
    for &vox32 in &merged.touched {
        let vox = vox32 as usize;
        out.density[vox] = merged.density[vox];
        let base = vox * merged.stride;
        out.color[base..base + merged.stride]
            .copy_from_slice(&merged.color[base..base + merged.stride]);
    }
    out
}

pub struct TrainState {
    pub field: VoxelField,
    pub m_density: Vec<f64>,
    pub m_color: Vec<f64>,
    pub v_density: Vec<f64>,
    pub v_color: Vec<f64>,
    pub step: u64,
    pub rng: ChaCha12Rng,
    pub background: Vec3,
    scratch: BatchScratch,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, manifest: &DatasetManifest) -> Result<Self> {
        cfg.validate()?;
        let field = VoxelField::create(
            cfg.grid_resolution,
            manifest.scene.bounds,
            cfg.sh_degree,
            FieldInit::default(),
        )?;
        let scratch = BatchScratch::new(&field, cfg);
        Ok(TrainState {
            m_density: vec![0.0; field.density_raw.len()],
            m_color: vec![0.0; field.color_coeffs.len()],
            v_density: vec![0.0; field.density_raw.len()],
            v_color: vec![0.0; field.color_coeffs.len()],
            step: 0,
            rng: ChaCha12Rng::from_seed(crate::math::chacha_seed(cfg.seed, 0xE5, 0)),
            background: manifest.scene.background,
            field,
            scratch,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub inlier_fraction: f64,
    pub lr: f64,
}

/// Sample patch jobs for one step: uniformly random frame, patch origin
/// uniform over positions that keep the whole neighborhood inside the frame.
pub fn sample_jobs(
    rng: &mut ChaCha12Rng,
    train_frames: &[FrameRecord],
    cfg: &TrainConfig,
) -> Result<Vec<PatchJob>> {
    let n = cfg.neighborhood;
    let mut jobs = Vec::with_capacity(cfg.patches_per_batch);
    for _ in 0..cfg.patches_per_batch {
        let frame = rng.random_range(0..train_frames.len());
        let (w, h) = (
            train_frames[frame].image.width,
            train_frames[frame].image.height,
        );
        if w < n || h < n {
            return Err(Error::Train(format!(
                "frame {frame} is {w}x{h}, smaller than the {n}x{n} neighborhood"
            )));
        }
        let x0 = rng.random_range(0..=w - n);
        let y0 = rng.random_range(0..=h - n);
        jobs.push(PatchJob { frame, x0, y0 });
    }
    Ok(jobs)
}

/// One optimizer step: sample patches, render, compute loss and mask,
/// backpropagate, and apply Adam at the scheduled learning rate.
pub fn train_step(
    state: &mut TrainState,
    train_frames: &[FrameRecord],
    cfg: &TrainConfig,
) -> Result<StepStats> {
    if train_frames.is_empty() {
        return Err(Error::Train("dataset has no training frames".into()));
    }
    let lr = lr_schedule(cfg, state.step);
    let jobs = sample_jobs(&mut state.rng, train_frames, cfg)?;
    let loss = batch_loss_and_gradient(
        &state.field,
        train_frames,
        &jobs,
        cfg,
        state.background,
        state.step,
        &mut state.scratch,
    )?;

    adam_update(state, cfg, lr);
    state.step += 1;
    Ok(StepStats {
        step: state.step,
        loss: loss.loss,
        inlier_fraction: loss.inlier_fraction,
        lr,
    })
}

fn adam_update(state: &mut TrainState, cfg: &TrainConfig, lr: f64) {
    let t = (state.step + 1) as i32;
    let c1 = 1.0 / (1.0 - cfg.beta1.powi(t));
    let c2 = 1.0 / (1.0 - cfg.beta2.powi(t));
    let (b1, b2, eps) = (cfg.beta1, cfg.beta2, cfg.adam_eps);
    let merged = &state.scratch.merged;
    let epoch = merged.epoch;
    let stride = merged.stride;

    const CHUNK: usize = 65_536;
    // density sweep: one parameter per voxel
    state
        .field
        .density_raw
        .par_chunks_mut(CHUNK)
        .zip(state.m_density.par_chunks_mut(CHUNK))
        .zip(state.v_density.par_chunks_mut(CHUNK))
        .enumerate()
        .for_each(|(chunk_idx, ((params, ms), vs))| {
            let base = chunk_idx * CHUNK;
            for i in 0..params.len() {
                let vox = base + i;
                let g = if merged.tag[vox] == epoch {
                    merged.density[vox]
                } else {
                    0.0
                };
                let m = b1 * ms[i] + (1.0 - b1) * g;
                let v = b2 * vs[i] + (1.0 - b2) * g * g;
                ms[i] = m;
                vs[i] = v;
                params[i] -= lr * (m * c1) / ((v * c2).sqrt() + eps);
            }
        });

    // color sweep: stride parameters per voxel, chunked on voxel boundaries
    let color_chunk = CHUNK - (CHUNK % stride);
    state
        .field
        .color_coeffs
        .par_chunks_mut(color_chunk)
        .zip(state.m_color.par_chunks_mut(color_chunk))
        .zip(state.v_color.par_chunks_mut(color_chunk))
        .enumerate()
        .for_each(|(chunk_idx, ((params, ms), vs))| {
            let vox_base = chunk_idx * color_chunk / stride;
            for (vi, ((pvox, mvox), vvox)) in params
                .chunks_mut(stride)
                .zip(ms.chunks_mut(stride))
                .zip(vs.chunks_mut(stride))
                .enumerate()
            {
                let vox = vox_base + vi;
                let tagged = merged.tag[vox] == epoch;
                let gbase = vox * stride;
                for k in 0..pvox.len() {
                    let g = if tagged { merged.color[gbase + k] } else { 0.0 };
                    let m = b1 * mvox[k] + (1.0 - b1) * g;
                    let v = b2 * vvox[k] + (1.0 - b2) * g * g;
                    mvox[k] = m;
                    vvox[k] = v;
                    pvox[k] -= lr * (m * c1) / ((v * c2).sqrt() + eps);
                }
            }
        });
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub seed: u64,
    pub loss_mode: String,
    pub mask_mode: String,
    pub trim_quantile: f64,
    pub steps: u64,
    pub lr_init: f64,
    pub lr_final: f64,
    pub n_samples: usize,
    pub background: Vec3,
    pub look_target: Vec3,
    pub final_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_loss: f64,
    /// Logged (step, subset eval PSNR) curve.
    pub psnr_curve: Vec<(u64, f64)>,
    /// Logged (step, pooled outlier-mask IoU) curve.
    pub mask_iou_curve: Vec<(u64, f64)>,
    pub checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
    pub threads: usize,
}

fn mask_mode_str(mode: MaskMode) -> &'static str {
    match mode {
        MaskMode::TrimOnly => "trim_only",
        MaskMode::TrimDiffuse => "trim_diffuse",
        MaskMode::Full => "full",
    }
}

/// Full-frame mask evaluation: render the frame deterministically, tile the
/// residual map into neighborhoods (threshold over the whole frame), and
/// compare the final inlier mask's complement against the oracle.
pub fn frame_inlier_mask(
    field: &VoxelField,
    frame: &FrameRecord,
    cfg: &TrainConfig,
    background: Vec3,
) -> Result<InlierFrameMask> {
    let rendered = render::render_image(field, &frame.camera, cfg.n_samples, background)?;
    let residuals = compute_residual_map(&rendered, &frame.image)?;
    let n = cfg.mask.neighborhood;
    let tiles_x = frame.image.width / n;
    let tiles_y = frame.image.height / n;
    if tiles_x == 0 || tiles_y == 0 {
        return Err(Error::invalid("frame smaller than the mask neighborhood"));
    }
    let mut maps = Vec::with_capacity(tiles_x * tiles_y);
    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let mut values = Vec::with_capacity(n * n);
            for y in 0..n {
                for x in 0..n {
                    values.push(residuals.get(tx * n + x, ty * n + y));
                }
            }
            maps.push(crate::mask::ResidualMap::new(n, n, values)?);
        }
    }
    let masks = compute_robust_mask(&maps, &cfg.mask)?;
    // untiled margins (image size not divisible by the neighborhood) stay
    // inlier and are ignored by the metrics
    let mut trimmed = MaskImage::new(frame.image.width, frame.image.height, true);
    let mut diffused = trimmed.clone();
    let mut final_mask = trimmed.clone();
    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let m = &masks[ty * tiles_x + tx];
            for y in 0..n {
                for x in 0..n {
                    trimmed.set(tx * n + x, ty * n + y, m.trimmed.get(x, y));
                    diffused.set(tx * n + x, ty * n + y, m.diffused.get(x, y));
                    final_mask.set(tx * n + x, ty * n + y, m.final_mask.get(x, y));
                }
            }
        }
    }
    Ok(InlierFrameMask {
        trimmed,
        diffused,
        final_mask,
    })
}

#[derive(Debug, Clone)]
pub struct InlierFrameMask {
    pub trimmed: MaskImage,
    pub diffused: MaskImage,
    pub final_mask: MaskImage,
}

fn pooled_mask_iou(
    field: &VoxelField,
    frames: &[&FrameRecord],
    cfg: &TrainConfig,
    background: Vec3,
) -> Result<f64> {
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fneg = 0u64;
    for frame in frames {
        let mask = frame_inlier_mask(field, frame, cfg, background)?;
        let oracle = frame
            .oracle_mask
            .as_ref()
            .ok_or_else(|| Error::invalid("mask IoU needs oracle masks"))?;
        let (a, b, c) = eval::mask_outlier_confusion(&mask.final_mask, oracle)?;
        tp += a;
        fp += b;
        fneg += c;
    }
    Ok(eval::metrics_from_confusion(tp, fp, fneg).iou)
}

/// Run the full training loop: metrics CSV, optional mask dumps, scheduled
/// subset-PSNR and mask-IoU logging, final checkpoint. Deterministic given
/// the config (bit-reproducible with threads = 1).
pub fn run_training(
    cfg: &TrainConfig,
    frames: &[FrameRecord],
    manifest: &DatasetManifest,
    out_dir: &Path,
) -> Result<TrainSummary> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let train_frames: Vec<FrameRecord> = frames
        .iter()
        .filter(|f| f.split == Split::Train)
        .cloned()
        .collect();
    let eval_frames: Vec<&FrameRecord> = frames
        .iter()
        .filter(|f| f.split == Split::Eval)
        .take(cfg.eval_frames.max(1))
        .collect();
    if train_frames.is_empty() {
        return Err(Error::Train("dataset has no training frames".into()));
    }

    let threads = cfg.resolved_threads();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Train(format!("thread pool: {e}")))?;

    let mask_frames: Vec<&FrameRecord> = manifest
        .cluttered_frames
        .iter()
        .take(cfg.mask_metric_frames.max(1))
        .filter_map(|&i| train_frames.get(i))
        .collect();
    let dump_frame = manifest
        .cluttered_frames
        .first()
        .and_then(|&i| train_frames.get(i))
        .cloned();

    let mut state = TrainState::new(cfg, manifest)?;
    let mut metrics = String::from("step,loss,inlier_fraction,lr,eval_psnr,mask_iou\n");
    let mut psnr_curve = Vec::new();
    let mut iou_curve = Vec::new();
    let mut final_loss = 0.0;

    pool.install(|| -> Result<()> {
        while state.step < cfg.steps {
            let stats = train_step(&mut state, &train_frames, cfg)?;
            final_loss = stats.loss;
            let s = stats.step; // 1-based after the step
            let last = s == cfg.steps;
            let log_row = last || s % cfg.log_interval.max(1) == 0;
            let do_eval = last || (cfg.eval_interval > 0 && s % cfg.eval_interval == 0);
            let do_mask = cfg.loss_mode == LossMode::Robust
                && !mask_frames.is_empty()
                && (last
                    || s == 100
                    || (cfg.mask_metric_interval > 0 && s % cfg.mask_metric_interval == 0));
            let do_dump =
                cfg.dump_mask_interval > 0 && (last || s % cfg.dump_mask_interval == 0);

            let mut psnr_field = String::new();
            if do_eval && !eval_frames.is_empty() {
                let mut total = 0.0;
                for f in &eval_frames {
                    let rendered = render::render_image(
                        &state.field,
                        &f.camera,
                        cfg.n_samples,
                        state.background,
                    )?;
                    total += eval::compute_psnr(&rendered, &f.image)?;
                }
                let psnr = total / eval_frames.len() as f64;
                psnr_curve.push((s, psnr));
                psnr_field = format!("{psnr:.6}");
            }
            let mut iou_field = String::new();
            if do_mask {
                let iou = pooled_mask_iou(&state.field, &mask_frames, cfg, state.background)?;
                iou_curve.push((s, iou));
                iou_field = format!("{iou:.6}");
            }
            if do_dump {
                if let Some(frame) = &dump_frame {
                    let mask = frame_inlier_mask(&state.field, frame, cfg, state.background)?;
                    let dir = out_dir.join("mask_dumps");
                    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                    for (stage, m) in [
                        ("trimmed", &mask.trimmed),
                        ("diffused", &mask.diffused),
                        ("final", &mask.final_mask),
                    ] {
                        img::write_mask_ppm(
                            &dir.join(format!("mask_{stage}_step{s:06}.ppm")),
                            m,
                        )?;
                    }
                }
            }
            if log_row || do_eval || do_mask {
                writeln!(
                    metrics,
                    "{},{:.8},{:.6},{:.8},{},{}",
                    s, stats.loss, stats.inlier_fraction, stats.lr, psnr_field, iou_field
                )
                .expect("write to string");
            }
        }
        Ok(())
    })?;

    let metrics_csv = out_dir.join("metrics.csv");
    fs::write(&metrics_csv, metrics).map_err(|e| Error::io(&metrics_csv, e))?;

    let checkpoint = out_dir.join("checkpoint.bin");
    let meta = CheckpointMeta {
        step: state.step,
        seed: cfg.seed,
        loss_mode: cfg.loss_mode.as_str().to_string(),
        mask_mode: mask_mode_str(cfg.mask.mode).to_string(),
        trim_quantile: cfg.mask.trim_quantile,
        steps: cfg.steps,
        lr_init: cfg.lr_init,
        lr_final: cfg.lr_final,
        n_samples: cfg.n_samples,
        background: state.background,
        look_target: manifest.scene.static_centroid(),
        final_loss,
    };
    crate::field::save_checkpoint(&state.field, &meta, &checkpoint)?;

    Ok(TrainSummary {
        steps: state.step,
        final_loss,
        psnr_curve,
        mask_iou_curve: iou_curve,
        checkpoint,
        metrics_csv,
        threads,
    })
}
