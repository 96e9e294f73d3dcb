//! Synthetic scene generation: a texture-less room with three static
//! primitives and a pool of distractor templates that are independently
//! re-placed in every cluttered training frame. Frames are ray traced with
//! Lambertian shading and a single point light; oracle masks flag every
//! pixel whose color would change if the distractors were removed.
//!
//! Dataset directory layout:
//!
//! ```text
//! out/
//!   manifest.json     scene spec, seeds, splits, measured occupancy
//!   cameras.json      per frame: split, intrinsics, 3x4 camera-to-world
//!   images/frame_NNNN.ppm   binary P6, 8-bit
//!   masks/frame_NNNN.ppm    P6, 0/255, training frames only
//! ```

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::img::{self, ImageRgb, MaskImage};
use crate::json17;
use crate::math::{chacha_seed, Aabb, Vec3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

const DOMAIN_TEMPLATES: u64 = 0xA1;
const DOMAIN_CAMERAS: u64 = 0xB2;
const DOMAIN_PLACEMENT: u64 = 0xC3;

const PLACEMENT_ATTEMPTS: usize = 10_000;
const FORMAT_VERSION: u32 = 1;

/// Vertical field of view used for all generated cameras.
const FOV_Y_DEGREES: f64 = 55.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half_extents: Vec3 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub center: Vec3,
    pub albedo: Vec3,
    pub is_distractor: bool,
}

impl Primitive {
    fn half_size(&self) -> Vec3 {
        match self.shape {
            Shape::Sphere { radius } => Vec3::splat(radius),
            Shape::Box { half_extents } => half_extents,
        }
    }

    fn size_positive(&self) -> bool {
        match self.shape {
            Shape::Sphere { radius } => radius > 0.0,
            Shape::Box { half_extents } => {
                half_extents.x > 0.0 && half_extents.y > 0.0 && half_extents.z > 0.0
            }
        }
    }

    fn inside(&self, bounds: &Aabb) -> bool {
        let h = self.half_size();
        bounds.contains(self.center - h) && bounds.contains(self.center + h)
    }

    fn overlaps(&self, other: &Primitive) -> bool {
        match (self.shape, other.shape) {
            (Shape::Sphere { radius: r1 }, Shape::Sphere { radius: r2 }) => {
                (self.center - other.center).norm() < r1 + r2
            }
            (Shape::Box { half_extents: h1 }, Shape::Box { half_extents: h2 }) => {
                let d = (self.center - other.center).abs();
                d.x < h1.x + h2.x && d.y < h1.y + h2.y && d.z < h1.z + h2.z
            }
            (Shape::Sphere { radius }, Shape::Box { half_extents }) => {
                sphere_box_overlap(self.center, radius, other.center, half_extents)
            }
            (Shape::Box { half_extents }, Shape::Sphere { radius }) => {
                sphere_box_overlap(other.center, radius, self.center, half_extents)
            }
        }
    }
}

fn sphere_box_overlap(sc: Vec3, r: f64, bc: Vec3, bh: Vec3) -> bool {
    let lo = bc - bh;
    let hi = bc + bh;
    let nearest = sc.max_elem(lo).min_elem(hi);
    (nearest - sc).norm() < r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Light {
    pub position: Vec3,
    /// Ambient fraction in [0, 1); the rest is the Lambertian term.
    pub ambient: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub bounds: Aabb,
    pub statics: Vec<Primitive>,
    pub distractor_pool: Vec<Primitive>,
    pub difficulty: Difficulty,
    pub light: Light,
    pub background: Vec3,
    /// Fraction of training frames that contain distractors.
    pub clutter_fraction: f64,
    pub seed: u64,
    /// Cast shadows (distractor shadows count as distractor pixels).
    pub shadows: bool,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.bounds.is_valid() {
            return Err(Error::invalid("scene bounds are degenerate"));
        }
        if self.statics.is_empty() {
            return Err(Error::invalid("scene must have at least one static"));
        }
        if !(0.0..=1.0).contains(&self.clutter_fraction) {
            return Err(Error::invalid(format!(
                "clutter_fraction must be in [0, 1], got {}",
                self.clutter_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.light.ambient) {
            return Err(Error::invalid("ambient fraction must be in [0, 1)"));
        }
        for p in &self.statics {
            if !p.size_positive() {
                return Err(Error::invalid("static primitive has non-positive size"));
            }
            if !p.inside(&self.bounds) {
                return Err(Error::invalid("static primitive extends outside bounds"));
            }
            if p.is_distractor {
                return Err(Error::invalid("static primitive flagged as distractor"));
            }
        }
        for p in &self.distractor_pool {
            if !p.size_positive() {
                return Err(Error::invalid("distractor template has non-positive size"));
            }
            if !p.is_distractor {
                return Err(Error::invalid("distractor template missing its flag"));
            }
        }
        Ok(())
    }

    pub fn static_centroid(&self) -> Vec3 {
        let mut c = Vec3::ZERO;
        for p in &self.statics {
            c += p.center;
        }
        c / self.statics.len() as f64
    }
}

fn room_bounds() -> Aabb {
    Aabb::new(Vec3::new(-1.5, -1.5, 0.0), Vec3::new(1.5, 1.5, 2.0))
}

fn static_furniture() -> Vec<Primitive> {
    vec![
        // sofa: wide low box
        Primitive {
            shape: Shape::Box {
                half_extents: Vec3::new(0.62, 0.30, 0.22),
            },
            center: Vec3::new(0.0, -0.15, 0.22),
            albedo: Vec3::new(0.70, 0.22, 0.18),
            is_distractor: false,
        },
        // bookshelf: tall box
        Primitive {
            shape: Shape::Box {
                half_extents: Vec3::new(0.28, 0.16, 0.55),
            },
            center: Vec3::new(-0.75, 0.55, 0.55),
            albedo: Vec3::new(0.20, 0.36, 0.74),
            is_distractor: false,
        },
        // lamp: sphere
        Primitive {
            shape: Shape::Sphere { radius: 0.24 },
            center: Vec3::new(0.70, 0.60, 0.80),
            albedo: Vec3::new(0.93, 0.84, 0.34),
            is_distractor: false,
        },
    ]
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> Vec3 {
    let h6 = (h.fract() * 6.0).rem_euclid(6.0);
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    Vec3::new(r + m, g + m, b + m)
}

/// Named difficulty presets: 1 small / 3 medium / 6 large distractor
/// templates over a fixed static set. Deterministic per seed.
pub fn build_scene(difficulty: Difficulty, seed: u64) -> Result<SceneSpec> {
    let shapes: Vec<Shape> = match difficulty {
        Difficulty::Easy => vec![Shape::Sphere { radius: 0.26 }],
        Difficulty::Medium => vec![
            Shape::Sphere { radius: 0.26 },
            Shape::Box {
                half_extents: Vec3::new(0.24, 0.24, 0.30),
            },
            Shape::Box {
                half_extents: Vec3::new(0.33, 0.20, 0.15),
            },
        ],
        Difficulty::Hard => vec![
            Shape::Sphere { radius: 0.34 },
            Shape::Box {
                half_extents: Vec3::new(0.30, 0.30, 0.38),
            },
            Shape::Box {
                half_extents: Vec3::new(0.40, 0.24, 0.18),
            },
            Shape::Box {
                half_extents: Vec3::new(0.40, 0.24, 0.18),
            },
            Shape::Box {
                half_extents: Vec3::new(0.38, 0.22, 0.20),
            },
            Shape::Box {
                half_extents: Vec3::new(0.36, 0.26, 0.16),
            },
        ],
        Difficulty::Custom => {
            return Err(Error::invalid(
                "custom difficulty requires an explicit SceneSpec",
            ))
        }
    };
    let mut rng = ChaCha12Rng::from_seed(chacha_seed(seed, DOMAIN_TEMPLATES, 0));
    let distractor_pool = shapes
        .into_iter()
        .map(|shape| {
            // saturated palette so distractors contrast with the statics
            let albedo = hsv_to_rgb(rng.random_range(0.0..1.0), 0.85, 0.95);
            Primitive {
                shape,
                center: Vec3::ZERO, // re-placed per frame
                albedo,
                is_distractor: true,
            }
        })
        .collect();
    let spec = SceneSpec {
        bounds: room_bounds(),
        statics: static_furniture(),
        distractor_pool,
        difficulty,
        light: Light {
            position: Vec3::new(0.80, -0.90, 1.85),
            ambient: 0.30,
        },
        background: Vec3::new(0.85, 0.85, 0.88),
        clutter_fraction: 1.0,
        seed,
        shadows: difficulty != Difficulty::Easy,
    };
    spec.validate()?;
    Ok(spec)
}

struct Hit {
    t: f64,
    normal: Vec3,
    prim: usize,
}

fn intersect(prim: &Primitive, origin: Vec3, dir: Vec3, t_min: f64, t_max: f64) -> Option<(f64, Vec3)> {
    match prim.shape {
        Shape::Sphere { radius } => {
            let oc = origin - prim.center;
            let b = oc.dot(dir);
            let c = oc.dot(oc) - radius * radius;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            let mut t = -b - sq;
            if t <= t_min {
                t = -b + sq;
            }
            if t <= t_min || t >= t_max {
                return None;
            }
            let normal = (origin + dir * t - prim.center) / radius;
            Some((t, normal))
        }
        Shape::Box { half_extents } => {
            let lo = prim.center - half_extents;
            let hi = prim.center + half_extents;
            let mut t0 = f64::NEG_INFINITY;
            let mut t1 = f64::INFINITY;
            let mut axis0 = 0usize;
            let mut axis1 = 0usize;
            for axis in 0..3 {
                let o = origin.get(axis);
                let d = dir.get(axis);
                if d == 0.0 {
                    if o < lo.get(axis) || o > hi.get(axis) {
                        return None;
                    }
                    continue;
                }
                let inv = 1.0 / d;
                let (a, b) = ((lo.get(axis) - o) * inv, (hi.get(axis) - o) * inv);
                let (near, far) = if a < b { (a, b) } else { (b, a) };
                if near > t0 {
                    t0 = near;
                    axis0 = axis;
                }
                if far < t1 {
                    t1 = far;
                    axis1 = axis;
                }
                if t0 > t1 {
                    return None;
                }
            }
            let (t, axis, sign) = if t0 > t_min {
                (t0, axis0, -dir.get(axis0).signum())
            } else {
                (t1, axis1, dir.get(axis1).signum())
            };
            if t <= t_min || t >= t_max {
                return None;
            }
            let mut normal = Vec3::ZERO;
            match axis {
                0 => normal.x = sign,
                1 => normal.y = sign,
                _ => normal.z = sign,
            }
            Some((t, normal))
        }
    }
}

/// One frame's renderable content: statics plus that frame's placed
/// distractors.
#[derive(Debug, Clone)]
pub struct FrameScene {
    pub primitives: Vec<Primitive>,
    pub light: Light,
    pub background: Vec3,
    pub shadows: bool,
}

impl FrameScene {
    pub fn new(spec: &SceneSpec, placed_distractors: &[Primitive]) -> Self {
        let mut primitives = spec.statics.clone();
        primitives.extend_from_slice(placed_distractors);
        FrameScene {
            primitives,
            light: spec.light,
            background: spec.background,
            shadows: spec.shadows,
        }
    }

    fn nearest_hit(&self, origin: Vec3, dir: Vec3) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, prim) in self.primitives.iter().enumerate() {
            let t_max = best.as_ref().map_or(f64::INFINITY, |h| h.t);
            if let Some((t, normal)) = intersect(prim, origin, dir, 1e-9, t_max) {
                best = Some(Hit { t, normal, prim: i });
            }
        }
        best
    }

    /// Is the segment from `p` toward the light blocked by any primitive in
    /// the given class (distractors or statics)?
    fn occluded_by(&self, p: Vec3, to_light: Vec3, dist: f64, distractors: bool) -> bool {
        self.primitives
            .iter()
            .filter(|prim| prim.is_distractor == distractors)
            .any(|prim| intersect(prim, p, to_light, 1e-7, dist - 1e-7).is_some())
    }

    /// Shade the nearest intersection along the pixel ray. Returns the exact
    /// (unquantized) color and whether the pixel is photo-inconsistent, i.e.
    /// whether removing the distractors would change it: either the first
    /// hit is a distractor, or the hit is a static whose light path is
    /// blocked by a distractor while no static blocks it.
    pub fn trace(&self, origin: Vec3, dir: Vec3) -> (Vec3, bool) {
        let hit = match self.nearest_hit(origin, dir) {
            Some(h) => h,
            None => return (self.background, false),
        };
        let prim = &self.primitives[hit.prim];
        let p = origin + dir * hit.t;
        let mut n = hit.normal;
        if n.dot(dir) > 0.0 {
            n = -n;
        }
        let to_light = self.light.position - p;
        let dist = to_light.norm();
        let l = to_light / dist;
        let lambert = n.dot(l).max(0.0);
        let shadow_origin = p + n * 1e-6;

        let mut flag = prim.is_distractor;
        let mut visible = 1.0;
        if self.shadows && lambert > 0.0 {
            let static_block = self.occluded_by(shadow_origin, l, dist, false);
            let distractor_block = self.occluded_by(shadow_origin, l, dist, true);
            if static_block || distractor_block {
                visible = 0.0;
            }
            if !prim.is_distractor && !static_block && distractor_block {
                // the shadow exists only because of a distractor
                flag = true;
            }
        }
        let shade = self.light.ambient + (1.0 - self.light.ambient) * lambert * visible;
        (prim.albedo * shade, flag)
    }
}

/// Ray-trace a single pixel of the reference image. Returns the exact color
/// and the oracle distractor flag.
pub fn trace_reference_pixel(
    scene: &FrameScene,
    camera: &CameraModel,
    pixel: (f64, f64),
) -> Result<(Vec3, bool)> {
    camera.validate()?;
    if pixel.0 < 0.0
        || pixel.1 < 0.0
        || pixel.0 > camera.width as f64
        || pixel.1 > camera.height as f64
    {
        return Err(Error::invalid(format!(
            "pixel ({}, {}) outside a {}x{} image",
            pixel.0, pixel.1, camera.width, camera.height
        )));
    }
    let (origin, dir) = camera.primary_ray(pixel.0, pixel.1);
    Ok(scene.trace(origin, dir))
}

/// Render a full frame (exact f64 colors) plus its oracle mask.
pub fn trace_frame(scene: &FrameScene, camera: &CameraModel) -> (ImageRgb, MaskImage) {
    let (w, h) = (camera.width, camera.height);
    let mut image = ImageRgb::new(w, h);
    let mut mask = MaskImage::new(w, h, false);
    let rows: Vec<(Vec<f64>, Vec<bool>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut colors = Vec::with_capacity(w * 3);
            let mut flags = Vec::with_capacity(w);
            for x in 0..w {
                let (origin, dir) = camera.primary_ray(x as f64 + 0.5, y as f64 + 0.5);
                let (c, f) = scene.trace(origin, dir);
                colors.extend_from_slice(&[c.x, c.y, c.z]);
                flags.push(f);
            }
            (colors, flags)
        })
        .collect();
    for (y, (colors, flags)) in rows.into_iter().enumerate() {
        image.data[y * w * 3..(y + 1) * w * 3].copy_from_slice(&colors);
        mask.data[y * w..(y + 1) * w].copy_from_slice(&flags);
    }
    (image, mask)
}

/// One training or evaluation view.
#[derive(Debug, Clone)]
pub struct FrameRecord {
    pub camera: CameraModel,
    pub image: ImageRgb,
    /// Oracle distractor mask (1 = distractor pixel); training frames only.
    pub oracle_mask: Option<MaskImage>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub scene: SceneSpec,
    pub n_train: usize,
    pub n_eval: usize,
    pub image_size: usize,
    /// Training frame indices that contain distractors.
    pub cluttered_frames: Vec<usize>,
    /// Measured mean fraction of oracle-flagged pixels over cluttered frames.
    pub distractor_occupancy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CameraEntry {
    split: Split,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    c2w: [f64; 12],
}

fn sample_camera(rng: &mut ChaCha12Rng, spec: &SceneSpec, image_size: usize) -> Result<CameraModel> {
    let centroid = spec.static_centroid();
    let radius: f64 = rng.random_range(2.4..3.0);
    let azimuth: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let elevation: f64 = rng.random_range(0.30..1.10);
    let jitter = Vec3::new(
        rng.random_range(-0.05..0.05),
        rng.random_range(-0.05..0.05),
        rng.random_range(-0.05..0.05),
    );
    let eye = centroid
        + Vec3::new(
            radius * elevation.cos() * azimuth.cos(),
            radius * elevation.cos() * azimuth.sin(),
            radius * elevation.sin(),
        );
    let f = 0.5 * image_size as f64 / (FOV_Y_DEGREES.to_radians() / 2.0).tan();
    CameraModel::look_at(eye, centroid + jitter, f, f, image_size, image_size)
}

/// Place every distractor template at a collision-free pose via rejection
/// sampling. Deterministic per (seed, frame).
pub fn place_distractors(spec: &SceneSpec, frame: usize) -> Result<Vec<Primitive>> {
    let mut rng = ChaCha12Rng::from_seed(chacha_seed(spec.seed, DOMAIN_PLACEMENT, frame as u64));
    let mut placed: Vec<Primitive> = Vec::with_capacity(spec.distractor_pool.len());
    for template in &spec.distractor_pool {
        let h = template.half_size();
        let margin = 0.02;
        let mut done = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let x = rng.random_range(spec.bounds.lo.x + h.x + margin..spec.bounds.hi.x - h.x - margin);
            let y = rng.random_range(spec.bounds.lo.y + h.y + margin..spec.bounds.hi.y - h.y - margin);
            let z = rng.random_range(h.z + margin..(h.z + 0.55).min(spec.bounds.hi.z - h.z - margin));
            let candidate = Primitive {
                center: Vec3::new(x, y, z),
                ..*template
            };
            let collides = spec
                .statics
                .iter()
                .chain(placed.iter())
                .any(|p| candidate.overlaps(p));
            if !collides {
                placed.push(candidate);
                done = true;
                break;
            }
        }
        if !done {
            return Err(Error::Generation(format!(
                "could not place distractor after {PLACEMENT_ATTEMPTS} attempts in frame {frame}"
            )));
        }
    }
    Ok(placed)
}

/// Evenly spread `count` cluttered frames over `n` training frames
/// (integer Bresenham, deterministic).
fn cluttered_indices(n: usize, fraction: f64) -> Vec<usize> {
    let count = (fraction * n as f64).round() as usize;
    if count == 0 {
        return Vec::new();
    }
    (0..n)
        .filter(|&i| ((i + 1) * count) / n > (i * count) / n)
        .collect()
}

/// Generate the dataset in memory and write it to `out_path`. Returns the
/// frames and manifest exactly as a subsequent [`load_dataset`] would.
pub fn generate_dataset(
    spec: &SceneSpec,
    n_train: usize,
    n_eval: usize,
    image_size: usize,
    out_path: &Path,
) -> Result<(Vec<FrameRecord>, DatasetManifest)> {
    spec.validate()?;
    if n_train == 0 || n_eval == 0 {
        return Err(Error::invalid("n_train and n_eval must be > 0"));
    }
    if image_size < 4 {
        return Err(Error::invalid("image_size must be >= 4"));
    }

    let mut cam_rng = ChaCha12Rng::from_seed(chacha_seed(spec.seed, DOMAIN_CAMERAS, 0));
    let mut cameras = Vec::with_capacity(n_train + n_eval);
    for _ in 0..n_train + n_eval {
        cameras.push(sample_camera(&mut cam_rng, spec, image_size)?);
    }

    let cluttered = cluttered_indices(n_train, spec.clutter_fraction);
    let mut frames = Vec::with_capacity(n_train + n_eval);
    let mut occupancy_sum = 0.0;
    for (i, camera) in cameras.iter().enumerate() {
        let split = if i < n_train { Split::Train } else { Split::Eval };
        let placed = if split == Split::Train && cluttered.contains(&i) {
            place_distractors(spec, i)?
        } else {
            Vec::new()
        };
        let scene = FrameScene::new(spec, &placed);
        let (image, mask) = trace_frame(&scene, camera);
        if !placed.is_empty() {
            occupancy_sum += mask.count_true() as f64 / mask.data.len() as f64;
        }
        frames.push(FrameRecord {
            camera: *camera,
            image: image.quantized(),
            oracle_mask: (split == Split::Train).then_some(mask),
            split,
        });
    }
    let occupancy = if cluttered.is_empty() {
        0.0
    } else {
        occupancy_sum / cluttered.len() as f64
    };

    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        scene: spec.clone(),
        n_train,
        n_eval,
        image_size,
        cluttered_frames: cluttered,
        distractor_occupancy: occupancy,
    };
    save_dataset(out_path, &manifest, &frames)?;
    Ok((frames, manifest))
}

/// Serialize a dataset to disk; used by generation and by round-trip tests.
pub fn save_dataset(dir: &Path, manifest: &DatasetManifest, frames: &[FrameRecord]) -> Result<()> {
    fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
    fs::create_dir_all(dir.join("masks")).map_err(|e| Error::io(dir, e))?;
    let manifest_text = json17::to_string_17(manifest)?;
    fs::write(dir.join("manifest.json"), manifest_text).map_err(|e| Error::io(dir, e))?;

    let entries: Vec<CameraEntry> = frames
        .iter()
        .map(|f| CameraEntry {
            split: f.split,
            fx: f.camera.fx,
            fy: f.camera.fy,
            cx: f.camera.cx,
            cy: f.camera.cy,
            width: f.camera.width,
            height: f.camera.height,
            c2w: f.camera.c2w_flat(),
        })
        .collect();
    let cameras_text = json17::to_string_17(&entries)?;
    fs::write(dir.join("cameras.json"), cameras_text).map_err(|e| Error::io(dir, e))?;

    for (i, frame) in frames.iter().enumerate() {
        img::write_ppm(&dir.join(format!("images/frame_{i:04}.ppm")), &frame.image)?;
        if let Some(mask) = &frame.oracle_mask {
            img::write_mask_ppm(&dir.join(format!("masks/frame_{i:04}.ppm")), mask)?;
        }
    }
    Ok(())
}

/// Load a dataset directory, validating every frame invariant.
pub fn load_dataset(dir: &Path) -> Result<(Vec<FrameRecord>, DatasetManifest)> {
    let manifest_path = dir.join("manifest.json");
    let manifest_text =
        fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&manifest_text)
        .map_err(|e| Error::Load(format!("malformed manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Load(format!(
            "unsupported dataset format version {}",
            manifest.format_version
        )));
    }
    manifest
        .scene
        .validate()
        .map_err(|e| Error::Load(format!("manifest scene spec invalid: {e}")))?;
    if manifest.n_eval == 0 {
        return Err(Error::Load("empty eval split".into()));
    }

    let cameras_path = dir.join("cameras.json");
    let cameras_text =
        fs::read_to_string(&cameras_path).map_err(|e| Error::io(&cameras_path, e))?;
    let entries: Vec<CameraEntry> = serde_json::from_str(&cameras_text)
        .map_err(|e| Error::Load(format!("malformed cameras.json: {e}")))?;
    let expected = manifest.n_train + manifest.n_eval;
    if entries.len() != expected {
        return Err(Error::Load(format!(
            "cameras.json has {} entries, manifest expects {}",
            entries.len(),
            expected
        )));
    }

    let mut frames = Vec::with_capacity(entries.len());
    for (i, entry) in entries.iter().enumerate() {
        let expected_split = if i < manifest.n_train {
            Split::Train
        } else {
            Split::Eval
        };
        if entry.split != expected_split {
            return Err(Error::Load(format!(
                "frame {i}: split does not match manifest ordering"
            )));
        }
        let camera = CameraModel::from_c2w_flat(
            entry.fx,
            entry.fy,
            entry.cx,
            entry.cy,
            entry.width,
            entry.height,
            &entry.c2w,
        )
        .map_err(|e| Error::Load(format!("frame {i}: {e}")))?;

        let image = img::read_ppm(&dir.join(format!("images/frame_{i:04}.ppm")))?;
        if image.width != manifest.image_size || image.height != manifest.image_size {
            return Err(Error::Load(format!(
                "frame {i}: image is {}x{}, manifest says {}",
                image.width, image.height, manifest.image_size
            )));
        }
        let oracle_mask = if entry.split == Split::Train {
            let mask = img::read_mask_ppm(&dir.join(format!("masks/frame_{i:04}.ppm")))?;
            if mask.width != image.width || mask.height != image.height {
                return Err(Error::Load(format!(
                    "frame {i}: mask and image dimensions differ"
                )));
            }
            Some(mask)
        } else {
            None
        };
        frames.push(FrameRecord {
            camera,
            image,
            oracle_mask,
            split: entry.split,
        });
    }
    Ok((frames, manifest))
}
