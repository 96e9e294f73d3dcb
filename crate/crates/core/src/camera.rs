//! Pinhole camera model with a camera-to-world pose.
//!
//! Camera space follows the usual NeRF convention: x right, y up, the camera
//! looks along -z. Image v grows downward, hence the sign flip on y.

use crate::error::{Error, Result};
use crate::math::Vec3;
use serde::{Deserialize, Serialize};

pub const ROTATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Camera-to-world transform, 3x4 row-major: rows of [R | t].
    pub c2w: [[f64; 4]; 3],
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        c2w: [[f64; 4]; 3],
    ) -> Result<Self> {
        let cam = CameraModel {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            c2w,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera centered on `eye` looking at `target`, world up = +z.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let up_hint = Vec3::new(0.0, 0.0, 1.0);
        let right = forward.cross(up_hint);
        let right_norm = right.norm();
        if right_norm < 1e-9 {
            return Err(Error::invalid(
                "camera forward axis is parallel to the world up axis",
            ));
        }
        let right = right / right_norm;
        let up = right.cross(forward);
        let back = -forward; // camera +z
        let c2w = [
            [right.x, up.x, back.x, eye.x],
            [right.y, up.y, back.y, eye.y],
            [right.z, up.z, back.z, eye.z],
        ];
        CameraModel::new(
            fx,
            fy,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
            c2w,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx.is_finite() && self.fy.is_finite() && self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        for row in &self.c2w {
            for v in row {
                if !v.is_finite() {
                    return Err(Error::invalid("camera pose contains non-finite values"));
                }
            }
        }
        // columns of R must be orthonormal within tolerance
        let cols = self.rotation_cols();
        for i in 0..3 {
            for j in i..3 {
                let d = cols[i].dot(cols[j]);
                let expect = if i == j { 1.0 } else { 0.0 };
                if (d - expect).abs() > ROTATION_TOLERANCE {
                    return Err(Error::invalid(format!(
                        "camera rotation is not orthonormal: col{i}.col{j} = {d}"
                    )));
                }
            }
        }
        // proper rotation, no reflections
        let det = cols[0].dot(cols[1].cross(cols[2]));
        if (det - 1.0).abs() > 1e-4 {
            return Err(Error::invalid(format!(
                "camera rotation determinant {det} is not +1"
            )));
        }
        Ok(())
    }

    fn rotation_cols(&self) -> [Vec3; 3] {
        [
            Vec3::new(self.c2w[0][0], self.c2w[1][0], self.c2w[2][0]),
            Vec3::new(self.c2w[0][1], self.c2w[1][1], self.c2w[2][1]),
            Vec3::new(self.c2w[0][2], self.c2w[1][2], self.c2w[2][2]),
        ]
    }

    pub fn position(&self) -> Vec3 {
        Vec3::new(self.c2w[0][3], self.c2w[1][3], self.c2w[2][3])
    }

    pub fn rotate_to_world(&self, v: Vec3) -> Vec3 {
        Vec3::new(
            self.c2w[0][0] * v.x + self.c2w[0][1] * v.y + self.c2w[0][2] * v.z,
            self.c2w[1][0] * v.x + self.c2w[1][1] * v.y + self.c2w[1][2] * v.z,
            self.c2w[2][0] * v.x + self.c2w[2][1] * v.y + self.c2w[2][2] * v.z,
        )
    }

    /// World-space origin and unit direction of the ray through continuous
    /// pixel coordinates (u, v). Does not validate the camera.
    pub fn primary_ray(&self, u: f64, v: f64) -> (Vec3, Vec3) {
        let dir_cam = Vec3::new((u - self.cx) / self.fx, -(v - self.cy) / self.fy, -1.0);
        let dir = self.rotate_to_world(dir_cam.normalize());
        (self.position(), dir)
    }

    /// Unit vector along the optical axis (camera -z in world space).
    pub fn optical_axis(&self) -> Vec3 {
        self.rotate_to_world(Vec3::new(0.0, 0.0, -1.0))
    }

    /// Flat [R | t] in row-major order, as stored in cameras.json.
    pub fn c2w_flat(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for (i, row) in self.c2w.iter().enumerate() {
            out[i * 4..(i + 1) * 4].copy_from_slice(row);
        }
        out
    }

    pub fn from_c2w_flat(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        flat: &[f64; 12],
    ) -> Result<Self> {
        let mut c2w = [[0.0; 4]; 3];
        for (i, row) in c2w.iter_mut().enumerate() {
            row.copy_from_slice(&flat[i * 4..(i + 1) * 4]);
        }
        CameraModel::new(fx, fy, cx, cy, width, height, c2w)
    }
}

pub fn identity_pose() -> [[f64; 4]; 3] {
    [
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
    ]
}
