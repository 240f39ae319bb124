//! Pinhole cameras.
//!
//! Camera frame follows the usual vision convention: x right, y down,
//! z along the optical axis. Pixel coordinates are continuous, with integer
//! values at pixel centers, so pixel `(i, j)` of an image covers
//! `[i - 0.5, i + 0.5) x [j - 0.5, j + 0.5)`.

use crate::warehouse::Vec3;
use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Square image with the principal point at its center.
    pub fn centered(size: u32, focal: f64) -> Self {
        Intrinsics {
            width: size,
            height: size,
            fx: focal,
            fy: focal,
            cx: size as f64 / 2.0,
            cy: size as f64 / 2.0,
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Projects a camera-frame point; `None` behind the camera.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Camera-frame point at pixel `(u, v)` with z-depth `depth`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        Vec3::new(
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        )
    }

    /// Nearest pixel index to a continuous coordinate, if inside the image.
    pub fn pixel_index(&self, u: f64, v: f64) -> Option<(u32, u32)> {
        let i = u.round();
        let j = v.round();
        if i < 0.0 || j < 0.0 || i >= self.width as f64 || j >= self.height as f64 {
            return None;
        }
        Some((i as u32, j as u32))
    }
}

/// Rigid camera-to-world transform. Columns of `rotation` are the camera
/// axes expressed in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl CameraPose {
    pub fn identity() -> Self {
        CameraPose {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Camera at `eye` looking at `target`, with image-up roughly along `up`.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        CameraPose {
            rotation: Matrix3::from_columns(&[right, down, forward]),
            translation: eye,
        }
    }

    /// Straight-down camera at `eye`: image x along world +x, image y along
    /// world -y.
    pub fn top_down(eye: Vec3) -> Self {
        CameraPose {
            rotation: Matrix3::from_columns(&[
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.0, -1.0, 0.0),
                Vec3::new(0.0, 0.0, -1.0),
            ]),
            translation: eye,
        }
    }

    pub fn to_world(&self, p_cam: &Vec3) -> Vec3 {
        self.rotation * p_cam + self.translation
    }

    pub fn to_camera(&self, p_world: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p_world - self.translation)
    }

    pub fn optical_axis(&self) -> Vec3 {
        self.rotation.column(2).into()
    }

    /// Row-major homogeneous 4x4 matrix.
    pub fn to_matrix4(&self) -> [[f64; 4]; 4] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    pub fn from_matrix4(m: &[[f64; 4]; 4]) -> Self {
        CameraPose {
            rotation: Matrix3::new(
                m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
            ),
            translation: Vec3::new(m[0][3], m[1][3], m[2][3]),
        }
    }
}

/// One entry of the recorded camera rig.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraView {
    pub intrinsics: Intrinsics,
    pub camera_to_world: [[f64; 4]; 4],
}

impl CameraView {
    pub fn pose(&self) -> CameraPose {
        CameraPose::from_matrix4(&self.camera_to_world)
    }
}
