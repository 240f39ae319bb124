//! Depth rendering by ray casting and pixel backprojection.

use super::camera::{CameraPose, Intrinsics};
use crate::warehouse::{SceneState, Vec3};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackprojectError {
    #[error("pixel ({u:.2}, {v:.2}) is outside the image")]
    OutOfBounds { u: f64, v: f64 },
    #[error("no valid depth at pixel ({i}, {j})")]
    InvalidDepth { i: u32, j: u32 },
}

/// Row-major z-depth image; non-finite entries mark pixels with no hit.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: u32,
    pub height: u32,
    pub depth: Vec<f64>,
}

impl DepthImage {
    pub fn get(&self, i: u32, j: u32) -> f64 {
        self.depth[(j * self.width + i) as usize]
    }
}

enum Solid {
    /// Box rotated by `yaw` about +z through `center`.
    Oriented { center: Vec3, half: Vec3, yaw: f64 },
    /// Upright cylinder standing on `base`.
    Cylinder {
        base: Vec3,
        radius: f64,
        height: f64,
    },
}

fn slab(o: &Vec3, d: &Vec3, min: &Vec3, max: &Vec3) -> Option<f64> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for k in 0..3 {
        if d[k] == 0.0 {
            if o[k] < min[k] || o[k] > max[k] {
                return None;
            }
            continue;
        }
        let a = (min[k] - o[k]) / d[k];
        let b = (max[k] - o[k]) / d[k];
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    (t0 <= t1 && t0 > 0.0).then_some(t0)
}

impl Solid {
    fn hit(&self, o: &Vec3, d: &Vec3) -> Option<f64> {
        match *self {
            Solid::Oriented { center, half, yaw } => {
                let (s, c) = (-yaw).sin_cos();
                let rot = |v: Vec3| Vec3::new(c * v.x - s * v.y, s * v.x + c * v.y, v.z);
                let lo = rot(o - center);
                let ld = rot(*d);
                slab(&lo, &ld, &-half, &half)
            }
            Solid::Cylinder {
                base,
                radius,
                height,
            } => {
                let mut best: Option<f64> = None;
                let mut keep = |t: f64| {
                    if t > 0.0 && best.is_none_or(|b| t < b) {
                        best = Some(t);
                    }
                };
                if d.z != 0.0 {
                    let t = (base.z + height - o.z) / d.z;
                    let x = o.x + t * d.x - base.x;
                    let y = o.y + t * d.y - base.y;
                    if x * x + y * y <= radius * radius {
                        keep(t);
                    }
                }
                let ox = o.x - base.x;
                let oy = o.y - base.y;
                let a = d.x * d.x + d.y * d.y;
                if a > 0.0 {
                    let b = 2.0 * (ox * d.x + oy * d.y);
                    let cc = ox * ox + oy * oy - radius * radius;
                    let disc = b * b - 4.0 * a * cc;
                    if disc >= 0.0 {
                        let sq = disc.sqrt();
                        for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                            let z = o.z + t * d.z;
                            if z >= base.z && z <= base.z + height {
                                keep(t);
                            }
                        }
                    }
                }
                best
            }
        }
    }
}

fn scene_solids(state: &SceneState) -> Vec<Solid> {
    let g = &state.geometry;
    let h = g.box_size / 2.0;
    let mut solids: Vec<Solid> = state
        .boxes
        .iter()
        .map(|b| Solid::Oriented {
            center: b.pose.position,
            half: Vec3::new(h, h, h),
            yaw: b.pose.yaw,
        })
        .collect();
    for s in &state.surfaces {
        let (min_x, min_y, max_x, max_y) = s.footprint_aabb(g);
        let cx = (min_x + max_x) / 2.0;
        let cy = (min_y + max_y) / 2.0;
        let hx = (max_x - min_x) / 2.0;
        let hy = (max_y - min_y) / 2.0;
        if s.kind.is_pallet() {
            let d = g.pallet_deck_height / 2.0;
            solids.push(Solid::Oriented {
                center: Vec3::new(cx, cy, d),
                half: Vec3::new(hx, hy, d),
                yaw: 0.0,
            });
        } else {
            let t = g.shelf_plate_thickness / 2.0;
            for layer in 0..s.kind.layers() {
                let top = g.shelf_layer_heights[layer as usize];
                solids.push(Solid::Oriented {
                    center: Vec3::new(cx, cy, top - t),
                    half: Vec3::new(hx, hy, t),
                    yaw: 0.0,
                });
            }
        }
    }
    for d in &state.distractors {
        let (radius, height) = d.kind.hull();
        solids.push(Solid::Cylinder {
            base: d.pose.position,
            radius,
            height,
        });
    }
    solids
}

fn ray(intrinsics: &Intrinsics, pose: &CameraPose, u: f64, v: f64) -> Vec3 {
    pose.rotation * intrinsics.unproject(u, v, 1.0)
}

/// Renders per-pixel z-depth of the nearest surface along each pixel-center
/// ray: boxes, pallet decks, shelf plates, distractor hulls, and the floor
/// plane `z = 0`.
pub fn render_topdown_depth(
    state: &SceneState,
    intrinsics: &Intrinsics,
    pose: &CameraPose,
) -> DepthImage {
    let solids = scene_solids(state);
    let o = pose.translation;
    let mut depth = Vec::with_capacity((intrinsics.width * intrinsics.height) as usize);
    for j in 0..intrinsics.height {
        for i in 0..intrinsics.width {
            let d = ray(intrinsics, pose, i as f64, j as f64);
            // Camera-frame z of `d` is 1, so the ray parameter is the z-depth.
            let mut best = if d.z < 0.0 { -o.z / d.z } else { f64::INFINITY };
            for s in &solids {
                if let Some(t) = s.hit(&o, &d) {
                    best = best.min(t);
                }
            }
            depth.push(best);
        }
    }
    DepthImage {
        width: intrinsics.width,
        height: intrinsics.height,
        depth,
    }
}

/// World point seen at continuous pixel `(u, v)`, using the depth of the
/// nearest pixel.
pub fn backproject_2d(
    u: f64,
    v: f64,
    depth: &DepthImage,
    intrinsics: &Intrinsics,
    pose: &CameraPose,
) -> Result<Vec3, BackprojectError> {
    let (i, j) = intrinsics
        .pixel_index(u, v)
        .ok_or(BackprojectError::OutOfBounds { u, v })?;
    let z = depth.get(i, j);
    if !z.is_finite() || z <= 0.0 {
        return Err(BackprojectError::InvalidDepth { i, j });
    }
    Ok(pose.to_world(&intrinsics.unproject(u, v, z)))
}
