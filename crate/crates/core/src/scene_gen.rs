//! Seeded procedural construction of initial scenes.
//!
//! Draw order (each list is its own [`rng`](crate::rng) stream under the
//! config seed):
//!
//! 1. `scene/kinds`: one weighted size draw per pallet, then per shelf.
//! 2. `scene/surfaces`: per surface, yaw (fair coin) then center x, y;
//!    repeated until the footprint keeps the clearance to earlier surfaces.
//! 3. `scene/colors`: one uniform color per box.
//! 4. `scene/distractor-kinds`: one uniform kind per distractor.
//! 5. `scene/objects`: center x, y per box, then per distractor, rejected
//!    until spaced from every earlier object.
//! 6. `scene/yaws`: one uniform yaw in `[0, 2pi)` per box, then per
//!    distractor.
//!
//! Ids are assigned in order: each surface followed by its cells, then
//! boxes, then distractors. Positions are quantized to 1e-6 m so that
//! canonical snapshots are exact.

use crate::perception::camera::{CameraPose, CameraView, Intrinsics};
use crate::rng;
use crate::warehouse::{
    BoxColor, BoxItem, BoxLocation, CellSlot, Distractor, DistractorKind, EntityId, Geometry, Pose,
    SceneState, Surface, SurfaceKind, SurfaceYaw, Vec3,
};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use thiserror::Error;

pub const MAX_BOXES: u32 = 30;
pub const MAX_PALLETS: u32 = 3;
pub const MAX_SHELVES: u32 = 2;
pub const MAX_DISTRACTORS: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min_x: f64,
    pub max_x: f64,
    pub min_y: f64,
    pub max_y: f64,
}

impl Rect {
    fn sample_inside<R: Rng>(&self, rng: &mut R, half_x: f64, half_y: f64) -> Option<(f64, f64)> {
        let (lo_x, hi_x) = (self.min_x + half_x, self.max_x - half_x);
        let (lo_y, hi_y) = (self.min_y + half_y, self.max_y - half_y);
        if lo_x > hi_x || lo_y > hi_y {
            return None;
        }
        let x = if lo_x == hi_x {
            lo_x
        } else {
            rng.random_range(lo_x..hi_x)
        };
        let y = if lo_y == hi_y {
            lo_y
        } else {
            rng.random_range(lo_y..hi_y)
        };
        Some((quantize(x), quantize(y)))
    }
}

/// Relative weights of small vs large surfaces, per surface family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeMix {
    pub pallet_small: f64,
    pub pallet_large: f64,
    pub shelf_small: f64,
    pub shelf_large: f64,
}

impl Default for SizeMix {
    fn default() -> Self {
        SizeMix {
            pallet_small: 1.0,
            pallet_large: 1.0,
            shelf_small: 1.0,
            shelf_large: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub seed: u64,
    pub num_boxes: u32,
    pub num_pallets: u32,
    pub num_shelves: u32,
    pub num_distractors: u32,
    pub size_mix: SizeMix,
    /// Explicit surface kinds; overrides the counts and the size mix.
    pub surface_kinds: Option<Vec<SurfaceKind>>,
    pub surface_region: Rect,
    pub box_region: Rect,
    /// Reject configurations whose cells cannot hold every box.
    pub require_capacity: bool,
    pub surface_clearance: f64,
    pub object_spacing: f64,
    pub max_attempts: u32,
    pub geometry: Geometry,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            seed: 0,
            num_boxes: 10,
            num_pallets: 2,
            num_shelves: 1,
            num_distractors: 2,
            size_mix: SizeMix::default(),
            surface_kinds: None,
            surface_region: Rect {
                min_x: -6.0,
                max_x: 0.0,
                min_y: -6.0,
                max_y: 6.0,
            },
            box_region: Rect {
                min_x: 0.0,
                max_x: 6.0,
                min_y: -6.0,
                max_y: 6.0,
            },
            require_capacity: true,
            surface_clearance: 0.3,
            object_spacing: 0.6,
            max_attempts: 10_000,
            geometry: Geometry::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SceneGenError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error("capacity {capacity} cannot hold {boxes} boxes")]
    CapacityInfeasible { capacity: u32, boxes: u32 },
    #[error("placement rejection sampling exceeded {0} attempts")]
    PlacementExhausted(u32),
}

fn quantize(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

/// Builds a surface with its cells; cell ids are taken from `next_id`.
pub fn build_surface(
    geometry: &Geometry,
    id: EntityId,
    kind: SurfaceKind,
    position: Vec3,
    yaw: SurfaceYaw,
    next_id: &mut EntityId,
) -> Surface {
    let cells = geometry
        .cell_layout(kind)
        .into_iter()
        .map(|(index, layer, lx, ly, z)| {
            let (dx, dy) = yaw.rotate(lx, ly);
            let cid = *next_id;
            *next_id += 1;
            CellSlot {
                id: cid,
                surface: id,
                index,
                layer,
                center: Vec3::new(position.x + dx, position.y + dy, z),
                occupants: Vec::new(),
            }
        })
        .collect();
    Surface {
        id,
        kind,
        position,
        yaw,
        cells,
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SceneGenError> {
        let bad = |m: String| Err(SceneGenError::InvalidConfig(m));
        if self.num_boxes == 0 || self.num_boxes > MAX_BOXES {
            return bad(format!(
                "num_boxes {} outside [1, {MAX_BOXES}]",
                self.num_boxes
            ));
        }
        if self.num_distractors > MAX_DISTRACTORS {
            return bad(format!(
                "num_distractors {} > {MAX_DISTRACTORS}",
                self.num_distractors
            ));
        }
        let (pallets, shelves) = match &self.surface_kinds {
            Some(kinds) => {
                let p = kinds.iter().filter(|k| k.is_pallet()).count() as u32;
                (p, kinds.len() as u32 - p)
            }
            None => (self.num_pallets, self.num_shelves),
        };
        if pallets > MAX_PALLETS || shelves > MAX_SHELVES {
            return bad(format!(
                "{pallets} pallets / {shelves} shelves exceeds 3 / 2"
            ));
        }
        let weights = [
            self.size_mix.pallet_small,
            self.size_mix.pallet_large,
            self.size_mix.shelf_small,
            self.size_mix.shelf_large,
        ];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0)
            || (pallets > 0 && self.size_mix.pallet_small + self.size_mix.pallet_large <= 0.0)
            || (shelves > 0 && self.size_mix.shelf_small + self.size_mix.shelf_large <= 0.0)
        {
            return bad("size_mix weights must be non-negative with a positive sum".into());
        }
        let h = self.geometry.floor_half_extent;
        for (name, r) in [
            ("surface_region", &self.surface_region),
            ("box_region", &self.box_region),
        ] {
            if !(r.min_x < r.max_x && r.min_y < r.max_y)
                || r.min_x < -h
                || r.max_x > h
                || r.min_y < -h
                || r.max_y > h
            {
                return bad(format!(
                    "{name} must be a nonempty rectangle inside the floor"
                ));
            }
        }
        Ok(())
    }

    fn surface_kinds<R: Rng>(&self, rng: &mut R) -> Vec<SurfaceKind> {
        if let Some(kinds) = &self.surface_kinds {
            return kinds.clone();
        }
        let mix = &self.size_mix;
        let mut kinds = Vec::new();
        for _ in 0..self.num_pallets {
            let p_small = mix.pallet_small / (mix.pallet_small + mix.pallet_large);
            kinds.push(if rng.random::<f64>() < p_small {
                SurfaceKind::PalletSmall
            } else {
                SurfaceKind::PalletLarge
            });
        }
        for _ in 0..self.num_shelves {
            let p_small = mix.shelf_small / (mix.shelf_small + mix.shelf_large);
            kinds.push(if rng.random::<f64>() < p_small {
                SurfaceKind::ShelfSmall
            } else {
                SurfaceKind::ShelfLarge
            });
        }
        kinds
    }
}

/// Total capacity of the given surfaces under the full stacking limits.
pub fn full_capacity(geometry: &Geometry, kinds: &[SurfaceKind]) -> u32 {
    kinds
        .iter()
        .map(|&k| k.cell_count() * geometry.max_height(k))
        .sum()
}

/// Generates the initial scene for `config`. All boxes start unplaced.
pub fn generate_scene(config: &SceneConfig) -> Result<SceneState, SceneGenError> {
    config.validate()?;
    let g = &config.geometry;
    let kinds = config.surface_kinds(&mut rng::stream(config.seed, "scene/kinds", 0));
    if config.require_capacity {
        let capacity = full_capacity(g, &kinds);
        if capacity < config.num_boxes {
            return Err(SceneGenError::CapacityInfeasible {
                capacity,
                boxes: config.num_boxes,
            });
        }
    }

    let mut attempts = 0u32;
    let mut next_id: EntityId = 1;
    let mut surfaces: Vec<Surface> = Vec::with_capacity(kinds.len());
    let mut footprints: Vec<(f64, f64, f64, f64)> = Vec::new();
    let mut srng = rng::stream(config.seed, "scene/surfaces", 0);
    for &kind in &kinds {
        let (lx, ly) = g.footprint(kind);
        loop {
            attempts += 1;
            if attempts > config.max_attempts {
                return Err(SceneGenError::PlacementExhausted(config.max_attempts));
            }
            let yaw = if srng.random_bool(0.5) {
                SurfaceYaw::Quarter
            } else {
                SurfaceYaw::Zero
            };
            let (wx, wy) = yaw.extents(lx, ly);
            let Some((x, y)) = config
                .surface_region
                .sample_inside(&mut srng, wx / 2.0, wy / 2.0)
            else {
                return Err(SceneGenError::InvalidConfig(format!(
                    "surface region cannot fit a {kind:?}"
                )));
            };
            let fp = (x - wx / 2.0, y - wy / 2.0, x + wx / 2.0, y + wy / 2.0);
            let c = config.surface_clearance;
            let clear = footprints
                .iter()
                .all(|o| fp.0 >= o.2 + c || o.0 >= fp.2 + c || fp.1 >= o.3 + c || o.1 >= fp.3 + c);
            if clear {
                footprints.push(fp);
                let id = next_id;
                next_id += 1;
                surfaces.push(build_surface(
                    g,
                    id,
                    kind,
                    Vec3::new(x, y, 0.0),
                    yaw,
                    &mut next_id,
                ));
                break;
            }
        }
    }

    let mut crng = rng::stream(config.seed, "scene/colors", 0);
    let colors: Vec<BoxColor> = (0..config.num_boxes)
        .map(|_| BoxColor::ALL[crng.random_range(0..3)])
        .collect();
    let mut krng = rng::stream(config.seed, "scene/distractor-kinds", 0);
    let dkinds: Vec<DistractorKind> = (0..config.num_distractors)
        .map(|_| DistractorKind::ALL[krng.random_range(0..DistractorKind::ALL.len())])
        .collect();

    // Bounding radius in the plane for spacing; boxes may take any yaw.
    let box_radius = g.box_size * std::f64::consts::FRAC_1_SQRT_2;
    let radii: Vec<f64> = std::iter::repeat_n(box_radius, config.num_boxes as usize)
        .chain(dkinds.iter().map(|k| k.hull().0))
        .collect();
    let mut orng = rng::stream(config.seed, "scene/objects", 0);
    let mut centers: Vec<(f64, f64)> = Vec::with_capacity(radii.len());
    for &r in &radii {
        loop {
            attempts += 1;
            if attempts > config.max_attempts {
                return Err(SceneGenError::PlacementExhausted(config.max_attempts));
            }
            let Some((x, y)) = config.box_region.sample_inside(&mut orng, r, r) else {
                return Err(SceneGenError::InvalidConfig("box region too small".into()));
            };
            let ok = centers.iter().zip(&radii).all(|(&(ox, oy), &orad)| {
                let min = config.object_spacing.max(r + orad);
                (x - ox).powi(2) + (y - oy).powi(2) >= min * min
            });
            if ok {
                centers.push((x, y));
                break;
            }
        }
    }

    let mut yrng = rng::stream(config.seed, "scene/yaws", 0);
    let mut yaw = || quantize(yrng.random_range(0.0..TAU));
    let boxes: Vec<BoxItem> = colors
        .iter()
        .zip(&centers)
        .map(|(&color, &(x, y))| {
            let id = next_id;
            next_id += 1;
            BoxItem {
                id,
                color,
                pose: Pose {
                    position: Vec3::new(x, y, g.box_size / 2.0),
                    yaw: yaw(),
                },
                location: BoxLocation::UnplacedFloor,
            }
        })
        .collect();
    let distractors: Vec<Distractor> = dkinds
        .iter()
        .zip(&centers[config.num_boxes as usize..])
        .map(|(&kind, &(x, y))| {
            let id = next_id;
            next_id += 1;
            Distractor {
                id,
                kind,
                pose: Pose {
                    position: Vec3::new(x, y, 0.0),
                    yaw: yaw(),
                },
            }
        })
        .collect();

    Ok(SceneState {
        geometry: g.clone(),
        boxes,
        surfaces,
        distractors,
        step: 0,
        last_placed: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigConfig {
    pub count: u32,
    pub radius: f64,
    pub height: f64,
    pub image_size: u32,
    pub focal: f64,
}

impl Default for RigConfig {
    fn default() -> Self {
        RigConfig {
            count: 30,
            radius: 5.0,
            height: 5.0,
            image_size: 512,
            focal: 256.0,
        }
    }
}

/// Cameras evenly spaced on a horizontal circle, all aimed at the origin.
pub fn camera_rig(config: &RigConfig) -> Vec<CameraView> {
    let intrinsics = Intrinsics::centered(config.image_size, config.focal);
    (0..config.count)
        .map(|i| {
            let angle = TAU * i as f64 / config.count as f64;
            let eye = Vec3::new(
                config.radius * angle.cos(),
                config.radius * angle.sin(),
                config.height,
            );
            let pose = CameraPose::look_at(eye, Vec3::zeros(), Vec3::new(0.0, 0.0, 1.0));
            CameraView {
                intrinsics,
                camera_to_world: pose.to_matrix4(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canon;

    fn minimal() -> SceneConfig {
        SceneConfig {
            seed: 1,
            num_boxes: 1,
            num_distractors: 0,
            surface_kinds: Some(vec![SurfaceKind::PalletSmall]),
            ..SceneConfig::default()
        }
    }

    #[test]
    fn minimal_scene() {
        let s = generate_scene(&minimal()).unwrap();
        assert_eq!(s.boxes.len(), 1);
        assert_eq!(s.unplaced_boxes().len(), 1);
        assert_eq!(s.free_cells().len(), 4);
        s.check_invariants().unwrap();
    }

    #[test]
    fn same_seed_same_bytes() {
        let c = SceneConfig {
            seed: 42,
            num_boxes: 25,
            num_pallets: 3,
            num_shelves: 2,
            num_distractors: 4,
            ..SceneConfig::default()
        };
        let a = canon::to_string(&generate_scene(&c).unwrap()).unwrap();
        let b = canon::to_string(&generate_scene(&c).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn thirty_boxes_on_one_small_pallet_is_infeasible() {
        let c = SceneConfig {
            num_boxes: 30,
            ..minimal()
        };
        // 4 cells x 3 levels = 12 < 30
        assert_eq!(
            generate_scene(&c),
            Err(SceneGenError::CapacityInfeasible {
                capacity: 12,
                boxes: 30
            })
        );
    }

    #[test]
    fn bad_counts_are_rejected() {
        let c = SceneConfig {
            num_pallets: 4,
            ..SceneConfig::default()
        };
        assert!(matches!(
            generate_scene(&c),
            Err(SceneGenError::InvalidConfig(_))
        ));
        let c = SceneConfig {
            num_boxes: 0,
            ..SceneConfig::default()
        };
        assert!(matches!(
            generate_scene(&c),
            Err(SceneGenError::InvalidConfig(_))
        ));
    }

    #[test]
    fn tiny_budget_exhausts() {
        let c = SceneConfig {
            num_boxes: 30,
            num_pallets: 3,
            num_shelves: 2,
            max_attempts: 3,
            ..SceneConfig::default()
        };
        assert_eq!(
            generate_scene(&c),
            Err(SceneGenError::PlacementExhausted(3))
        );
    }

    #[test]
    fn rig_positions() {
        let rig = camera_rig(&RigConfig::default());
        assert_eq!(rig.len(), 30);
        let p0 = rig[0].pose();
        assert!((p0.translation - Vec3::new(5.0, 0.0, 5.0)).norm() < 1e-12);
        // optical axis passes through the origin
        let to_origin = (-p0.translation).normalize();
        assert!((p0.optical_axis() - to_origin).norm() < 1e-12);
        for v in &rig {
            let t = v.pose().translation;
            assert!(((t.x * t.x + t.y * t.y).sqrt() - 5.0).abs() < 1e-9);
            assert!((t.z - 5.0).abs() < 1e-12);
        }
        // consecutive cameras are 360 / 30 = 12 degrees apart
        let a = rig[3].pose().translation;
        let b = rig[4].pose().translation;
        let d = (b.y.atan2(b.x) - a.y.atan2(a.x)).to_degrees();
        assert!((d - 12.0).abs() < 1e-9);
    }
}
