//! Labeled point clouds sampled from scene geometry.

use crate::rng;
use crate::warehouse::{EntityId, SceneState, Vec3, FLOOR_ID};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::io::{self, Read, Write};
use thiserror::Error;

pub const NO_COLOR: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
#[repr(u8)]
pub enum SemanticClass {
    Box = 0,
    PalletCell = 1,
    ShelfCell = 2,
    Distractor = 3,
    Floor = 4,
}

impl SemanticClass {
    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => SemanticClass::Box,
            1 => SemanticClass::PalletCell,
            2 => SemanticClass::ShelfCell,
            3 => SemanticClass::Distractor,
            4 => SemanticClass::Floor,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CloudConfig {
    /// Target spacing between samples on object surfaces.
    pub resolution: f64,
    /// Spacing for the floor plane, which only serves as background.
    pub floor_resolution: f64,
}

impl Default for CloudConfig {
    fn default() -> Self {
        CloudConfig {
            resolution: 0.05,
            floor_resolution: 0.25,
        }
    }
}

/// Struct-of-arrays point cloud. Index `i` of every column describes point `i`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledPointCloud {
    pub resolution: f64,
    pub points: Vec<[f32; 3]>,
    pub instance: Vec<EntityId>,
    pub semantic: Vec<SemanticClass>,
    pub color: Vec<u8>,
}

#[derive(Debug, Error)]
pub enum CloudIoError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad cloud header: {0}")]
    Header(String),
}

const MAGIC: &[u8; 4] = b"BBPC";
const FIELDS: [&str; 6] = [
    "x:f32",
    "y:f32",
    "z:f32",
    "instance:u32",
    "semantic:u8",
    "color:u8",
];
const ROW_BYTES: usize = 18;

#[derive(Serialize, Deserialize)]
struct Header {
    count: u64,
    resolution: f64,
    fields: Vec<String>,
}

impl LabeledPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> Vec3 {
        let p = self.points[i];
        Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64)
    }

    fn push(&mut self, p: Vec3, id: EntityId, class: SemanticClass, color: u8) {
        self.points.push([p.x as f32, p.y as f32, p.z as f32]);
        self.instance.push(id);
        self.semantic.push(class);
        self.color.push(color);
    }

    pub fn count_instance(&self, id: EntityId) -> usize {
        self.instance.iter().filter(|&&i| i == id).count()
    }

    /// Drops the instance, semantic and color columns' information, as an
    /// unprivileged observer would see the cloud.
    pub fn unlabeled(&self) -> LabeledPointCloud {
        let n = self.len();
        LabeledPointCloud {
            resolution: self.resolution,
            points: self.points.clone(),
            instance: vec![0; n],
            semantic: vec![SemanticClass::Floor; n],
            color: vec![NO_COLOR; n],
        }
    }

    /// Binary layout: `BBPC`, a little-endian `u32` header length, a JSON
    /// header `{count, resolution, fields}`, then `count` packed 18-byte rows
    /// `x y z (f32) instance (u32) semantic (u8) color (u8)`, all little-endian.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<(), CloudIoError> {
        let header = serde_json::to_vec(&Header {
            count: self.len() as u64,
            resolution: self.resolution,
            fields: FIELDS.iter().map(|s| s.to_string()).collect(),
        })
        .map_err(|e| CloudIoError::Header(e.to_string()))?;
        let mut buf = Vec::with_capacity(8 + header.len() + self.len() * ROW_BYTES);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header);
        for i in 0..self.len() {
            for c in self.points[i] {
                buf.extend_from_slice(&c.to_le_bytes());
            }
            buf.extend_from_slice(&self.instance[i].to_le_bytes());
            buf.push(self.semantic[i] as u8);
            buf.push(self.color[i]);
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self, CloudIoError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CloudIoError::Header("bad magic".into()));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut header)?;
        let header: Header =
            serde_json::from_slice(&header).map_err(|e| CloudIoError::Header(e.to_string()))?;
        if header.fields != FIELDS {
            return Err(CloudIoError::Header(format!("fields {:?}", header.fields)));
        }
        let n = header.count as usize;
        let mut rows = vec![0u8; n * ROW_BYTES];
        r.read_exact(&mut rows)?;
        let mut cloud = LabeledPointCloud {
            resolution: header.resolution,
            ..Default::default()
        };
        let f32_at = |b: &[u8], o: usize| f32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        for row in rows.chunks_exact(ROW_BYTES) {
            cloud
                .points
                .push([f32_at(row, 0), f32_at(row, 4), f32_at(row, 8)]);
            cloud
                .instance
                .push(u32::from_le_bytes(row[12..16].try_into().unwrap()));
            cloud.semantic.push(
                SemanticClass::from_code(row[16])
                    .ok_or_else(|| CloudIoError::Header(format!("semantic code {}", row[16])))?,
            );
            cloud.color.push(row[17]);
        }
        Ok(cloud)
    }

    /// Debug form: one JSON object per point.
    pub fn write_ndjson<W: Write>(&self, mut w: W) -> io::Result<()> {
        for i in 0..self.len() {
            let p = self.points[i];
            let line = serde_json::json!({
                "x": p[0], "y": p[1], "z": p[2],
                "instance": self.instance[i],
                "semantic": self.semantic[i],
                "color": self.color[i],
            });
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

fn divisions(extent: f64, resolution: f64) -> usize {
    ((extent / resolution).round() as usize).max(1)
}

fn rotate_z(v: Vec3, yaw: f64) -> Vec3 {
    let (s, c) = yaw.sin_cos();
    Vec3::new(c * v.x - s * v.y, s * v.x + c * v.y, v.z)
}

/// Samples the scene at `config` resolution. Each entity draws from its own
/// stream, so adding an entity never perturbs the samples of another.
///
/// Sampled: all six faces of every box; the deck patch of every empty cell;
/// the side and top of each distractor's cylindrical hull; the floor square.
pub fn synthesize_cloud(state: &SceneState, config: &CloudConfig, seed: u64) -> LabeledPointCloud {
    let res = config.resolution;
    let g = &state.geometry;
    let mut cloud = LabeledPointCloud {
        resolution: res,
        ..Default::default()
    };

    for b in &state.boxes {
        let mut r = rng::stream(seed, "cloud/entity", b.id as u64);
        let h = g.box_size / 2.0;
        let n = divisions(g.box_size, res);
        for axis in 0..3 {
            for sign in [-1.0, 1.0] {
                for j in 0..n {
                    for i in 0..n {
                        let a = -h + g.box_size * (i as f64 + r.random::<f64>()) / n as f64;
                        let bb = -h + g.box_size * (j as f64 + r.random::<f64>()) / n as f64;
                        let mut local = Vec3::zeros();
                        local[axis] = sign * h;
                        local[(axis + 1) % 3] = a;
                        local[(axis + 2) % 3] = bb;
                        let p = b.pose.position + rotate_z(local, b.pose.yaw);
                        cloud.push(p, b.id, SemanticClass::Box, b.color.code());
                    }
                }
            }
        }
    }

    for s in &state.surfaces {
        let (ex, ey) = g.cell_extent(s.kind);
        let (wx, wy) = s.yaw.extents(ex, ey);
        let class = if s.kind.is_pallet() {
            SemanticClass::PalletCell
        } else {
            SemanticClass::ShelfCell
        };
        for c in s.cells.iter().filter(|c| c.occupants.is_empty()) {
            let mut r = rng::stream(seed, "cloud/entity", c.id as u64);
            let nx = divisions(wx, res);
            let ny = divisions(wy, res);
            for j in 0..ny {
                for i in 0..nx {
                    let x = c.center.x - wx / 2.0 + wx * (i as f64 + r.random::<f64>()) / nx as f64;
                    let y = c.center.y - wy / 2.0 + wy * (j as f64 + r.random::<f64>()) / ny as f64;
                    cloud.push(Vec3::new(x, y, c.center.z), c.id, class, NO_COLOR);
                }
            }
        }
    }

    for d in &state.distractors {
        let mut r = rng::stream(seed, "cloud/entity", d.id as u64);
        let (radius, height) = d.kind.hull();
        let c = d.pose.position;
        let nt = divisions(TAU * radius, res).max(8);
        let nz = divisions(height, res);
        for k in 0..nz {
            for i in 0..nt {
                let t = TAU * (i as f64 + r.random::<f64>()) / nt as f64 + d.pose.yaw;
                let z = height * (k as f64 + r.random::<f64>()) / nz as f64;
                let p = c + Vec3::new(radius * t.cos(), radius * t.sin(), z);
                cloud.push(p, d.id, SemanticClass::Distractor, NO_COLOR);
            }
        }
        let n = divisions(2.0 * radius, res);
        for j in 0..n {
            for i in 0..n {
                let x = -radius + 2.0 * radius * (i as f64 + r.random::<f64>()) / n as f64;
                let y = -radius + 2.0 * radius * (j as f64 + r.random::<f64>()) / n as f64;
                if x * x + y * y <= radius * radius {
                    cloud.push(
                        c + Vec3::new(x, y, height),
                        d.id,
                        SemanticClass::Distractor,
                        NO_COLOR,
                    );
                }
            }
        }
    }

    let mut r = rng::stream(seed, "cloud/entity", FLOOR_ID as u64);
    let f = g.floor_half_extent;
    let n = divisions(2.0 * f, config.floor_resolution);
    for j in 0..n {
        for i in 0..n {
            let x = -f + 2.0 * f * (i as f64 + r.random::<f64>()) / n as f64;
            let y = -f + 2.0 * f * (j as f64 + r.random::<f64>()) / n as f64;
            cloud.push(
                Vec3::new(x, y, 0.0),
                FLOOR_ID,
                SemanticClass::Floor,
                NO_COLOR,
            );
        }
    }
    cloud
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warehouse::fixtures::{place, scene};
    use crate::warehouse::{BoxColor, SurfaceKind};

    #[test]
    fn single_box_gets_six_hundred_points() {
        let s = scene(&[], &[BoxColor::Red]);
        let cloud = synthesize_cloud(&s, &CloudConfig::default(), 1);
        let id = s.boxes[0].id;
        assert_eq!(cloud.count_instance(id), 600);
        let c = s.boxes[0].pose.position;
        for i in (0..cloud.len()).filter(|&i| cloud.instance[i] == id) {
            let p = cloud.point(i) - c;
            let local = rotate_z(p, -s.boxes[0].pose.yaw);
            let m = local.x.abs().max(local.y.abs()).max(local.z.abs());
            assert!(
                (m - 0.25).abs() < 1e-6,
                "point off the box surface: {local:?}"
            );
        }
    }

    #[test]
    fn empty_scene_is_floor_only() {
        let s = scene(&[], &[]);
        let cloud = synthesize_cloud(&s, &CloudConfig::default(), 3);
        assert!(!cloud.is_empty());
        assert!(cloud.instance.iter().all(|&i| i == FLOOR_ID));
        assert!(cloud.semantic.iter().all(|&c| c == SemanticClass::Floor));
    }

    #[test]
    fn cell_patches_only_for_empty_cells() {
        let s = scene(
            &[SurfaceKind::PalletSmall, SurfaceKind::ShelfLarge],
            &[BoxColor::Blue],
        );
        let st = place(&s, s.boxes[0].id, s.surfaces[0].id, 0);
        let cloud = synthesize_cloud(&st, &CloudConfig::default(), 9);
        assert_eq!(cloud.count_instance(st.surfaces[0].cells[0].id), 0);
        assert_eq!(cloud.count_instance(st.surfaces[0].cells[1].id), 121);
        assert_eq!(cloud.count_instance(st.surfaces[1].cells[4].id), 11 * 12);
        let color = cloud.color[cloud
            .instance
            .iter()
            .position(|&i| i == s.boxes[0].id)
            .unwrap()];
        assert_eq!(color, BoxColor::Blue.code());
    }

    #[test]
    fn seeds_determine_cloud() {
        let s = scene(
            &[SurfaceKind::PalletLarge],
            &[BoxColor::Red, BoxColor::Yellow],
        );
        let a = synthesize_cloud(&s, &CloudConfig::default(), 5);
        assert_eq!(a, synthesize_cloud(&s, &CloudConfig::default(), 5));
        assert_ne!(
            a.points,
            synthesize_cloud(&s, &CloudConfig::default(), 6).points
        );
    }

    #[test]
    fn binary_round_trip() {
        let s = scene(&[SurfaceKind::ShelfSmall], &[BoxColor::Red]);
        let a = synthesize_cloud(&s, &CloudConfig::default(), 5);
        let mut buf = Vec::new();
        a.write_binary(&mut buf).unwrap();
        let b = LabeledPointCloud::read_binary(buf.as_slice()).unwrap();
        assert_eq!(a, b);
        buf[0] = b'X';
        assert!(LabeledPointCloud::read_binary(buf.as_slice()).is_err());
    }
}
