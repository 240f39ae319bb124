//! Ground-truth warehouse state and the pick-and-place transition.
//!
//! Boxes sit either on the floor (unplaced) or in a column on a placement
//! cell. Pallet cells hold columns up to three boxes high; shelf cells hold a
//! single box per layer. Every entity carries a scene-unique id, which is
//! also its instance id in synthesized point clouds. Id `0` is the floor.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::FRAC_PI_2;
use thiserror::Error;

pub type EntityId = u32;
pub type Vec3 = Vector3<f64>;

pub const FLOOR_ID: EntityId = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoxColor {
    Red,
    Blue,
    Yellow,
}

impl BoxColor {
    pub const ALL: [BoxColor; 3] = [BoxColor::Red, BoxColor::Blue, BoxColor::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            BoxColor::Red => "red",
            BoxColor::Blue => "blue",
            BoxColor::Yellow => "yellow",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            BoxColor::Red => 0,
            BoxColor::Blue => 1,
            BoxColor::Yellow => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SizeClass {
    Small,
    Large,
}

impl SizeClass {
    pub fn name(self) -> &'static str {
        match self {
            SizeClass::Small => "small",
            SizeClass::Large => "large",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SurfaceKind {
    PalletSmall,
    PalletLarge,
    ShelfSmall,
    ShelfLarge,
}

impl SurfaceKind {
    pub const ALL: [SurfaceKind; 4] = [
        SurfaceKind::PalletSmall,
        SurfaceKind::PalletLarge,
        SurfaceKind::ShelfSmall,
        SurfaceKind::ShelfLarge,
    ];

    pub fn is_pallet(self) -> bool {
        matches!(self, SurfaceKind::PalletSmall | SurfaceKind::PalletLarge)
    }

    pub fn is_shelf(self) -> bool {
        !self.is_pallet()
    }

    pub fn size_class(self) -> SizeClass {
        match self {
            SurfaceKind::PalletSmall | SurfaceKind::ShelfSmall => SizeClass::Small,
            SurfaceKind::PalletLarge | SurfaceKind::ShelfLarge => SizeClass::Large,
        }
    }

    /// Cells along the surface's local x and y axes, per layer.
    pub fn grid(self) -> (u32, u32) {
        match self {
            SurfaceKind::PalletSmall => (2, 2),
            SurfaceKind::PalletLarge => (3, 2),
            SurfaceKind::ShelfSmall => (2, 1),
            SurfaceKind::ShelfLarge => (3, 1),
        }
    }

    pub fn layers(self) -> u32 {
        if self.is_pallet() {
            1
        } else {
            2
        }
    }

    pub fn cell_count(self) -> u32 {
        let (nx, ny) = self.grid();
        nx * ny * self.layers()
    }
}

/// Surface yaw is restricted to a quarter-turn so that rotated cell grids
/// stay exactly axis-aligned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SurfaceYaw {
    Zero,
    Quarter,
}

impl SurfaceYaw {
    pub fn radians(self) -> f64 {
        match self {
            SurfaceYaw::Zero => 0.0,
            SurfaceYaw::Quarter => FRAC_PI_2,
        }
    }

    /// Rotates a local planar offset into world axes.
    pub fn rotate(self, x: f64, y: f64) -> (f64, f64) {
        match self {
            SurfaceYaw::Zero => (x, y),
            SurfaceYaw::Quarter => (-y, x),
        }
    }

    /// Swaps local extents into world-axis extents.
    pub fn extents(self, lx: f64, ly: f64) -> (f64, f64) {
        match self {
            SurfaceYaw::Zero => (lx, ly),
            SurfaceYaw::Quarter => (ly, lx),
        }
    }
}

/// Physical dimensions shared by every scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub box_size: f64,
    pub cell_pitch: f64,
    pub pallet_deck_height: f64,
    pub shelf_layer_heights: [f64; 2],
    pub shelf_depth: f64,
    pub shelf_plate_thickness: f64,
    pub pallet_max_height: u32,
    pub shelf_max_height: u32,
    pub floor_half_extent: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry {
            box_size: 0.5,
            cell_pitch: 0.55,
            pallet_deck_height: 0.15,
            shelf_layer_heights: [0.10, 0.80],
            shelf_depth: 0.60,
            shelf_plate_thickness: 0.02,
            pallet_max_height: 3,
            shelf_max_height: 1,
            floor_half_extent: 6.0,
        }
    }
}

impl Geometry {
    pub fn max_height(&self, kind: SurfaceKind) -> u32 {
        if kind.is_pallet() {
            self.pallet_max_height
        } else {
            self.shelf_max_height
        }
    }

    /// Footprint extents in the surface's local frame.
    pub fn footprint(&self, kind: SurfaceKind) -> (f64, f64) {
        let (nx, ny) = kind.grid();
        let lx = nx as f64 * self.cell_pitch;
        let ly = if kind.is_pallet() {
            ny as f64 * self.cell_pitch
        } else {
            self.shelf_depth
        };
        (lx, ly)
    }

    /// Extent of one cell's support patch in local axes.
    pub fn cell_extent(&self, kind: SurfaceKind) -> (f64, f64) {
        if kind.is_pallet() {
            (self.cell_pitch, self.cell_pitch)
        } else {
            (self.cell_pitch, self.shelf_depth)
        }
    }

    /// `(index, layer, local x, local y, support z)` for each cell.
    pub fn cell_layout(&self, kind: SurfaceKind) -> Vec<(u32, u32, f64, f64, f64)> {
        let (nx, ny) = kind.grid();
        let mut out = Vec::with_capacity(kind.cell_count() as usize);
        let mut index = 0;
        for layer in 0..kind.layers() {
            let z = if kind.is_pallet() {
                self.pallet_deck_height
            } else {
                self.shelf_layer_heights[layer as usize]
            };
            for row in 0..ny {
                for col in 0..nx {
                    let x = (col as f64 - (nx as f64 - 1.0) / 2.0) * self.cell_pitch;
                    let y = (row as f64 - (ny as f64 - 1.0) / 2.0) * self.cell_pitch;
                    out.push((index, layer, x, y, z));
                    index += 1;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec3,
    pub yaw: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellRef {
    pub surface: EntityId,
    pub cell: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BoxLocation {
    UnplacedFloor,
    Cell {
        surface: EntityId,
        cell: u32,
        level: u32,
    },
    Held,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxItem {
    pub id: EntityId,
    pub color: BoxColor,
    pub pose: Pose,
    pub location: BoxLocation,
}

impl BoxItem {
    pub fn is_placed(&self) -> bool {
        matches!(self.location, BoxLocation::Cell { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSlot {
    pub id: EntityId,
    pub surface: EntityId,
    pub index: u32,
    pub layer: u32,
    /// Support point: cell center at the height boxes rest on.
    pub center: Vec3,
    /// Bottom to top.
    pub occupants: Vec<EntityId>,
}

impl CellSlot {
    pub fn height(&self) -> u32 {
        self.occupants.len() as u32
    }

    pub fn top(&self) -> Option<EntityId> {
        self.occupants.last().copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    pub id: EntityId,
    pub kind: SurfaceKind,
    /// Footprint center on the floor.
    pub position: Vec3,
    pub yaw: SurfaceYaw,
    pub cells: Vec<CellSlot>,
}

impl Surface {
    /// World-axis footprint as `(min_x, min_y, max_x, max_y)`.
    pub fn footprint_aabb(&self, geometry: &Geometry) -> (f64, f64, f64, f64) {
        let (lx, ly) = geometry.footprint(self.kind);
        let (wx, wy) = self.yaw.extents(lx, ly);
        (
            self.position.x - wx / 2.0,
            self.position.y - wy / 2.0,
            self.position.x + wx / 2.0,
            self.position.y + wy / 2.0,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistractorKind {
    BarrelSteel,
    BarrelBlue,
    BarrelRed,
    BarrelPlastic,
    BarrelDrum,
    TrafficCone,
}

impl DistractorKind {
    pub const ALL: [DistractorKind; 6] = [
        DistractorKind::BarrelSteel,
        DistractorKind::BarrelBlue,
        DistractorKind::BarrelRed,
        DistractorKind::BarrelPlastic,
        DistractorKind::BarrelDrum,
        DistractorKind::TrafficCone,
    ];

    /// Upright cylindrical hull `(radius, height)`.
    pub fn hull(self) -> (f64, f64) {
        match self {
            DistractorKind::BarrelSteel => (0.29, 0.88),
            DistractorKind::BarrelBlue => (0.29, 0.88),
            DistractorKind::BarrelRed => (0.28, 0.85),
            DistractorKind::BarrelPlastic => (0.30, 0.95),
            DistractorKind::BarrelDrum => (0.25, 0.70),
            DistractorKind::TrafficCone => (0.18, 0.70),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distractor {
    pub id: EntityId,
    pub kind: DistractorKind,
    pub pose: Pose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PutdownSlot {
    FreeCell {
        surface: EntityId,
        cell: u32,
        layer: u32,
    },
    StackTop {
        base: EntityId,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    pub pickup: EntityId,
    pub putdown: PutdownSlot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExecutionMode {
    SnapToTarget,
    FreeForm,
}

impl ExecutionMode {
    pub fn name(self) -> &'static str {
        match self {
            ExecutionMode::SnapToTarget => "snap-to-target",
            ExecutionMode::FreeForm => "free-form",
        }
    }
}

/// What an entity id refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntityKind {
    Floor,
    Surface,
    Cell(CellRef),
    Box,
    Distractor,
}

/// A resolved place where the next box of a column would go.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlotView {
    pub surface: EntityId,
    pub surface_kind: SurfaceKind,
    pub cell: u32,
    pub cell_id: EntityId,
    pub layer: u32,
    /// Insertion level, equal to the current column height.
    pub level: u32,
    pub max_height: u32,
    /// Center of a box inserted at `level`.
    pub insertion: Vec3,
    pub putdown: PutdownSlot,
}

impl SlotView {
    pub fn cell_ref(&self) -> CellRef {
        CellRef {
            surface: self.surface,
            cell: self.cell,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SceneError {
    #[error("unknown box {0}")]
    UnknownBox(EntityId),
    #[error("unknown cell {cell} on surface {surface}")]
    UnknownCell { surface: EntityId, cell: u32 },
    #[error("cell {cell} on surface {surface} is on layer {actual}, not {requested}")]
    LayerMismatch {
        surface: EntityId,
        cell: u32,
        requested: u32,
        actual: u32,
    },
    #[error("box {0} is not accessible")]
    PickupInaccessible(EntityId),
    #[error("cell {cell} on surface {surface} is full")]
    SlotFull { surface: EntityId, cell: u32 },
    #[error("cell {cell} on surface {surface} is not empty")]
    SlotOccupied { surface: EntityId, cell: u32 },
    #[error("box {0} is not the top of a placed column")]
    NotStackTop(EntityId),
    #[error("box {0} cannot be placed on itself")]
    PickupEqualsSupport(EntityId),
    #[error("free-form execution needs a putdown point")]
    MissingFreeformPoint,
    #[error("free-form point ({x:.3}, {y:.3}) is outside the snap tolerance of every cell")]
    FreeformOutOfTolerance { x: f64, y: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub geometry: Geometry,
    pub boxes: Vec<BoxItem>,
    pub surfaces: Vec<Surface>,
    pub distractors: Vec<Distractor>,
    pub step: u32,
    /// Column extended by the most recent placement.
    pub last_placed: Option<CellRef>,
}

impl SceneState {
    pub fn box_item(&self, id: EntityId) -> Option<&BoxItem> {
        self.boxes
            .binary_search_by_key(&id, |b| b.id)
            .ok()
            .map(|i| &self.boxes[i])
    }

    pub fn surface(&self, id: EntityId) -> Option<&Surface> {
        self.surfaces
            .binary_search_by_key(&id, |s| s.id)
            .ok()
            .map(|i| &self.surfaces[i])
    }

    pub fn cell(&self, r: CellRef) -> Option<&CellSlot> {
        self.surface(r.surface)?.cells.get(r.cell as usize)
    }

    pub fn entity_kind(&self, id: EntityId) -> Option<EntityKind> {
        if id == FLOOR_ID {
            return Some(EntityKind::Floor);
        }
        if self.box_item(id).is_some() {
            return Some(EntityKind::Box);
        }
        for s in &self.surfaces {
            if s.id == id {
                return Some(EntityKind::Surface);
            }
            if let Some(c) = s.cells.iter().find(|c| c.id == id) {
                return Some(EntityKind::Cell(CellRef {
                    surface: s.id,
                    cell: c.index,
                }));
            }
        }
        if self.distractors.iter().any(|d| d.id == id) {
            return Some(EntityKind::Distractor);
        }
        None
    }

    pub fn max_height(&self, surface: &Surface) -> u32 {
        self.geometry.max_height(surface.kind)
    }

    fn insertion_point(&self, cell: &CellSlot, level: u32) -> Vec3 {
        cell.center + Vec3::new(0.0, 0.0, (level as f64 + 0.5) * self.geometry.box_size)
    }

    fn slot_view(&self, surface: &Surface, cell: &CellSlot) -> SlotView {
        let level = cell.height();
        let putdown = match cell.top() {
            None => PutdownSlot::FreeCell {
                surface: surface.id,
                cell: cell.index,
                layer: cell.layer,
            },
            Some(base) => PutdownSlot::StackTop { base },
        };
        SlotView {
            surface: surface.id,
            surface_kind: surface.kind,
            cell: cell.index,
            cell_id: cell.id,
            layer: cell.layer,
            level,
            max_height: self.max_height(surface),
            insertion: self.insertion_point(cell, level),
            putdown,
        }
    }

    /// Resolves a putdown slot against the current columns. Fails when the
    /// slot does not name the current insertion point of a non-full column.
    pub fn resolve_slot(&self, putdown: &PutdownSlot) -> Result<SlotView, SceneError> {
        let (surface, cell) = match *putdown {
            PutdownSlot::FreeCell {
                surface,
                cell,
                layer,
            } => {
                let s = self
                    .surface(surface)
                    .ok_or(SceneError::UnknownCell { surface, cell })?;
                let c = s
                    .cells
                    .get(cell as usize)
                    .ok_or(SceneError::UnknownCell { surface, cell })?;
                if c.layer != layer {
                    return Err(SceneError::LayerMismatch {
                        surface,
                        cell,
                        requested: layer,
                        actual: c.layer,
                    });
                }
                if !c.occupants.is_empty() {
                    return Err(SceneError::SlotOccupied { surface, cell });
                }
                (s, c)
            }
            PutdownSlot::StackTop { base } => {
                let b = self.box_item(base).ok_or(SceneError::UnknownBox(base))?;
                let BoxLocation::Cell { surface, cell, .. } = b.location else {
                    return Err(SceneError::NotStackTop(base));
                };
                let s = self
                    .surface(surface)
                    .ok_or(SceneError::UnknownCell { surface, cell })?;
                let c = &s.cells[cell as usize];
                if c.top() != Some(base) {
                    return Err(SceneError::NotStackTop(base));
                }
                (s, c)
            }
        };
        if cell.height() >= self.max_height(surface) {
            return Err(SceneError::SlotFull {
                surface: surface.id,
                cell: cell.index,
            });
        }
        Ok(self.slot_view(surface, cell))
    }

    /// Snaps a continuous putdown point to a cell on the surface (and layer)
    /// named by `putdown`. The point must lie within half a cell pitch of the
    /// chosen cell's center on both horizontal axes.
    pub fn resolve_freeform(
        &self,
        putdown: &PutdownSlot,
        point: &Vec3,
    ) -> Result<SlotView, SceneError> {
        let (surface_id, layer) = match *putdown {
            PutdownSlot::FreeCell {
                surface,
                cell,
                layer,
            } => {
                let c = self
                    .cell(CellRef { surface, cell })
                    .ok_or(SceneError::UnknownCell { surface, cell })?;
                if c.layer != layer {
                    return Err(SceneError::LayerMismatch {
                        surface,
                        cell,
                        requested: layer,
                        actual: c.layer,
                    });
                }
                (surface, layer)
            }
            PutdownSlot::StackTop { base } => {
                let b = self.box_item(base).ok_or(SceneError::UnknownBox(base))?;
                let BoxLocation::Cell { surface, cell, .. } = b.location else {
                    return Err(SceneError::NotStackTop(base));
                };
                (surface, self.surfaces_cell_layer(surface, cell))
            }
        };
        let surface = self.surface(surface_id).ok_or(SceneError::UnknownCell {
            surface: surface_id,
            cell: 0,
        })?;
        let tolerance = 0.5 * self.geometry.cell_pitch;
        let nearest = surface
            .cells
            .iter()
            .filter(|c| c.layer == layer)
            .map(|c| {
                let dx = point.x - c.center.x;
                let dy = point.y - c.center.y;
                (dx * dx + dy * dy, dx.abs(), dy.abs(), c)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.3.index.cmp(&b.3.index)));
        match nearest {
            Some((_, dx, dy, c)) if dx <= tolerance && dy <= tolerance => {
                let view = self.slot_view(surface, c);
                if view.level >= view.max_height {
                    return Err(SceneError::SlotFull {
                        surface: surface.id,
                        cell: c.index,
                    });
                }
                Ok(view)
            }
            _ => Err(SceneError::FreeformOutOfTolerance {
                x: point.x,
                y: point.y,
            }),
        }
    }

    fn surfaces_cell_layer(&self, surface: EntityId, cell: u32) -> u32 {
        self.cell(CellRef { surface, cell }).map_or(0, |c| c.layer)
    }

    /// Resolves the slot an action would actually use under `mode`.
    pub fn executed_slot(
        &self,
        action: &Action,
        mode: ExecutionMode,
        freeform_point: Option<&Vec3>,
    ) -> Result<SlotView, SceneError> {
        match mode {
            ExecutionMode::SnapToTarget => self.resolve_slot(&action.putdown),
            ExecutionMode::FreeForm => {
                let p = freeform_point.ok_or(SceneError::MissingFreeformPoint)?;
                self.resolve_freeform(&action.putdown, p)
            }
        }
    }

    /// Executes a pick-and-place action, returning the successor state.
    pub fn apply_action(
        &self,
        action: &Action,
        mode: ExecutionMode,
        freeform_point: Option<&Vec3>,
    ) -> Result<SceneState, SceneError> {
        let pickup = self
            .box_item(action.pickup)
            .ok_or(SceneError::UnknownBox(action.pickup))?;
        if !self.is_accessible(pickup) {
            return Err(SceneError::PickupInaccessible(pickup.id));
        }
        if action.putdown == (PutdownSlot::StackTop { base: pickup.id }) {
            return Err(SceneError::PickupEqualsSupport(pickup.id));
        }
        let slot = self.executed_slot(action, mode, freeform_point)?;
        if slot.putdown == (PutdownSlot::StackTop { base: pickup.id }) {
            return Err(SceneError::PickupEqualsSupport(pickup.id));
        }

        let mut next = self.clone();
        let old_location = pickup.location;
        if let BoxLocation::Cell { surface, cell, .. } = old_location {
            next.cell_mut(CellRef { surface, cell }).occupants.pop();
        }
        let target = slot.cell_ref();
        let yaw = self.surface(slot.surface).map_or(0.0, |s| s.yaw.radians());
        let column = next.cell_mut(target);
        column.occupants.push(pickup.id);
        let level = column.height() - 1;
        let center = column.center;
        let z = center.z + (level as f64 + 0.5) * self.geometry.box_size;
        let b = next.box_mut(pickup.id);
        b.location = BoxLocation::Cell {
            surface: target.surface,
            cell: target.cell,
            level,
        };
        b.pose = Pose {
            position: Vec3::new(center.x, center.y, z),
            yaw,
        };
        next.step += 1;
        next.last_placed = Some(target);
        Ok(next)
    }

    fn cell_mut(&mut self, r: CellRef) -> &mut CellSlot {
        let i = self
            .surfaces
            .binary_search_by_key(&r.surface, |s| s.id)
            .expect("surface exists");
        &mut self.surfaces[i].cells[r.cell as usize]
    }

    fn box_mut(&mut self, id: EntityId) -> &mut BoxItem {
        let i = self
            .boxes
            .binary_search_by_key(&id, |b| b.id)
            .expect("box exists");
        &mut self.boxes[i]
    }

    pub fn is_accessible(&self, b: &BoxItem) -> bool {
        match b.location {
            BoxLocation::UnplacedFloor => true,
            BoxLocation::Held => false,
            BoxLocation::Cell { surface, cell, .. } => self
                .cell(CellRef { surface, cell })
                .is_some_and(|c| c.top() == Some(b.id)),
        }
    }

    /// Every slot where a box could be inserted, one per non-full column.
    pub fn free_cells(&self) -> Vec<SlotView> {
        let mut out = Vec::new();
        for s in &self.surfaces {
            let max = self.max_height(s);
            for c in &s.cells {
                if c.height() < max {
                    out.push(self.slot_view(s, c));
                }
            }
        }
        out
    }

    pub fn placed_boxes(&self) -> BTreeSet<EntityId> {
        self.boxes
            .iter()
            .filter(|b| b.is_placed())
            .map(|b| b.id)
            .collect()
    }

    pub fn unplaced_boxes(&self) -> BTreeSet<EntityId> {
        self.boxes
            .iter()
            .filter(|b| b.location == BoxLocation::UnplacedFloor)
            .map(|b| b.id)
            .collect()
    }

    /// Members of columns holding more than one box.
    pub fn stacked_boxes(&self) -> BTreeSet<EntityId> {
        self.cells()
            .filter(|c| c.height() > 1)
            .flat_map(|c| c.occupants.iter().copied())
            .collect()
    }

    /// Boxes with nothing resting on top.
    pub fn accessible_boxes(&self) -> BTreeSet<EntityId> {
        self.boxes
            .iter()
            .filter(|b| self.is_accessible(b))
            .map(|b| b.id)
            .collect()
    }

    pub fn cells(&self) -> impl Iterator<Item = &CellSlot> {
        self.surfaces.iter().flat_map(|s| s.cells.iter())
    }

    /// Column contents keyed by cell.
    pub fn occupancy(&self) -> BTreeMap<CellRef, Vec<EntityId>> {
        self.surfaces
            .iter()
            .flat_map(|s| {
                s.cells.iter().map(move |c| {
                    (
                        CellRef {
                            surface: s.id,
                            cell: c.index,
                        },
                        c.occupants.clone(),
                    )
                })
            })
            .collect()
    }

    /// Total box capacity when columns are limited to `height_limit`.
    pub fn capacity(&self, height_limit: u32) -> u32 {
        self.surfaces
            .iter()
            .map(|s| s.cells.len() as u32 * self.max_height(s).min(height_limit))
            .sum()
    }

    /// Checks the structural invariants; returns every violated one.
    pub fn check_invariants(&self) -> Result<(), Vec<String>> {
        let mut problems = Vec::new();
        let g = &self.geometry;
        if self.boxes.is_empty() || self.boxes.len() > 30 {
            problems.push(format!("box count {} outside [1, 30]", self.boxes.len()));
        }
        let pallets = self.surfaces.iter().filter(|s| s.kind.is_pallet()).count();
        let shelves = self.surfaces.len() - pallets;
        if pallets > 3 || shelves > 2 {
            problems.push(format!("{pallets} pallets / {shelves} shelves"));
        }
        if self.distractors.len() > 4 {
            problems.push(format!("{} distractors", self.distractors.len()));
        }
        let mut ids = BTreeSet::new();
        let all_ids = self
            .boxes
            .iter()
            .map(|b| b.id)
            .chain(self.surfaces.iter().map(|s| s.id))
            .chain(self.cells().map(|c| c.id))
            .chain(self.distractors.iter().map(|d| d.id));
        for id in all_ids {
            if id == FLOOR_ID || !ids.insert(id) {
                problems.push(format!("duplicate or reserved id {id}"));
            }
        }
        if !self.boxes.windows(2).all(|w| w[0].id < w[1].id)
            || !self.surfaces.windows(2).all(|w| w[0].id < w[1].id)
        {
            problems.push("entities not sorted by id".into());
        }
        let mut seen_in_cells: BTreeMap<EntityId, usize> = BTreeMap::new();
        for s in &self.surfaces {
            let max = self.max_height(s);
            if s.cells.len() as u32 != s.kind.cell_count() {
                problems.push(format!("surface {} has {} cells", s.id, s.cells.len()));
            }
            let (min_x, min_y, max_x, max_y) = s.footprint_aabb(g);
            for (i, c) in s.cells.iter().enumerate() {
                if c.index as usize != i || c.surface != s.id {
                    problems.push(format!("cell {} of surface {} misindexed", i, s.id));
                }
                if c.height() > max {
                    problems.push(format!("cell {} of surface {} over height", i, s.id));
                }
                for (level, &bid) in c.occupants.iter().enumerate() {
                    *seen_in_cells.entry(bid).or_default() += 1;
                    let Some(b) = self.box_item(bid) else {
                        problems.push(format!("cell lists unknown box {bid}"));
                        continue;
                    };
                    let expected = BoxLocation::Cell {
                        surface: s.id,
                        cell: c.index,
                        level: level as u32,
                    };
                    if b.location != expected {
                        problems.push(format!("box {bid} location disagrees with cell"));
                    }
                    let z = c.center.z + (level as f64 + 0.5) * g.box_size;
                    let p = &b.pose.position;
                    if (p.x - c.center.x).abs() > 1e-9
                        || (p.y - c.center.y).abs() > 1e-9
                        || (p.z - z).abs() > 1e-9
                    {
                        problems.push(format!("box {bid} pose off its cell"));
                    }
                    if (b.pose.yaw - s.yaw.radians()).abs() > 1e-12 {
                        problems.push(format!("box {bid} yaw not aligned"));
                    }
                    if p.x < min_x || p.x > max_x || p.y < min_y || p.y > max_y {
                        problems.push(format!("box {bid} outside surface footprint"));
                    }
                }
            }
        }
        for b in &self.boxes {
            let listed = seen_in_cells.get(&b.id).copied().unwrap_or(0);
            match b.location {
                BoxLocation::Cell { .. } if listed != 1 => {
                    problems.push(format!("box {} listed {listed} times", b.id))
                }
                BoxLocation::UnplacedFloor | BoxLocation::Held if listed != 0 => {
                    problems.push(format!("unplaced box {} listed in a cell", b.id))
                }
                BoxLocation::Held => problems.push(format!("box {} held at rest", b.id)),
                _ => {}
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }
}
