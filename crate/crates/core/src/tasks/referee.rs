//! Per-step action validity and terminal goal checks.

use super::{Direction, TaskInstance, TaskVariant};
use crate::warehouse::{
    Action, BoxColor, BoxLocation, CellRef, EntityId, PutdownSlot, SceneError, SceneState, SlotView,
};
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Violation {
    // Structural: the action does not name a legal move at all.
    UnknownEntity,
    PickupNotABox,
    TargetNotPlaceable,
    PickupNotUnplaced,
    PickupInaccessible,
    PickupEqualsSupport,
    SlotOccupied,
    NotStackTop,
    LayerMismatch,
    SlotFull,
    FreeformUnsnappable,
    // Task clauses.
    HeightLimit,
    BoxTypePriority,
    ShelfPriority,
    PalletPriority,
    PlacementOrdering,
    SizePriority,
    AvoidStacking,
    HomogeneousStacks,
    BoxTypeSegregation,
    FinishStackFirst,
    BoxAccessibility,
}

impl Violation {
    pub fn name(self) -> &'static str {
        match self {
            Violation::UnknownEntity => "unknown-entity",
            Violation::PickupNotABox => "pickup-not-a-box",
            Violation::TargetNotPlaceable => "target-not-placeable",
            Violation::PickupNotUnplaced => "pickup-not-unplaced",
            Violation::PickupInaccessible => "pickup-inaccessible",
            Violation::PickupEqualsSupport => "pickup-equals-support",
            Violation::SlotOccupied => "slot-occupied",
            Violation::NotStackTop => "not-stack-top",
            Violation::LayerMismatch => "layer-mismatch",
            Violation::SlotFull => "slot-full",
            Violation::FreeformUnsnappable => "freeform-unsnappable",
            Violation::HeightLimit => "height-limit",
            Violation::BoxTypePriority => "box-type-priority",
            Violation::ShelfPriority => "shelf-priority",
            Violation::PalletPriority => "pallet-priority",
            Violation::PlacementOrdering => "placement-ordering",
            Violation::SizePriority => "size-priority",
            Violation::AvoidStacking => "avoid-stacking",
            Violation::HomogeneousStacks => "homogeneous-stacks",
            Violation::BoxTypeSegregation => "box-type-segregation",
            Violation::FinishStackFirst => "finish-stack-first",
            Violation::BoxAccessibility => "box-accessibility",
        }
    }

    pub fn from_scene_error(e: &SceneError) -> Self {
        match e {
            SceneError::UnknownBox(_) | SceneError::UnknownCell { .. } => Violation::UnknownEntity,
            SceneError::LayerMismatch { .. } => Violation::LayerMismatch,
            SceneError::PickupInaccessible(_) => Violation::PickupInaccessible,
            SceneError::SlotFull { .. } => Violation::SlotFull,
            SceneError::SlotOccupied { .. } => Violation::SlotOccupied,
            SceneError::NotStackTop(_) => Violation::NotStackTop,
            SceneError::PickupEqualsSupport(_) => Violation::PickupEqualsSupport,
            SceneError::MissingFreeformPoint | SceneError::FreeformOutOfTolerance { .. } => {
                Violation::FreeformUnsnappable
            }
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub valid: bool,
    pub violations: Vec<Violation>,
}

impl Verdict {
    pub fn from_violations(violations: Vec<Violation>) -> Self {
        Verdict {
            valid: violations.is_empty(),
            violations,
        }
    }
}

/// Ordering key for placement-ordering: world x in the task's direction,
/// then y, surface id, cell index. Coordinates are compared on a 1 um grid so
/// that cells sharing a row compare equal on x.
fn ordering_key(slot: &SlotView, direction: Direction) -> (i64, i64, EntityId, u32) {
    let qx = (slot.insertion.x * 1e6).round() as i64;
    let qy = (slot.insertion.y * 1e6).round() as i64;
    let x = match direction {
        Direction::LeftToRight => qx,
        Direction::RightToLeft => -qx,
    };
    (x, qy, slot.surface, slot.cell)
}

/// Task-aware view of one state, reused across many candidate actions.
pub struct Referee<'a> {
    task: &'a TaskInstance,
    state: &'a SceneState,
    /// Slots with column height below the effective limit.
    open: Vec<SlotView>,
}

impl<'a> Referee<'a> {
    pub fn new(task: &'a TaskInstance, state: &'a SceneState) -> Self {
        let open = state
            .free_cells()
            .into_iter()
            .filter(|s| s.level < s.max_height.min(task.params.max_height))
            .collect();
        Referee { task, state, open }
    }

    pub fn task(&self) -> &TaskInstance {
        self.task
    }

    /// Slots that respect the height limit, before variant rules.
    pub fn open_slots(&self) -> &[SlotView] {
        &self.open
    }

    pub fn cap(&self, slot: &SlotView) -> u32 {
        slot.max_height.min(self.task.params.max_height)
    }

    fn frontier(&self, direction: Direction) -> Option<&SlotView> {
        self.open.iter().min_by_key(|s| ordering_key(s, direction))
    }

    /// The most recently extended column if it is started but not complete.
    pub fn current_stack(&self) -> Option<CellRef> {
        let r = self.state.last_placed?;
        let surface = self.state.surface(r.surface)?;
        let cell = surface.cells.get(r.cell as usize)?;
        let cap = self
            .state
            .max_height(surface)
            .min(self.task.params.max_height);
        (cell.height() >= 1 && cell.height() < cap).then_some(r)
    }

    /// Checks `action` against the current state, listing every failed
    /// clause.
    pub fn check(&self, action: &Action) -> Verdict {
        let state = self.state;
        let Some(pickup) = state.box_item(action.pickup) else {
            return Verdict::from_violations(vec![Violation::UnknownEntity]);
        };
        let mut violations = Vec::new();
        if pickup.location != BoxLocation::UnplacedFloor {
            violations.push(Violation::PickupNotUnplaced);
            if !state.is_accessible(pickup) {
                violations.push(Violation::PickupInaccessible);
            }
        }
        if action.putdown == (PutdownSlot::StackTop { base: pickup.id }) {
            violations.push(Violation::PickupEqualsSupport);
            return Verdict::from_violations(violations);
        }
        let slot = match state.resolve_slot(&action.putdown) {
            Ok(slot) => slot,
            Err(e) => {
                violations.push(Violation::from_scene_error(&e));
                return Verdict::from_violations(violations);
            }
        };
        self.check_slot(pickup.id, pickup.color, &slot, &mut violations);
        Verdict::from_violations(violations)
    }

    fn check_slot(
        &self,
        pickup: EntityId,
        color: BoxColor,
        slot: &SlotView,
        violations: &mut Vec<Violation>,
    ) {
        let state = self.state;
        let params = &self.task.params;
        if slot.level >= self.cap(slot) {
            violations.push(Violation::HeightLimit);
        }
        let column = state
            .cell(slot.cell_ref())
            .map(|c| c.occupants.as_slice())
            .unwrap_or(&[]);
        let color_of = |id: EntityId| state.box_item(id).map(|b| b.color);
        let rule_broken = match self.task.variant {
            TaskVariant::BasicPlacement => false,
            TaskVariant::BoxTypePriority => {
                let priority = params.priority_color.unwrap_or(BoxColor::Red);
                color != priority
                    && state
                        .boxes
                        .iter()
                        .any(|b| b.location == BoxLocation::UnplacedFloor && b.color == priority)
            }
            TaskVariant::ShelfPriority => {
                slot.surface_kind.is_pallet() && self.open.iter().any(|s| s.surface_kind.is_shelf())
            }
            TaskVariant::PalletPriority => {
                slot.surface_kind.is_shelf() && self.open.iter().any(|s| s.surface_kind.is_pallet())
            }
            TaskVariant::PlacementOrdering => {
                let direction = params.direction.unwrap_or(Direction::LeftToRight);
                self.frontier(direction)
                    .is_none_or(|f| f.cell_ref() != slot.cell_ref())
            }
            TaskVariant::SizePriority => match params.priority_size {
                Some(size) => {
                    slot.surface_kind.size_class() != size
                        && self
                            .open
                            .iter()
                            .any(|s| s.surface_kind.size_class() == size)
                }
                None => false,
            },
            TaskVariant::AvoidStacking => slot.level > 0 && self.open.iter().any(|s| s.level == 0),
            TaskVariant::HomogeneousStacks => column.iter().any(|&b| color_of(b) != Some(color)),
            TaskVariant::BoxTypeSegregation => state.surface(slot.surface).is_some_and(|s| {
                s.cells
                    .iter()
                    .flat_map(|c| c.occupants.iter())
                    .any(|&b| color_of(b) != Some(color))
            }),
            TaskVariant::FinishStackFirst => self
                .current_stack()
                .is_some_and(|current| current != slot.cell_ref()),
            TaskVariant::BoxAccessibility => {
                let priority = params.priority_color.unwrap_or(BoxColor::Red);
                !self.accessible_after(pickup, color, slot.cell_ref(), priority)
            }
        };
        if rule_broken {
            violations.push(rule_violation(self.task.variant));
        }
    }

    /// Whether every placed priority box is a column top or sits in an
    /// all-priority column once `pickup` lands on `target`.
    fn accessible_after(
        &self,
        pickup: EntityId,
        color: BoxColor,
        target: CellRef,
        priority: BoxColor,
    ) -> bool {
        let state = self.state;
        state.surfaces.iter().all(|s| {
            s.cells.iter().all(|c| {
                let mut colors: Vec<BoxColor> = c
                    .occupants
                    .iter()
                    .filter(|&&b| b != pickup)
                    .filter_map(|&b| state.box_item(b).map(|b| b.color))
                    .collect();
                if (CellRef {
                    surface: s.id,
                    cell: c.index,
                }) == target
                {
                    colors.push(color);
                }
                column_keeps_accessible(&colors, priority)
            })
        })
    }
}

fn rule_violation(variant: TaskVariant) -> Violation {
    match variant {
        TaskVariant::BasicPlacement => Violation::HeightLimit,
        TaskVariant::BoxTypePriority => Violation::BoxTypePriority,
        TaskVariant::ShelfPriority => Violation::ShelfPriority,
        TaskVariant::PalletPriority => Violation::PalletPriority,
        TaskVariant::PlacementOrdering => Violation::PlacementOrdering,
        TaskVariant::SizePriority => Violation::SizePriority,
        TaskVariant::AvoidStacking => Violation::AvoidStacking,
        TaskVariant::HomogeneousStacks => Violation::HomogeneousStacks,
        TaskVariant::BoxTypeSegregation => Violation::BoxTypeSegregation,
        TaskVariant::FinishStackFirst => Violation::FinishStackFirst,
        TaskVariant::BoxAccessibility => Violation::BoxAccessibility,
    }
}

/// Column colors bottom to top.
fn column_keeps_accessible(colors: &[BoxColor], priority: BoxColor) -> bool {
    if colors.iter().all(|&c| c == priority) {
        return true;
    }
    let below_top = &colors[..colors.len().saturating_sub(1)];
    !below_top.contains(&priority)
}

/// One-shot validity check.
pub fn action_valid(task: &TaskInstance, state: &SceneState, action: &Action) -> Verdict {
    Referee::new(task, state).check(action)
}

/// Final-configuration clauses that fail on `state`.
pub fn final_violations(task: &TaskInstance, state: &SceneState) -> Vec<Violation> {
    let mut out = Vec::new();
    let h = task.params.max_height;
    let color = |id: &EntityId| state.box_item(*id).map(|b| b.color);
    if state.surfaces.iter().any(|s| {
        s.cells
            .iter()
            .any(|c| c.height() > state.max_height(s).min(h))
    }) {
        out.push(Violation::HeightLimit);
    }
    match task.variant {
        TaskVariant::HomogeneousStacks => {
            if state.cells().any(|c| {
                let first = c.occupants.first().and_then(color);
                c.occupants.iter().any(|b| color(b) != first)
            }) {
                out.push(Violation::HomogeneousStacks);
            }
        }
        TaskVariant::BoxTypeSegregation => {
            if state.surfaces.iter().any(|s| {
                let mut colors = s.cells.iter().flat_map(|c| c.occupants.iter()).map(color);
                let first = colors.next();
                first.is_some_and(|f| colors.any(|c| c != f))
            }) {
                out.push(Violation::BoxTypeSegregation);
            }
        }
        TaskVariant::BoxAccessibility => {
            let priority = task.params.priority_color.unwrap_or(BoxColor::Red);
            if !state.cells().all(|c| {
                let colors: Vec<BoxColor> = c.occupants.iter().filter_map(color).collect();
                column_keeps_accessible(&colors, priority)
            }) {
                out.push(Violation::BoxAccessibility);
            }
        }
        _ => {}
    }
    out
}

/// True once every box is placed and the final-configuration clauses hold.
pub fn goal_satisfied(task: &TaskInstance, state: &SceneState) -> bool {
    state.unplaced_boxes().is_empty() && final_violations(task, state).is_empty()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{TaskParams, TemplateSet};
    use crate::warehouse::fixtures::{place, scene};
    use crate::warehouse::{PutdownSlot, SurfaceKind};

    const R: BoxColor = BoxColor::Red;
    const B: BoxColor = BoxColor::Blue;
    const Y: BoxColor = BoxColor::Yellow;

    fn task(variant: TaskVariant, h: u32) -> TaskInstance {
        let mut params = TaskParams {
            max_height: h,
            priority_color: None,
            direction: None,
            priority_size: None,
        };
        if variant.uses_color() {
            params.priority_color = Some(B);
        }
        if variant == TaskVariant::PlacementOrdering {
            params.direction = Some(Direction::LeftToRight);
        }
        if variant == TaskVariant::SizePriority {
            params.priority_size = Some(crate::warehouse::SizeClass::Small);
        }
        TaskInstance::new(variant, params, TemplateSet::Training, 0)
    }

    fn free(s: &SceneState, surface_idx: usize, cell: u32) -> PutdownSlot {
        let surf = &s.surfaces[surface_idx];
        PutdownSlot::FreeCell {
            surface: surf.id,
            cell,
            layer: surf.cells[cell as usize].layer,
        }
    }

    fn top(s: &SceneState, surface_idx: usize, cell: u32) -> PutdownSlot {
        PutdownSlot::StackTop {
            base: s.surfaces[surface_idx].cells[cell as usize].top().unwrap(),
        }
    }

    #[test]
    fn shelf_priority_blocks_pallet_while_shelf_free() {
        let s = scene(
            &[SurfaceKind::PalletSmall, SurfaceKind::ShelfSmall],
            &[R, R, R, R],
        );
        let shelf = s.surfaces[1].id;
        let mut st = s.clone();
        for (i, b) in s.boxes[..3].iter().enumerate() {
            st = place(&st, b.id, shelf, i as u32);
        }
        // one shelf cell (index 3) remains free
        let t = task(TaskVariant::ShelfPriority, 3);
        let v = action_valid(
            &t,
            &st,
            &Action {
                pickup: s.boxes[3].id,
                putdown: free(&st, 0, 0),
            },
        );
        assert!(!v.valid);
        assert_eq!(v.violations, vec![Violation::ShelfPriority]);
        let v = action_valid(
            &t,
            &st,
            &Action {
                pickup: s.boxes[3].id,
                putdown: free(&st, 1, 3),
            },
        );
        assert!(v.valid);
    }

    #[test]
    fn basic_placement_on_empty_pallet_is_valid() {
        let s = scene(&[SurfaceKind::PalletSmall], &[R, B]);
        let t = task(TaskVariant::BasicPlacement, 3);
        for b in &s.boxes {
            for cell in 0..4 {
                assert!(
                    action_valid(
                        &t,
                        &s,
                        &Action {
                            pickup: b.id,
                            putdown: free(&s, 0, cell)
                        }
                    )
                    .valid
                );
            }
        }
    }

    #[test]
    fn avoid_stacking_with_free_level_zero_cell() {
        let s = scene(&[SurfaceKind::PalletSmall], &[R, R, R, R]);
        let p = s.surfaces[0].id;
        let mut st = s.clone();
        for (i, b) in s.boxes[..3].iter().enumerate() {
            st = place(&st, b.id, p, i as u32);
        }
        let t = task(TaskVariant::AvoidStacking, 3);
        let free_level0 = Referee::new(&t, &st)
            .open_slots()
            .iter()
            .filter(|s| s.level == 0)
            .count();
        assert_eq!(free_level0, 1);
        let v = action_valid(
            &t,
            &st,
            &Action {
                pickup: s.boxes[3].id,
                putdown: top(&st, 0, 0),
            },
        );
        assert_eq!(v.violations, vec![Violation::AvoidStacking]);
    }

    #[test]
    fn height_limit_binds_below_pallet_max() {
        let s = scene(&[SurfaceKind::PalletSmall], &[R, R, R]);
        let p = s.surfaces[0].id;
        let st = place(&place(&s, s.boxes[0].id, p, 0), s.boxes[1].id, p, 0);
        let t = task(TaskVariant::BasicPlacement, 2);
        let v = action_valid(
            &t,
            &st,
            &Action {
                pickup: s.boxes[2].id,
                putdown: top(&st, 0, 0),
            },
        );
        assert_eq!(v.violations, vec![Violation::HeightLimit]);
    }

    #[test]
    fn priority_color_first() {
        let s = scene(&[SurfaceKind::PalletSmall], &[R, B]);
        let t = task(TaskVariant::BoxTypePriority, 3);
        let red = Action {
            pickup: s.boxes[0].id,
            putdown: free(&s, 0, 0),
        };
        let blue = Action {
            pickup: s.boxes[1].id,
            putdown: free(&s, 0, 0),
        };
        assert_eq!(
            action_valid(&t, &s, &red).violations,
            vec![Violation::BoxTypePriority]
        );
        assert!(action_valid(&t, &s, &blue).valid);
    }

    #[test]
    fn ordering_requires_frontier_slot() {
        let s = scene(&[SurfaceKind::PalletSmall, SurfaceKind::PalletSmall], &[R]);
        let t = task(TaskVariant::PlacementOrdering, 3);
        // Surface 0 is to the left (x = -5); cells 0 and 2 share the lowest x,
        // y breaks the tie in favor of cell 0.
        let b = s.boxes[0].id;
        assert!(
            action_valid(
                &t,
                &s,
                &Action {
                    pickup: b,
                    putdown: free(&s, 0, 0)
                }
            )
            .valid
        );
        for cell in 1..4 {
            assert_eq!(
                action_valid(
                    &t,
                    &s,
                    &Action {
                        pickup: b,
                        putdown: free(&s, 0, cell)
                    }
                )
                .violations,
                vec![Violation::PlacementOrdering]
            );
        }
        let mut rtl = t.clone();
        rtl.params.direction = Some(Direction::RightToLeft);
        assert!(
            action_valid(
                &rtl,
                &s,
                &Action {
                    pickup: b,
                    putdown: free(&s, 1, 1)
                }
            )
            .valid
        );
    }

    #[test]
    fn homogeneous_and_segregation() {
        let s = scene(&[SurfaceKind::PalletSmall], &[R, B]);
        let p = s.surfaces[0].id;
        let st = place(&s, s.boxes[0].id, p, 0);
        let on_red = Action {
            pickup: s.boxes[1].id,
            putdown: top(&st, 0, 0),
        };
        let beside = Action {
            pickup: s.boxes[1].id,
            putdown: free(&st, 0, 1),
        };
        let hom = task(TaskVariant::HomogeneousStacks, 3);
        assert_eq!(
            action_valid(&hom, &st, &on_red).violations,
            vec![Violation::HomogeneousStacks]
        );
        assert!(action_valid(&hom, &st, &beside).valid);
        let seg = task(TaskVariant::BoxTypeSegregation, 3);
        assert_eq!(
            action_valid(&seg, &st, &beside).violations,
            vec![Violation::BoxTypeSegregation]
        );
    }

    #[test]
    fn finish_stack_first_tracks_last_column() {
        let s = scene(&[SurfaceKind::PalletSmall], &[R, R, R]);
        let p = s.surfaces[0].id;
        let st = place(&s, s.boxes[0].id, p, 2);
        let t = task(TaskVariant::FinishStackFirst, 2);
        assert_eq!(
            action_valid(
                &t,
                &st,
                &Action {
                    pickup: s.boxes[1].id,
                    putdown: free(&st, 0, 0)
                }
            )
            .violations,
            vec![Violation::FinishStackFirst]
        );
        let st2 = place(&st, s.boxes[1].id, p, 2);
        // column complete at H = 2, any cell is fine now
        assert!(
            action_valid(
                &t,
                &st2,
                &Action {
                    pickup: s.boxes[2].id,
                    putdown: free(&st2, 0, 0)
                }
            )
            .valid
        );
    }

    #[test]
    fn accessibility_forbids_burying_priority() {
        let s = scene(&[SurfaceKind::PalletSmall], &[B, R, B]);
        let p = s.surfaces[0].id;
        let st = place(&s, s.boxes[0].id, p, 0);
        let t = task(TaskVariant::BoxAccessibility, 3);
        let bury = Action {
            pickup: s.boxes[1].id,
            putdown: top(&st, 0, 0),
        };
        assert_eq!(
            action_valid(&t, &st, &bury).violations,
            vec![Violation::BoxAccessibility]
        );
        let homogeneous = Action {
            pickup: s.boxes[2].id,
            putdown: top(&st, 0, 0),
        };
        assert!(action_valid(&t, &st, &homogeneous).valid);

        // Goal check: blue buried under red fails.
        let buried = place(&st, s.boxes[1].id, p, 0);
        let full = place(&buried, s.boxes[2].id, p, 1);
        assert!(full.unplaced_boxes().is_empty());
        assert!(!goal_satisfied(&t, &full));
        assert_eq!(
            final_violations(&t, &full),
            vec![Violation::BoxAccessibility]
        );
    }

    #[test]
    fn goal_requires_every_box_placed() {
        let s = scene(&[SurfaceKind::PalletSmall], &[R, Y]);
        let t = task(TaskVariant::BasicPlacement, 3);
        let p = s.surfaces[0].id;
        let one = place(&s, s.boxes[0].id, p, 0);
        assert!(!goal_satisfied(&t, &one));
        let two = place(&one, s.boxes[1].id, p, 0);
        assert!(goal_satisfied(&t, &two));
    }

    #[test]
    fn structural_errors_surface_as_violations() {
        let s = scene(&[SurfaceKind::PalletSmall], &[R, R]);
        let p = s.surfaces[0].id;
        let st = place(&s, s.boxes[0].id, p, 0);
        let t = task(TaskVariant::BasicPlacement, 3);
        let v = action_valid(
            &t,
            &st,
            &Action {
                pickup: s.boxes[1].id,
                putdown: free(&st, 0, 0),
            },
        );
        assert_eq!(v.violations, vec![Violation::SlotOccupied]);
        let v = action_valid(
            &t,
            &st,
            &Action {
                pickup: s.boxes[0].id,
                putdown: free(&st, 0, 1),
            },
        );
        assert_eq!(v.violations, vec![Violation::PickupNotUnplaced]);
        let v = action_valid(
            &t,
            &st,
            &Action {
                pickup: 999,
                putdown: free(&st, 0, 1),
            },
        );
        assert_eq!(v.violations, vec![Violation::UnknownEntity]);
    }
}
