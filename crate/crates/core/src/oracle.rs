//! Greedy ground-truth planner: the closest valid pick-and-place pair.

use crate::tasks::{goal_satisfied, Referee, TaskInstance};
use crate::warehouse::{Action, ExecutionMode, SceneError, SceneState, SlotView};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleChoice {
    pub action: Action,
    /// Distance from the pickup box center to the insertion center.
    pub distance: f64,
    /// Number of valid pairs considered.
    pub candidate_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OracleStep {
    Done,
    Act(OracleChoice),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("no valid action at step {step} and the goal is unsatisfied")]
    DeadEnd { step: u32 },
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// Tie-break key after distance: pickup id, surface id, cell index, layer.
pub fn tie_key(action: &Action, slot: &SlotView) -> (u32, u32, u32, u32) {
    (action.pickup, slot.surface, slot.cell, slot.layer)
}

/// Every valid `(action, slot, distance)` over unplaced boxes and current
/// insertion slots.
pub fn valid_candidates(task: &TaskInstance, state: &SceneState) -> Vec<(Action, SlotView, f64)> {
    let referee = Referee::new(task, state);
    let slots = state.free_cells();
    let mut out = Vec::new();
    for b in state.boxes.iter().filter(|b| !b.is_placed()) {
        for slot in &slots {
            let action = Action {
                pickup: b.id,
                putdown: slot.putdown,
            };
            if referee.check(&action).valid {
                let d = (b.pose.position - slot.insertion).norm();
                out.push((action, slot.clone(), d));
            }
        }
    }
    out
}

fn order(a: &(Action, SlotView, f64), b: &(Action, SlotView, f64)) -> Ordering {
    a.2.total_cmp(&b.2)
        .then_with(|| tie_key(&a.0, &a.1).cmp(&tie_key(&b.0, &b.1)))
}

pub fn oracle_next(task: &TaskInstance, state: &SceneState) -> Result<OracleStep, OracleError> {
    if goal_satisfied(task, state) {
        return Ok(OracleStep::Done);
    }
    let candidates = valid_candidates(task, state);
    let count = candidates.len();
    let best = candidates
        .into_iter()
        .min_by(order)
        .ok_or(OracleError::DeadEnd { step: state.step })?;
    Ok(OracleStep::Act(OracleChoice {
        action: best.0,
        distance: best.2,
        candidate_count: count,
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutStep {
    /// State the choice was made in.
    pub state: SceneState,
    pub choice: OracleChoice,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub steps: Vec<RolloutStep>,
    pub final_state: SceneState,
}

/// Plans and executes (snap-to-target) until the goal holds.
pub fn oracle_rollout(task: &TaskInstance, scene: &SceneState) -> Result<Rollout, OracleError> {
    let mut state = scene.clone();
    let mut steps = Vec::new();
    loop {
        match oracle_next(task, &state)? {
            OracleStep::Done => {
                return Ok(Rollout {
                    steps,
                    final_state: state,
                })
            }
            OracleStep::Act(choice) => {
                let next = state.apply_action(&choice.action, ExecutionMode::SnapToTarget, None)?;
                steps.push(RolloutStep {
                    state: std::mem::replace(&mut state, next),
                    choice,
                });
            }
        }
    }
}
