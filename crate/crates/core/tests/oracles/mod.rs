//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use boxbench_core::pair_select::QueryOutputs;
use boxbench_core::warehouse::{Action, BoxLocation, EntityId, PutdownSlot, SceneState, Vec3};

/// Textbook DBSCAN over all pairs. Clusters are seeded from core points in
/// index order and border points go to the first cluster reaching them. The
/// largest cluster wins, then the one containing the lowest index.
pub fn reference_dbscan(points: &[Vec3], eps: f64, min_pts: usize) -> (Vec<usize>, bool) {
    let n = points.len();
    let near = |i: usize, j: usize| {
        let d = points[i] - points[j];
        d.x * d.x + d.y * d.y + d.z * d.z <= eps * eps
    };
    let core: Vec<bool> = (0..n)
        .map(|i| (0..n).filter(|&j| near(i, j)).count() >= min_pts)
        .collect();
    let mut label: Vec<Option<usize>> = vec![None; n];
    let mut clusters = 0;
    for seed in 0..n {
        if !core[seed] || label[seed].is_some() {
            continue;
        }
        let c = clusters;
        clusters += 1;
        label[seed] = Some(c);
        let mut frontier = vec![seed];
        while let Some(p) = frontier.pop() {
            for q in 0..n {
                if near(p, q) && label[q].is_none() {
                    label[q] = Some(c);
                    if core[q] {
                        frontier.push(q);
                    }
                }
            }
        }
    }
    if clusters == 0 {
        return (Vec::new(), true);
    }
    let size = |c: usize| label.iter().filter(|l| **l == Some(c)).count();
    let first = |c: usize| label.iter().position(|l| *l == Some(c)).unwrap();
    let best = (0..clusters)
        .max_by(|&a, &b| size(a).cmp(&size(b)).then(first(b).cmp(&first(a))))
        .unwrap();
    ((0..n).filter(|&i| label[i] == Some(best)).collect(), false)
}

/// Where a box put down by `action` ends up: half a box above the empty
/// cell's support center, or a full box above the base box's center.
pub fn landing_point(state: &SceneState, action: &Action) -> Option<Vec3> {
    let half = state.geometry.box_size / 2.0;
    match action.putdown {
        PutdownSlot::FreeCell { surface, cell, .. } => {
            let s = state.surfaces.iter().find(|s| s.id == surface)?;
            let c = s.cells.get(cell as usize)?;
            Some(c.center + Vec3::new(0.0, 0.0, half))
        }
        PutdownSlot::StackTop { base } => {
            let b = state.boxes.iter().find(|b| b.id == base)?;
            matches!(b.location, BoxLocation::Cell { .. })
                .then(|| b.pose.position + Vec3::new(0.0, 0.0, 2.0 * half))
        }
    }
}

/// Every syntactically possible action: each box onto each cell at each
/// layer index in use, or onto each box.
pub fn all_actions(state: &SceneState) -> Vec<Action> {
    let mut putdowns = Vec::new();
    for s in &state.surfaces {
        for c in &s.cells {
            putdowns.push(PutdownSlot::FreeCell {
                surface: s.id,
                cell: c.index,
                layer: c.layer,
            });
        }
    }
    for b in &state.boxes {
        putdowns.push(PutdownSlot::StackTop { base: b.id });
    }
    state
        .boxes
        .iter()
        .flat_map(|b| {
            putdowns.iter().map(move |&putdown| Action {
                pickup: b.id,
                putdown,
            })
        })
        .collect()
}

/// Entity a putdown mask should resolve to.
pub fn target_entity(state: &SceneState, putdown: &PutdownSlot) -> Option<EntityId> {
    match *putdown {
        PutdownSlot::FreeCell { surface, cell, .. } => state
            .surfaces
            .iter()
            .find(|s| s.id == surface)
            .and_then(|s| s.cells.get(cell as usize))
            .map(|c| c.id),
        PutdownSlot::StackTop { base } => Some(base),
    }
}

pub fn brute_iou(a: &[bool], b: &[bool]) -> Option<f64> {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    (union > 0).then(|| inter as f64 / union as f64)
}

/// Best `(i, j)`, `i != j`, over all pairs, scored from scratch.
pub fn exhaustive_pair(o: &QueryOutputs, lambda: f64) -> (usize, usize, f64) {
    let q = o.pick_confidence.len();
    let lc = |c: f64| c.max(1e-12).ln();
    let mut best = (0, 0, f64::NEG_INFINITY);
    for i in 0..q {
        for j in 0..q {
            if i == j {
                continue;
            }
            let dot: f64 = o.pick_embedding[i]
                .iter()
                .zip(&o.put_embedding[j])
                .map(|(a, b)| a * b)
                .sum();
            let s = lc(o.pick_confidence[i]) + lc(o.put_confidence[j]) + lambda * dot;
            if s > best.2 {
                best = (i, j, s);
            }
        }
    }
    best
}

/// Whether query `i` ranks among the `k` most confident picks.
pub fn in_top_k(o: &QueryOutputs, i: usize, k: usize) -> bool {
    o.pick_confidence
        .iter()
        .filter(|&&c| c > o.pick_confidence[i])
        .count()
        < k
}
