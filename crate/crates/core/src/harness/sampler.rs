//! Seeded episode sampling: task parameters plus a scene the task can be
//! completed in.

use crate::oracle::oracle_rollout;
use crate::rng;
use crate::scene_gen::{generate_scene, SceneConfig, SceneGenError};
use crate::tasks::{sample_task, TaskInstance, TaskVariant, TemplateSet};
use crate::warehouse::{Geometry, SceneState, SizeClass, SurfaceKind};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Box-count strata used throughout evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Bucket {
    #[serde(rename = "1-10")]
    Small,
    #[serde(rename = "11-20")]
    Medium,
    #[serde(rename = "21-30")]
    Large,
}

impl Bucket {
    pub const ALL: [Bucket; 3] = [Bucket::Small, Bucket::Medium, Bucket::Large];

    pub fn of(num_boxes: u32) -> Bucket {
        match num_boxes {
            0..=10 => Bucket::Small,
            11..=20 => Bucket::Medium,
            _ => Bucket::Large,
        }
    }

    pub fn range(self) -> (u32, u32) {
        match self {
            Bucket::Small => (1, 10),
            Bucket::Medium => (11, 20),
            Bucket::Large => (21, 30),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Bucket::Small => "1-10",
            Bucket::Medium => "11-20",
            Bucket::Large => "21-30",
        }
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub episode_id: u64,
    /// Seed of the accepted attempt; drives the scene and per-step streams.
    pub seed: u64,
    pub task: TaskInstance,
    pub scene_config: SceneConfig,
}

impl EpisodeSpec {
    pub fn num_boxes(&self) -> u32 {
        self.scene_config.num_boxes
    }

    pub fn bucket(&self) -> Bucket {
        Bucket::of(self.num_boxes())
    }

    pub fn scene(&self) -> Result<SceneState, SceneGenError> {
        generate_scene(&self.scene_config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub max_attempts: u32,
    pub max_distractors: u32,
    pub template_set: TemplateSet,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            max_attempts: 20_000,
            max_distractors: 4,
            template_set: TemplateSet::Training,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SamplerError {
    #[error("no feasible episode for {variant} with {boxes} boxes after {attempts} attempts")]
    Exhausted {
        variant: TaskVariant,
        boxes: u32,
        attempts: u32,
    },
    #[error(transparent)]
    Scene(#[from] SceneGenError),
}

fn capacity(g: &Geometry, kinds: &[SurfaceKind], h: u32) -> u32 {
    kinds
        .iter()
        .map(|&k| k.cell_count() * g.max_height(k).min(h))
        .sum()
}

/// Static conditions under which the greedy oracle cannot get stuck.
fn structurally_feasible(
    task: &TaskInstance,
    kinds: &[SurfaceKind],
    boxes: u32,
    g: &Geometry,
) -> bool {
    let h = task.params.max_height;
    if capacity(g, kinds, h) < boxes {
        return false;
    }
    let cells: u32 = kinds.iter().map(|k| k.cell_count()).sum();
    let has = |f: fn(&SurfaceKind) -> bool| kinds.iter().any(f);
    match task.variant {
        TaskVariant::HomogeneousStacks | TaskVariant::BoxAccessibility => cells >= boxes,
        TaskVariant::ShelfPriority | TaskVariant::PalletPriority => {
            has(|k| k.is_pallet()) && has(|k| k.is_shelf())
        }
        TaskVariant::SizePriority => {
            has(|k| k.size_class() == SizeClass::Small)
                && has(|k| k.size_class() == SizeClass::Large)
        }
        _ => true,
    }
}

fn sample_kinds(r: &mut impl Rng) -> Vec<SurfaceKind> {
    let pallets = r.random_range(1..=3);
    let shelves = r.random_range(0..=2);
    let mut kinds = Vec::with_capacity(pallets + shelves);
    for _ in 0..pallets {
        kinds.push(if r.random_bool(0.5) {
            SurfaceKind::PalletLarge
        } else {
            SurfaceKind::PalletSmall
        });
    }
    for _ in 0..shelves {
        kinds.push(if r.random_bool(0.5) {
            SurfaceKind::ShelfLarge
        } else {
            SurfaceKind::ShelfSmall
        });
    }
    kinds
}

/// Box count for episode `index`: buckets cycle 1-10, 11-20, 21-30 and the
/// count is uniform within the bucket.
pub fn box_count(master_seed: u64, index: u64) -> u32 {
    let bucket = Bucket::ALL[(index % 3) as usize];
    let (lo, hi) = bucket.range();
    rng::stream(master_seed, "episode/boxes", index).random_range(lo..=hi)
}

/// Draws episode `index` of `variant` under `master_seed`.
///
/// Each attempt draws fresh task parameters, surfaces and scene from a seed
/// derived from `(master_seed, index, attempt)`, and is accepted once the
/// surfaces satisfy the variant's capacity conditions. Segregation has no
/// cheap static condition, so its attempts are accepted only when the oracle
/// completes the episode.
pub fn sample_episode(
    master_seed: u64,
    index: u64,
    variant: TaskVariant,
    config: &SamplerConfig,
) -> Result<EpisodeSpec, SamplerError> {
    let boxes = box_count(master_seed, index);
    let episode_seed = rng::derive_seed(master_seed, variant.name(), index);
    let geometry = Geometry::default();
    for attempt in 0..config.max_attempts {
        let seed = rng::derive_seed(episode_seed, "episode/attempt", attempt as u64);
        let task = sample_task(variant, seed, config.template_set);
        let mut r = rng::stream(seed, "episode/surfaces", 0);
        let kinds = sample_kinds(&mut r);
        if !structurally_feasible(&task, &kinds, boxes, &geometry) {
            continue;
        }
        let scene_config = SceneConfig {
            seed,
            num_boxes: boxes,
            num_distractors: r.random_range(0..=config.max_distractors),
            surface_kinds: Some(kinds),
            geometry: geometry.clone(),
            ..SceneConfig::default()
        };
        let scene = match generate_scene(&scene_config) {
            Ok(s) => s,
            Err(SceneGenError::PlacementExhausted(_)) => continue,
            Err(e) => return Err(e.into()),
        };
        if variant == TaskVariant::BoxTypeSegregation && oracle_rollout(&task, &scene).is_err() {
            continue;
        }
        return Ok(EpisodeSpec {
            episode_id: index,
            seed,
            task,
            scene_config,
        });
    }
    Err(SamplerError::Exhausted {
        variant,
        boxes,
        attempts: config.max_attempts,
    })
}
