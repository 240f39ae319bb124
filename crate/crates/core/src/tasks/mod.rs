//! The eleven task variants: parameters, goal templates, and the referee.

mod referee;

pub use referee::{action_valid, final_violations, goal_satisfied, Referee, Verdict, Violation};

use crate::rng;
use crate::warehouse::{BoxColor, SizeClass};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::sync::OnceLock;

/// Versioned template catalog shipped with the crate.
pub const CATALOG_JSON: &str = include_str!("../../data/tasks.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskVariant {
    BasicPlacement,
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

impl TaskVariant {
    pub const ALL: [TaskVariant; 11] = [
        TaskVariant::BasicPlacement,
        TaskVariant::BoxTypePriority,
        TaskVariant::ShelfPriority,
        TaskVariant::PalletPriority,
        TaskVariant::PlacementOrdering,
        TaskVariant::SizePriority,
        TaskVariant::AvoidStacking,
        TaskVariant::HomogeneousStacks,
        TaskVariant::BoxTypeSegregation,
        TaskVariant::FinishStackFirst,
        TaskVariant::BoxAccessibility,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskVariant::BasicPlacement => "basic-placement",
            TaskVariant::BoxTypePriority => "box-type-priority",
            TaskVariant::ShelfPriority => "shelf-priority",
            TaskVariant::PalletPriority => "pallet-priority",
            TaskVariant::PlacementOrdering => "placement-ordering",
            TaskVariant::SizePriority => "size-priority",
            TaskVariant::AvoidStacking => "avoid-stacking",
            TaskVariant::HomogeneousStacks => "homogeneous-stacks",
            TaskVariant::BoxTypeSegregation => "box-type-segregation",
            TaskVariant::FinishStackFirst => "finish-stack-first",
            TaskVariant::BoxAccessibility => "box-accessibility",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == name)
    }

    pub fn uses_color(self) -> bool {
        matches!(
            self,
            TaskVariant::BoxTypePriority | TaskVariant::BoxAccessibility
        )
    }
}

impl fmt::Display for TaskVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    LeftToRight,
    RightToLeft,
}

impl Direction {
    pub fn phrase(self) -> &'static str {
        match self {
            Direction::LeftToRight => "left to right",
            Direction::RightToLeft => "right to left",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateSet {
    Training,
    HeldOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskParams {
    pub max_height: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub priority_color: Option<BoxColor>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub direction: Option<Direction>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub priority_size: Option<SizeClass>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub variant: TaskVariant,
    pub params: TaskParams,
    pub goal_text: String,
    pub template_id: u32,
    pub template_set: TemplateSet,
}

impl TaskInstance {
    /// Goal text with the grounding suffix appended, as fed to a policy.
    pub fn prompt(&self) -> String {
        with_grounding_suffix(&self.goal_text)
    }

    /// Builds an instance from explicit parameters using template `template_id`.
    pub fn new(
        variant: TaskVariant,
        params: TaskParams,
        template_set: TemplateSet,
        template_id: u32,
    ) -> Self {
        let templates = templates(variant, template_set);
        let goal_text = instantiate(&templates[template_id as usize % templates.len()], &params);
        TaskInstance {
            variant,
            params,
            goal_text,
            template_id: template_id % templates.len() as u32,
            template_set,
        }
    }
}

pub fn with_grounding_suffix(text: &str) -> String {
    format!("{} {}", text.trim_end(), catalog().grounding_suffix)
}

#[derive(Debug, Clone, Deserialize)]
pub struct VariantTemplates {
    pub params: Vec<String>,
    pub training: Vec<String>,
    pub heldout: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct TaskCatalog {
    pub version: String,
    pub grounding_suffix: String,
    pub variants: BTreeMap<TaskVariant, VariantTemplates>,
}

pub fn catalog() -> &'static TaskCatalog {
    static CATALOG: OnceLock<TaskCatalog> = OnceLock::new();
    CATALOG.get_or_init(|| serde_json::from_str(CATALOG_JSON).expect("bundled task catalog parses"))
}

pub fn templates(variant: TaskVariant, set: TemplateSet) -> &'static [String] {
    let v = &catalog().variants[&variant];
    match set {
        TemplateSet::Training => &v.training,
        TemplateSet::HeldOut => &v.heldout,
    }
}

/// The three evaluation-only templates of a variant.
pub fn heldout_templates(variant: TaskVariant) -> &'static [String] {
    templates(variant, TemplateSet::HeldOut)
}

pub fn instantiate(template: &str, params: &TaskParams) -> String {
    let mut text = template.replace("{height}", &params.max_height.to_string());
    if let Some(c) = params.priority_color {
        text = text.replace("{color}", c.name());
    }
    if let Some(d) = params.direction {
        text = text.replace("{direction}", d.phrase());
    }
    if let Some(s) = params.priority_size {
        text = text.replace("{size}", s.name());
    }
    text
}

/// Samples parameters and a template for `variant`.
///
/// Draws, in order: max height uniform over {1, 2, 3}; the variant's extra
/// parameter if any (color, direction, or size, uniform); the template index
/// uniform over {0, 1, 2}.
pub fn sample_task(variant: TaskVariant, seed: u64, set: TemplateSet) -> TaskInstance {
    let mut r = rng::stream(seed, "task", 0);
    let max_height = r.random_range(1..=3);
    let mut params = TaskParams {
        max_height,
        priority_color: None,
        direction: None,
        priority_size: None,
    };
    match variant {
        TaskVariant::BoxTypePriority | TaskVariant::BoxAccessibility => {
            params.priority_color = Some(BoxColor::ALL[r.random_range(0..3)]);
        }
        TaskVariant::PlacementOrdering => {
            params.direction = Some(if r.random_bool(0.5) {
                Direction::RightToLeft
            } else {
                Direction::LeftToRight
            });
        }
        TaskVariant::SizePriority => {
            params.priority_size = Some(if r.random_bool(0.5) {
                SizeClass::Large
            } else {
                SizeClass::Small
            });
        }
        _ => {}
    }
    let template_id = r.random_range(0..3);
    TaskInstance::new(variant, params, set, template_id)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_has_three_plus_three_per_variant() {
        let c = catalog();
        assert_eq!(c.variants.len(), 11);
        for v in TaskVariant::ALL {
            let t = &c.variants[&v];
            assert_eq!(t.training.len(), 3, "{v}");
            assert_eq!(t.heldout.len(), 3, "{v}");
            for h in &t.heldout {
                assert!(!t.training.contains(h), "{v}: template reused");
            }
            for tmpl in t.training.iter().chain(&t.heldout) {
                for p in &t.params {
                    assert!(tmpl.contains(&format!("{{{p}}}")), "{v}: {tmpl} lacks {p}");
                }
            }
        }
    }

    #[test]
    fn basic_placement_mentions_height() {
        for seed in 0..20 {
            let t = sample_task(TaskVariant::BasicPlacement, seed, TemplateSet::Training);
            assert!((1..=3).contains(&t.params.max_height));
            assert!(t.goal_text.contains(&t.params.max_height.to_string()));
            assert!(templates(t.variant, TemplateSet::Training)
                .iter()
                .any(|tmpl| instantiate(tmpl, &t.params) == t.goal_text));
        }
    }

    #[test]
    fn figure_caption_reproduces() {
        let params = TaskParams {
            max_height: 2,
            priority_color: None,
            direction: None,
            priority_size: None,
        };
        let t = TaskInstance::new(
            TaskVariant::BasicPlacement,
            params,
            TemplateSet::Training,
            0,
        );
        assert_eq!(
            t.goal_text,
            "Create stacks of boxes up to a maximum height of 2."
        );
        assert_eq!(
            t.prompt(),
            "Create stacks of boxes up to a maximum height of 2. selected pickup box, selected putdown object"
        );
    }

    #[test]
    fn priority_color_sampled_and_mentioned() {
        let mut seen = std::collections::BTreeSet::new();
        for seed in 0..60 {
            let t = sample_task(TaskVariant::BoxTypePriority, seed, TemplateSet::Training);
            let c = t.params.priority_color.unwrap();
            seen.insert(c);
            assert!(t.goal_text.contains(c.name()));
            assert!(t.params.direction.is_none() && t.params.priority_size.is_none());
        }
        assert_eq!(seen.len(), 3);
    }

    #[test]
    fn sampling_is_deterministic_and_every_param_appears() {
        for v in TaskVariant::ALL {
            for seed in 0..10 {
                let a = sample_task(v, seed, TemplateSet::Training);
                assert_eq!(a, sample_task(v, seed, TemplateSet::Training));
                assert!(!a.goal_text.is_empty());
                assert!(!a.goal_text.contains('{'));
                let p = a.params;
                for word in [
                    p.priority_color.map(|c| c.name()),
                    p.direction.map(|d| d.phrase()),
                    p.priority_size.map(|s| s.name()),
                ]
                .into_iter()
                .flatten()
                {
                    assert!(a.goal_text.contains(word), "{v}: {}", a.goal_text);
                }
            }
        }
    }

    #[test]
    fn heldout_templates_share_params() {
        for v in TaskVariant::ALL {
            let train = sample_task(v, 3, TemplateSet::Training);
            let held = sample_task(v, 3, TemplateSet::HeldOut);
            assert_eq!(train.params, held.params);
            assert!(heldout_templates(v)
                .iter()
                .any(|t| instantiate(t, &held.params) == held.goal_text));
            assert!(!templates(v, TemplateSet::Training)
                .iter()
                .any(|t| instantiate(t, &train.params) == held.goal_text));
        }
    }
}
