//! Closed-loop and one-step evaluation of policies.

pub mod policy;
pub mod sampler;
pub mod wire;

pub use policy::{
    NoisyOraclePolicy, Observation, OraclePolicy, Policy, PolicyError, PolicyOutput, PolicySpec,
    RandomValidPolicy,
};
pub use sampler::{box_count, sample_episode, Bucket, EpisodeSpec, SamplerConfig, SamplerError};
pub use wire::{ExternalConfig, ExternalPolicy};

use crate::canon;
use crate::oracle::{oracle_rollout, OracleError};
use crate::pair_select::{decode_query_outputs, PairSelectParams};
use crate::perception::{
    filter_mask, freeform_putdown_point, gt_action_masks, mask_iou, mask_to_instance,
    synthesize_cloud, ActionMaskPair, CloudConfig, DbscanParams, LabeledPointCloud,
};
use crate::rng;
use crate::scene_gen::SceneGenError;
use crate::tasks::{action_valid, goal_satisfied, TaskInstance, TaskVariant, Verdict, Violation};
use crate::warehouse::{Action, EntityKind, ExecutionMode, PutdownSlot, SceneState, Vec3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Success,
    InvalidAction,
    WrongDone,
    StepLimit,
    DecodeFailure,
}

impl Outcome {
    pub fn name(self) -> &'static str {
        match self {
            Outcome::Success => "success",
            Outcome::InvalidAction => "invalid-action",
            Outcome::WrongDone => "wrong-done",
            Outcome::StepLimit => "step-limit",
            Outcome::DecodeFailure => "decode-failure",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    PalletCell,
    ShelfCell,
    Box,
}

impl TargetKind {
    pub const ALL: [TargetKind; 3] = [
        TargetKind::PalletCell,
        TargetKind::ShelfCell,
        TargetKind::Box,
    ];

    pub fn of(state: &SceneState, putdown: &PutdownSlot) -> Option<TargetKind> {
        match *putdown {
            PutdownSlot::StackTop { .. } => Some(TargetKind::Box),
            PutdownSlot::FreeCell { surface, .. } => state.surface(surface).map(|s| {
                if s.kind.is_pallet() {
                    TargetKind::PalletCell
                } else {
                    TargetKind::ShelfCell
                }
            }),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TargetKind::PalletCell => "pallet-cell",
            TargetKind::ShelfCell => "shelf-cell",
            TargetKind::Box => "box",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarnessConfig {
    pub cloud: CloudConfig,
    pub dbscan: DbscanParams,
    pub pair: PairSelectParams,
    /// Step cap is the box count plus this slack.
    pub step_slack: u32,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            cloud: CloudConfig::default(),
            dbscan: DbscanParams::default(),
            pair: PairSelectParams::default(),
            step_slack: 5,
        }
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Scene(#[from] SceneGenError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("internal: {0}")]
    Internal(String),
}

/// Result of turning a mask pair into an action and checking it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedStep {
    /// Empty or all-noise mask after filtering.
    pub decode_failure: bool,
    /// Action named by the masks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<Action>,
    /// Action actually carried out once the free-form point is snapped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub executed: Option<Action>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freeform_point: Option<[f64; 3]>,
    pub verdict: Verdict,
}

impl DecodedStep {
    fn failed() -> Self {
        DecodedStep {
            decode_failure: true,
            action: None,
            executed: None,
            freeform_point: None,
            verdict: Verdict::from_violations(Vec::new()).invalid(),
        }
    }

    pub fn valid(&self) -> bool {
        !self.decode_failure && self.verdict.valid
    }
}

impl Verdict {
    fn invalid(mut self) -> Self {
        self.valid = false;
        self
    }
}

/// Filters both masks, decodes the pickup and putdown entities, applies the
/// execution mode, and validates.
pub fn decode_and_validate(
    task: &TaskInstance,
    state: &SceneState,
    cloud: &LabeledPointCloud,
    masks: &ActionMaskPair,
    mode: ExecutionMode,
    config: &HarnessConfig,
) -> DecodedStep {
    let (pick, pick_noise) = filter_mask(cloud, &masks.pick_mask, &config.dbscan);
    let (target, target_noise) = filter_mask(cloud, &masks.target_mask, &config.dbscan);
    if pick_noise || target_noise || pick.is_empty() || target.is_empty() {
        return DecodedStep::failed();
    }
    let (Ok((pick_id, _)), Ok((target_id, _))) = (
        mask_to_instance(cloud, &pick),
        mask_to_instance(cloud, &target),
    ) else {
        return DecodedStep::failed();
    };
    let mut step = DecodedStep {
        decode_failure: false,
        action: None,
        executed: None,
        freeform_point: None,
        verdict: Verdict::from_violations(Vec::new()),
    };
    if state.entity_kind(pick_id) != Some(EntityKind::Box) {
        step.verdict = Verdict::from_violations(vec![Violation::PickupNotABox]);
        return step;
    }
    let putdown = match state.entity_kind(target_id) {
        Some(EntityKind::Box) => PutdownSlot::StackTop { base: target_id },
        Some(EntityKind::Cell(r)) => PutdownSlot::FreeCell {
            surface: r.surface,
            cell: r.cell,
            layer: state.cell(r).map_or(0, |c| c.layer),
        },
        _ => {
            step.verdict = Verdict::from_violations(vec![Violation::TargetNotPlaceable]);
            return step;
        }
    };
    let action = Action {
        pickup: pick_id,
        putdown,
    };
    step.action = Some(action);
    match mode {
        ExecutionMode::SnapToTarget => {
            step.executed = Some(action);
            step.verdict = action_valid(task, state, &action);
        }
        ExecutionMode::FreeForm => {
            let point = match freeform_putdown_point(cloud, &target) {
                Ok(p) => p,
                Err(_) => return DecodedStep::failed(),
            };
            step.freeform_point = Some([point.x, point.y, point.z]);
            match state.resolve_freeform(&putdown, &point) {
                Ok(slot) => {
                    let executed = Action {
                        pickup: pick_id,
                        putdown: slot.putdown,
                    };
                    step.executed = Some(executed);
                    step.verdict = action_valid(task, state, &executed);
                }
                Err(e) => {
                    step.verdict = Verdict::from_violations(vec![Violation::from_scene_error(&e)]);
                }
            }
        }
    }
    step
}

fn policy_masks(
    policy: &dyn Policy,
    obs: &Observation<'_>,
    config: &HarnessConfig,
) -> Result<ActionMaskPair, HarnessError> {
    match policy.act(obs)? {
        PolicyOutput::Masks(m) => Ok(m),
        PolicyOutput::Queries(q) => decode_query_outputs(&q, &config.pair)
            .map_err(|e| PolicyError::Protocol(e.to_string()).into()),
    }
}

pub fn cloud_seed(episode_seed: u64, step: u32) -> u64 {
    rng::derive_seed(episode_seed, "cloud", step as u64)
}

pub fn state_digest(state: &SceneState) -> String {
    canon::digest(state).expect("scene state serializes")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u32,
    /// Seed the observed cloud was synthesized with.
    pub cloud_seed: u64,
    pub cloud_points: usize,
    pub pick_mask_points: usize,
    pub target_mask_points: usize,
    pub done_probability: f64,
    pub done: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoded: Option<DecodedStep>,
    /// Digest of the state after this step.
    pub state_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub spec: EpisodeSpec,
    pub policy: String,
    pub mode: ExecutionMode,
    pub step_cap: u32,
    pub initial_digest: String,
    pub steps: Vec<StepRecord>,
    pub outcome: Outcome,
    pub final_digest: String,
}

impl EpisodeRecord {
    pub fn variant(&self) -> TaskVariant {
        self.spec.task.variant
    }

    pub fn bucket(&self) -> Bucket {
        self.spec.bucket()
    }
}

/// Runs one closed-loop episode. Observations are re-synthesized from the
/// true state after every executed action.
pub fn run_episode(
    spec: &EpisodeSpec,
    policy: &dyn Policy,
    mode: ExecutionMode,
    config: &HarnessConfig,
) -> Result<EpisodeRecord, HarnessError> {
    let mut state = spec.scene()?;
    let task = &spec.task;
    let goal_text = task.prompt();
    let step_cap = spec.num_boxes() + config.step_slack;
    let initial_digest = state_digest(&state);
    let mut steps = Vec::new();
    let outcome = loop {
        let t = steps.len() as u32;
        if t >= step_cap {
            break Outcome::StepLimit;
        }
        let seed = cloud_seed(spec.seed, t);
        let cloud = synthesize_cloud(&state, &config.cloud, seed);
        let obs = Observation {
            episode_id: spec.episode_id,
            episode_seed: spec.seed,
            step: t,
            goal_text: &goal_text,
            task,
            state: &state,
            cloud: &cloud,
        };
        let masks = policy_masks(policy, &obs, config)?;
        let mut record = StepRecord {
            step: t,
            cloud_seed: seed,
            cloud_points: cloud.len(),
            pick_mask_points: masks.pick_mask.count(),
            target_mask_points: masks.target_mask.count(),
            done_probability: masks.done_probability,
            done: masks.done_probability > config.pair.done_threshold,
            decoded: None,
            state_digest: String::new(),
        };
        if record.done {
            record.state_digest = state_digest(&state);
            steps.push(record);
            break if goal_satisfied(task, &state) {
                Outcome::Success
            } else {
                Outcome::WrongDone
            };
        }
        let decoded = decode_and_validate(task, &state, &cloud, &masks, mode, config);
        let result = if decoded.decode_failure {
            Some(Outcome::DecodeFailure)
        } else if !decoded.verdict.valid {
            Some(Outcome::InvalidAction)
        } else {
            let executed = decoded
                .executed
                .expect("valid steps carry an executed action");
            state = state
                .apply_action(&executed, ExecutionMode::SnapToTarget, None)
                .map_err(|e| {
                    HarnessError::Internal(format!("referee accepted an inexecutable action: {e}"))
                })?;
            None
        };
        record.decoded = Some(decoded);
        record.state_digest = state_digest(&state);
        steps.push(record);
        if let Some(outcome) = result {
            break outcome;
        }
    };
    Ok(EpisodeRecord {
        spec: spec.clone(),
        policy: policy.name(),
        mode,
        step_cap,
        initial_digest,
        final_digest: state_digest(&state),
        steps,
        outcome,
    })
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReplayError {
    #[error("scene regeneration failed: {0}")]
    Scene(String),
    #[error("digest mismatch at {at}: recorded {recorded}, replayed {replayed}")]
    Digest {
        at: String,
        recorded: String,
        replayed: String,
    },
    #[error("step {step}: {detail}")]
    Step { step: u32, detail: String },
}

/// Re-executes the recorded actions from the regenerated scene and checks
/// every digest and verdict.
pub fn replay(record: &EpisodeRecord) -> Result<(), ReplayError> {
    let mut state = record
        .spec
        .scene()
        .map_err(|e| ReplayError::Scene(e.to_string()))?;
    let check = |at: String, recorded: &str, state: &SceneState| {
        let replayed = state_digest(state);
        if replayed == recorded {
            Ok(())
        } else {
            Err(ReplayError::Digest {
                at,
                recorded: recorded.to_string(),
                replayed,
            })
        }
    };
    check("initial state".into(), &record.initial_digest, &state)?;
    for s in &record.steps {
        if let Some(d) = &s.decoded {
            if let Some(executed) = &d.executed {
                let verdict = action_valid(&record.spec.task, &state, executed);
                if verdict != d.verdict {
                    return Err(ReplayError::Step {
                        step: s.step,
                        detail: format!(
                            "verdict {:?} differs from recorded {:?}",
                            verdict, d.verdict
                        ),
                    });
                }
                if verdict.valid {
                    state = state
                        .apply_action(executed, ExecutionMode::SnapToTarget, None)
                        .map_err(|e| ReplayError::Step {
                            step: s.step,
                            detail: e.to_string(),
                        })?;
                }
            }
        }
        check(format!("step {}", s.step), &s.state_digest, &state)?;
    }
    check("final state".into(), &record.final_digest, &state)
}

/// One open-loop prediction on a state from the oracle's trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneStepRecord {
    pub episode_id: u64,
    pub variant: TaskVariant,
    pub num_boxes: u32,
    pub step: u32,
    /// Valid under snap-to-target execution.
    pub valid: bool,
    pub violations: Vec<Violation>,
    /// Kind of the oracle's putdown target.
    pub target_kind: TargetKind,
    pub pick_iou: f64,
    pub target_iou: f64,
    /// Distance between the free-form placement and the oracle's insertion
    /// center, present when the free-form decode is valid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placement_error: Option<f64>,
}

impl OneStepRecord {
    pub fn bucket(&self) -> Bucket {
        Bucket::of(self.num_boxes)
    }
}

/// Queries the policy on every state of the oracle rollout of `spec`.
pub fn one_step_eval(
    spec: &EpisodeSpec,
    policy: &dyn Policy,
    config: &HarnessConfig,
) -> Result<Vec<OneStepRecord>, HarnessError> {
    let scene = spec.scene()?;
    let rollout = oracle_rollout(&spec.task, &scene)?;
    let goal_text = spec.task.prompt();
    let mut out = Vec::with_capacity(rollout.steps.len());
    for (t, rs) in rollout.steps.iter().enumerate() {
        let state = &rs.state;
        let cloud = synthesize_cloud(state, &config.cloud, cloud_seed(spec.seed, t as u32));
        let obs = Observation {
            episode_id: spec.episode_id,
            episode_seed: spec.seed,
            step: t as u32,
            goal_text: &goal_text,
            task: &spec.task,
            state,
            cloud: &cloud,
        };
        let masks = policy_masks(policy, &obs, config)?;
        let gt = gt_action_masks(&cloud, state, &rs.choice.action)
            .map_err(|e| HarnessError::Internal(e.to_string()))?;
        let iou = |a, b| mask_iou(a, b).unwrap_or(0.0);
        let snap = decode_and_validate(
            &spec.task,
            state,
            &cloud,
            &masks,
            ExecutionMode::SnapToTarget,
            config,
        );
        let placement_error = if masks.done_probability > config.pair.done_threshold {
            None
        } else {
            let free = decode_and_validate(
                &spec.task,
                state,
                &cloud,
                &masks,
                ExecutionMode::FreeForm,
                config,
            );
            match (free.valid(), free.freeform_point, free.executed) {
                (true, Some(p), Some(executed)) => {
                    let placed = state
                        .resolve_slot(&executed.putdown)
                        .map_err(|e| HarnessError::Internal(e.to_string()))?;
                    let gt_slot = state
                        .resolve_slot(&rs.choice.action.putdown)
                        .map_err(|e| HarnessError::Internal(e.to_string()))?;
                    let predicted = Vec3::new(p[0], p[1], placed.insertion.z);
                    Some((predicted - gt_slot.insertion).norm())
                }
                _ => None,
            }
        };
        let done = masks.done_probability > config.pair.done_threshold;
        out.push(OneStepRecord {
            episode_id: spec.episode_id,
            variant: spec.task.variant,
            num_boxes: spec.num_boxes(),
            step: t as u32,
            valid: !done && snap.valid(),
            violations: snap.verdict.violations.clone(),
            target_kind: TargetKind::of(state, &rs.choice.action.putdown)
                .ok_or_else(|| HarnessError::Internal("oracle target vanished".into()))?,
            pick_iou: iou(&masks.pick_mask, &gt.pick_mask),
            target_iou: iou(&masks.target_mask, &gt.target_mask),
            placement_error,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub master_seed: u64,
    pub scenes_per_variant: u32,
    pub variants: Vec<TaskVariant>,
    pub modes: Vec<ExecutionMode>,
    pub one_step: bool,
    pub harness: HarnessConfig,
    pub sampler: SamplerConfig,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            master_seed: 0,
            scenes_per_variant: 200,
            variants: TaskVariant::ALL.to_vec(),
            modes: vec![ExecutionMode::SnapToTarget, ExecutionMode::FreeForm],
            one_step: true,
            harness: HarnessConfig::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub policy: String,
    pub privileged: bool,
    pub episodes: Vec<EpisodeRecord>,
    pub one_step: Vec<OneStepRecord>,
}

/// Samples the episode grid for `config`, in a fixed order.
pub fn suite_specs(config: &SuiteConfig) -> Result<Vec<EpisodeSpec>, HarnessError> {
    let n = config.scenes_per_variant as u64;
    let jobs: Vec<(usize, TaskVariant, u64)> = config
        .variants
        .iter()
        .enumerate()
        .flat_map(|(vi, &v)| (0..n).map(move |i| (vi, v, i)))
        .collect();
    jobs.par_iter()
        .map(|&(vi, v, i)| {
            let mut spec = sample_episode(config.master_seed, i, v, &config.sampler)?;
            spec.episode_id = vi as u64 * n + i;
            Ok(spec)
        })
        .collect()
}

fn run_all<T: Send, F>(reentrant: bool, n: usize, f: F) -> Result<Vec<T>, HarnessError>
where
    F: Fn(usize) -> Result<T, HarnessError> + Sync + Send,
{
    if reentrant {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

/// Runs every episode of the grid in each mode, plus one-step evaluation.
/// Results are ordered by episode and mode regardless of scheduling.
pub fn evaluate_suite(
    config: &SuiteConfig,
    policy: &dyn Policy,
) -> Result<SuiteResult, HarnessError> {
    let specs = suite_specs(config)?;
    let modes = &config.modes;
    let reentrant = policy.reentrant();
    let episodes = run_all(reentrant, specs.len() * modes.len(), |k| {
        run_episode(
            &specs[k / modes.len()],
            policy,
            modes[k % modes.len()],
            &config.harness,
        )
    })?;
    let one_step = if config.one_step {
        run_all(reentrant, specs.len(), |k| {
            one_step_eval(&specs[k], policy, &config.harness)
        })?
        .into_iter()
        .flatten()
        .collect()
    } else {
        Vec::new()
    };
    Ok(SuiteResult {
        policy: policy.name(),
        privileged: policy.privileged(),
        episodes,
        one_step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(variant: TaskVariant, index: u64) -> EpisodeSpec {
        sample_episode(21, index, variant, &SamplerConfig::default()).unwrap()
    }

    #[test]
    fn oracle_episode_succeeds_in_num_boxes_steps() {
        let cfg = HarnessConfig::default();
        for v in [TaskVariant::BasicPlacement, TaskVariant::FinishStackFirst] {
            let s = spec(v, 0);
            for mode in [ExecutionMode::SnapToTarget, ExecutionMode::FreeForm] {
                let r = run_episode(&s, &OraclePolicy, mode, &cfg).unwrap();
                assert_eq!(r.outcome, Outcome::Success, "{v} {mode:?}");
                assert_eq!(r.steps.len() as u32, s.num_boxes() + 1);
                assert!(r.steps.last().unwrap().done);
                replay(&r).unwrap();
            }
        }
    }

    #[test]
    fn fully_noisy_oracle_fails_first_step() {
        let s = spec(TaskVariant::BasicPlacement, 1);
        let r = run_episode(
            &s,
            &NoisyOraclePolicy { p: 1.0 },
            ExecutionMode::SnapToTarget,
            &HarnessConfig::default(),
        )
        .unwrap();
        assert_eq!(r.outcome, Outcome::InvalidAction);
        assert_eq!(r.steps.len(), 1);
    }

    struct NeverDone;
    impl Policy for NeverDone {
        fn name(&self) -> String {
            "never-done".into()
        }
        fn privileged(&self) -> bool {
            true
        }
        fn act(&self, obs: &Observation<'_>) -> Result<PolicyOutput, PolicyError> {
            let PolicyOutput::Masks(mut m) = OraclePolicy.act(obs)? else {
                unreachable!()
            };
            if m.done_probability > 0.5 {
                // Keep proposing a no-op on an already placed box.
                m.done_probability = 0.0;
            }
            Ok(PolicyOutput::Masks(m))
        }
    }

    #[test]
    fn missing_done_is_not_success() {
        let s = spec(TaskVariant::BasicPlacement, 0);
        let r = run_episode(
            &s,
            &NeverDone,
            ExecutionMode::SnapToTarget,
            &HarnessConfig::default(),
        )
        .unwrap();
        assert_ne!(r.outcome, Outcome::Success);
    }

    #[test]
    fn step_limit_hits_before_done() {
        let s = spec(TaskVariant::BasicPlacement, 0);
        let cfg = HarnessConfig {
            step_slack: 0,
            ..Default::default()
        };
        let r = run_episode(&s, &OraclePolicy, ExecutionMode::SnapToTarget, &cfg).unwrap();
        assert_eq!(r.outcome, Outcome::StepLimit);
        assert_eq!(r.steps.len() as u32, s.num_boxes());
    }

    #[test]
    fn tampered_record_fails_replay() {
        let s = spec(TaskVariant::AvoidStacking, 2);
        let mut r = run_episode(
            &s,
            &OraclePolicy,
            ExecutionMode::SnapToTarget,
            &HarnessConfig::default(),
        )
        .unwrap();
        replay(&r).unwrap();
        r.steps[0].state_digest = "00".into();
        assert!(matches!(replay(&r), Err(ReplayError::Digest { .. })));
    }

    #[test]
    fn oracle_one_step_is_perfect() {
        let s = spec(TaskVariant::BoxAccessibility, 1);
        let recs = one_step_eval(&s, &OraclePolicy, &HarnessConfig::default()).unwrap();
        assert_eq!(recs.len() as u32, s.num_boxes());
        for r in &recs {
            assert!(r.valid);
            assert_eq!((r.pick_iou, r.target_iou), (1.0, 1.0));
            assert!(r.placement_error.unwrap() < 0.05);
        }
    }
}
