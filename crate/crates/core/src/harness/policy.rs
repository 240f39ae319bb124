//! Policies the harness can drive.

use super::wire::ExternalPolicy;
use crate::oracle::{oracle_next, valid_candidates, OracleStep};
use crate::pair_select::QueryOutputs;
use crate::perception::{
    gt_action_masks, instance_mask, terminal_masks, ActionMaskPair, LabeledPointCloud, Mask,
};
use crate::rng;
use crate::tasks::{goal_satisfied, TaskInstance};
use crate::warehouse::{EntityId, SceneState};
use rand::Rng;
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Everything a policy may look at for one step. Builtin policies read the
/// privileged `state`; external policies only receive `goal_text` and the
/// cloud.
pub struct Observation<'a> {
    pub episode_id: u64,
    pub episode_seed: u64,
    pub step: u32,
    pub goal_text: &'a str,
    pub task: &'a TaskInstance,
    pub state: &'a SceneState,
    pub cloud: &'a LabeledPointCloud,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolicyOutput {
    Masks(ActionMaskPair),
    Queries(QueryOutputs),
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("policy protocol violation: {0}")]
    Protocol(String),
    #[error("policy failed: {0}")]
    Internal(String),
}

pub trait Policy: Send + Sync {
    fn name(&self) -> String;
    /// Whether the policy reads ground truth beyond the observation.
    fn privileged(&self) -> bool;
    /// Whether steps of different episodes may interleave.
    fn reentrant(&self) -> bool {
        true
    }
    fn act(&self, obs: &Observation<'_>) -> Result<PolicyOutput, PolicyError>;
}

/// Oracle actions rendered as ground-truth masks.
pub struct OraclePolicy;

fn oracle_masks(obs: &Observation<'_>) -> Result<ActionMaskPair, PolicyError> {
    match oracle_next(obs.task, obs.state) {
        Ok(OracleStep::Done) => Ok(terminal_masks(obs.cloud)),
        Ok(OracleStep::Act(choice)) => gt_action_masks(obs.cloud, obs.state, &choice.action)
            .map_err(|e| PolicyError::Internal(e.to_string())),
        // No valid move: offer nothing, which the harness records as a
        // decode failure.
        Err(_) => Ok(ActionMaskPair {
            pick_mask: Mask::empty(obs.cloud.len()),
            target_mask: Mask::empty(obs.cloud.len()),
            done_probability: 0.0,
        }),
    }
}

impl Policy for OraclePolicy {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn privileged(&self) -> bool {
        true
    }

    fn act(&self, obs: &Observation<'_>) -> Result<PolicyOutput, PolicyError> {
        oracle_masks(obs).map(PolicyOutput::Masks)
    }
}

/// Oracle whose pick mask is replaced, with probability `p`, by the mask of
/// a random other instance that is not an unplaced box.
///
/// The corruption draw `u` and the replacement instance come from a stream
/// keyed by `(episode seed, step)` that does not depend on `p`, and a step is
/// corrupted iff `u < p`. Raising `p` therefore only adds corrupted steps.
pub struct NoisyOraclePolicy {
    pub p: f64,
}

impl Policy for NoisyOraclePolicy {
    fn name(&self) -> String {
        format!("noisy:{}", self.p)
    }

    fn privileged(&self) -> bool {
        true
    }

    fn act(&self, obs: &Observation<'_>) -> Result<PolicyOutput, PolicyError> {
        let mut masks = oracle_masks(obs)?;
        if masks.done_probability > 0.5 || masks.pick_mask.is_empty() {
            return Ok(PolicyOutput::Masks(masks));
        }
        let mut r = rng::stream(obs.episode_seed, "policy/noisy", obs.step as u64);
        let u: f64 = r.random();
        let unplaced = obs.state.unplaced_boxes();
        let others: BTreeSet<EntityId> = obs
            .cloud
            .instance
            .iter()
            .copied()
            .filter(|id| !unplaced.contains(id))
            .collect();
        let others: Vec<EntityId> = others.into_iter().collect();
        let pick = others[r.random_range(0..others.len())];
        if u < self.p {
            masks.pick_mask =
                instance_mask(obs.cloud, pick).map_err(|e| PolicyError::Internal(e.to_string()))?;
        }
        Ok(PolicyOutput::Masks(masks))
    }
}

/// Uniformly random valid action. Reads ground truth; never part of
/// headline numbers.
pub struct RandomValidPolicy;

impl Policy for RandomValidPolicy {
    fn name(&self) -> String {
        "random-valid".into()
    }

    fn privileged(&self) -> bool {
        true
    }

    fn act(&self, obs: &Observation<'_>) -> Result<PolicyOutput, PolicyError> {
        if goal_satisfied(obs.task, obs.state) {
            return Ok(PolicyOutput::Masks(terminal_masks(obs.cloud)));
        }
        let candidates = valid_candidates(obs.task, obs.state);
        if candidates.is_empty() {
            return oracle_masks(obs).map(PolicyOutput::Masks);
        }
        let mut r = rng::stream(obs.episode_seed, "policy/random-valid", obs.step as u64);
        let (action, _, _) = &candidates[r.random_range(0..candidates.len())];
        gt_action_masks(obs.cloud, obs.state, action)
            .map(PolicyOutput::Masks)
            .map_err(|e| PolicyError::Internal(e.to_string()))
    }
}

/// Parsed `--policy` value.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicySpec {
    Oracle,
    Noisy(f64),
    RandomValid,
    External(String),
}

impl FromStr for PolicySpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "oracle" => Ok(PolicySpec::Oracle),
            "random-valid" => Ok(PolicySpec::RandomValid),
            _ => {
                if let Some(p) = s.strip_prefix("noisy:") {
                    let p: f64 = p.parse().map_err(|_| format!("bad probability in {s:?}"))?;
                    if !(0.0..=1.0).contains(&p) {
                        return Err(format!("probability {p} outside [0, 1]"));
                    }
                    Ok(PolicySpec::Noisy(p))
                } else if let Some(cmd) = s.strip_prefix("external:") {
                    if cmd.trim().is_empty() {
                        return Err("external policy needs a command".into());
                    }
                    Ok(PolicySpec::External(cmd.to_string()))
                } else {
                    Err(format!(
                        "unknown policy {s:?}; expected oracle, noisy:<p>, random-valid or external:<command>"
                    ))
                }
            }
        }
    }
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicySpec::Oracle => f.write_str("oracle"),
            PolicySpec::Noisy(p) => write!(f, "noisy:{p}"),
            PolicySpec::RandomValid => f.write_str("random-valid"),
            PolicySpec::External(cmd) => write!(f, "external:{cmd}"),
        }
    }
}

impl PolicySpec {
    pub fn build(&self) -> Result<Box<dyn Policy>, PolicyError> {
        Ok(match self {
            PolicySpec::Oracle => Box::new(OraclePolicy),
            PolicySpec::Noisy(p) => Box::new(NoisyOraclePolicy { p: *p }),
            PolicySpec::RandomValid => Box::new(RandomValidPolicy),
            PolicySpec::External(cmd) => Box::new(ExternalPolicy::spawn(cmd, Default::default())?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_policy_specs() {
        assert_eq!("oracle".parse::<PolicySpec>(), Ok(PolicySpec::Oracle));
        assert_eq!(
            "noisy:0.25".parse::<PolicySpec>(),
            Ok(PolicySpec::Noisy(0.25))
        );
        assert_eq!(
            "random-valid".parse::<PolicySpec>(),
            Ok(PolicySpec::RandomValid)
        );
        assert_eq!(
            "external:python3 model.py".parse::<PolicySpec>(),
            Ok(PolicySpec::External("python3 model.py".into()))
        );
        assert!("noisy:1.5".parse::<PolicySpec>().is_err());
        assert!("noisy:x".parse::<PolicySpec>().is_err());
        assert!("human".parse::<PolicySpec>().is_err());
        assert_eq!(PolicySpec::Noisy(0.1).to_string(), "noisy:0.1");
    }
}
