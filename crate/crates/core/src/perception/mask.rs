//! Binary masks over a point cloud and the decoders that map them back to
//! scene entities.

use super::cloud::LabeledPointCloud;
use crate::warehouse::{Action, CellRef, EntityId, PutdownSlot, SceneState, Vec3};
use fixedbitset::FixedBitSet;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MaskError {
    #[error("entity {0} has no points in the cloud")]
    EntityAbsent(EntityId),
    #[error("putdown names an unknown cell")]
    UnknownTarget,
    #[error("mask is empty")]
    Empty,
    #[error("both masks are empty")]
    BothEmpty,
    #[error("mask length {mask} does not match cloud of {cloud} points")]
    LengthMismatch { mask: usize, cloud: usize },
    #[error("run-length encoding covers {got} bits, expected {expected}")]
    BadRle { got: u64, expected: u64 },
}

/// A subset of cloud points, stored as a bitset.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask(FixedBitSet);

/// Serialized form: alternating run lengths, starting with a run of zeros
/// (possibly of length 0).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub len: u64,
    pub runs: Vec<u32>,
}

impl Mask {
    pub fn empty(len: usize) -> Self {
        Mask(FixedBitSet::with_capacity(len))
    }

    pub fn from_indices(len: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut bits = FixedBitSet::with_capacity(len);
        for i in indices {
            bits.insert(i);
        }
        Mask(bits)
    }

    pub fn from_predicate(len: usize, mut f: impl FnMut(usize) -> bool) -> Self {
        Mask::from_indices(len, (0..len).filter(|&i| f(i)))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn count(&self) -> usize {
        self.0.count_ones(..)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_clear()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0.contains(i)
    }

    pub fn insert(&mut self, i: usize) {
        self.0.insert(i);
    }

    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.ones()
    }

    pub fn bits(&self) -> &FixedBitSet {
        &self.0
    }

    pub fn union(&self, other: &Mask) -> Mask {
        let mut bits = self.0.clone();
        bits.union_with(&other.0);
        Mask(bits)
    }

    pub fn intersection_count(&self, other: &Mask) -> usize {
        self.0.intersection_count(&other.0)
    }

    pub fn to_rle(&self) -> RleMask {
        let mut runs = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for i in 0..self.len() {
            let bit = self.0.contains(i);
            if bit != current {
                runs.push(run);
                run = 0;
                current = bit;
            }
            run += 1;
        }
        runs.push(run);
        RleMask {
            len: self.len() as u64,
            runs,
        }
    }

    pub fn from_rle(rle: &RleMask) -> Result<Mask, MaskError> {
        let total: u64 = rle.runs.iter().map(|&r| r as u64).sum();
        if total != rle.len {
            return Err(MaskError::BadRle {
                got: total,
                expected: rle.len,
            });
        }
        let mut bits = FixedBitSet::with_capacity(rle.len as usize);
        let mut at = 0usize;
        for (k, &run) in rle.runs.iter().enumerate() {
            if k % 2 == 1 {
                bits.insert_range(at..at + run as usize);
            }
            at += run as usize;
        }
        Ok(Mask(bits))
    }

    pub fn check_len(&self, cloud: &LabeledPointCloud) -> Result<(), MaskError> {
        if self.len() == cloud.len() {
            Ok(())
        } else {
            Err(MaskError::LengthMismatch {
                mask: self.len(),
                cloud: cloud.len(),
            })
        }
    }
}

impl Serialize for Mask {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_rle().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Mask {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rle = RleMask::deserialize(d)?;
        Mask::from_rle(&rle).map_err(serde::de::Error::custom)
    }
}

/// The two masks and termination probability that define one action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionMaskPair {
    pub pick_mask: Mask,
    pub target_mask: Mask,
    pub done_probability: f64,
}

pub fn instance_mask(cloud: &LabeledPointCloud, id: EntityId) -> Result<Mask, MaskError> {
    let m = Mask::from_predicate(cloud.len(), |i| cloud.instance[i] == id);
    if m.is_empty() {
        Err(MaskError::EntityAbsent(id))
    } else {
        Ok(m)
    }
}

/// Entity whose points form the target region of `putdown`: the cell for a
/// free cell, the base box for a stack top.
pub fn putdown_entity(state: &SceneState, putdown: &PutdownSlot) -> Result<EntityId, MaskError> {
    match *putdown {
        PutdownSlot::FreeCell { surface, cell, .. } => state
            .cell(CellRef { surface, cell })
            .map(|c| c.id)
            .ok_or(MaskError::UnknownTarget),
        PutdownSlot::StackTop { base } => Ok(base),
    }
}

pub fn gt_action_masks(
    cloud: &LabeledPointCloud,
    state: &SceneState,
    action: &Action,
) -> Result<ActionMaskPair, MaskError> {
    Ok(ActionMaskPair {
        pick_mask: instance_mask(cloud, action.pickup)?,
        target_mask: instance_mask(cloud, putdown_entity(state, &action.putdown)?)?,
        done_probability: 0.0,
    })
}

/// Masks for a terminal sample: both empty, done probability one.
pub fn terminal_masks(cloud: &LabeledPointCloud) -> ActionMaskPair {
    ActionMaskPair {
        pick_mask: Mask::empty(cloud.len()),
        target_mask: Mask::empty(cloud.len()),
        done_probability: 1.0,
    }
}

/// Instance covered best by `mask`, as a fraction of that instance's points.
/// Ties resolve to the lowest instance id.
pub fn mask_to_instance(
    cloud: &LabeledPointCloud,
    mask: &Mask,
) -> Result<(EntityId, f64), MaskError> {
    mask.check_len(cloud)?;
    if mask.is_empty() {
        return Err(MaskError::Empty);
    }
    let mut totals: BTreeMap<EntityId, (usize, usize)> = BTreeMap::new();
    for (i, &id) in cloud.instance.iter().enumerate() {
        let e = totals.entry(id).or_default();
        e.1 += 1;
        if mask.contains(i) {
            e.0 += 1;
        }
    }
    let mut best: Option<(EntityId, usize, usize)> = None;
    for (&id, &(hit, total)) in &totals {
        if hit == 0 {
            continue;
        }
        // hit / total > bh / bt, compared exactly
        let better = match best {
            None => true,
            Some((_, bh, bt)) => (hit as u128) * (bt as u128) > (bh as u128) * (total as u128),
        };
        if better {
            best = Some((id, hit, total));
        }
    }
    let (id, hit, total) = best.expect("nonempty mask hits some instance");
    Ok((id, hit as f64 / total as f64))
}

/// Mean of the masked points.
pub fn mask_centroid(cloud: &LabeledPointCloud, mask: &Mask) -> Result<Vec3, MaskError> {
    mask.check_len(cloud)?;
    let mut sum = Vec3::zeros();
    let mut n = 0usize;
    for i in mask.ones() {
        sum += cloud.point(i);
        n += 1;
    }
    if n == 0 {
        return Err(MaskError::Empty);
    }
    Ok(sum / n as f64)
}

pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64, MaskError> {
    if a.len() != b.len() {
        return Err(MaskError::LengthMismatch {
            mask: a.len(),
            cloud: b.len(),
        });
    }
    let inter = a.intersection_count(b);
    let union = a.count() + b.count() - inter;
    if union == 0 {
        return Err(MaskError::BothEmpty);
    }
    Ok(inter as f64 / union as f64)
}
