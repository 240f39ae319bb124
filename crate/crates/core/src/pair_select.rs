//! Joint pickup/putdown query selection from per-query head outputs.

use crate::perception::{ActionMaskPair, Mask};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CONFIDENCE_FLOOR: f64 = 1e-12;

/// Head outputs for `Q` queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutputs {
    pub pick_confidence: Vec<f64>,
    pub put_confidence: Vec<f64>,
    /// `q_i`, one row per query.
    pub pick_embedding: Vec<Vec<f64>>,
    /// `k_i`, one row per query.
    pub put_embedding: Vec<Vec<f64>>,
    /// Candidate mask of each query. May be empty when only the pair choice
    /// is of interest.
    #[serde(default)]
    pub masks: Vec<Mask>,
    pub done_probability: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairSelectParams {
    pub top_k: usize,
    pub lambda: f64,
    pub done_threshold: f64,
}

impl Default for PairSelectParams {
    fn default() -> Self {
        PairSelectParams {
            top_k: 5,
            lambda: 1.0,
            done_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairChoice {
    pub pick: usize,
    pub put: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PairError {
    #[error("need at least two queries, got {0}")]
    TooFewQueries(usize),
    #[error("query outputs disagree on shape: {0}")]
    DimensionMismatch(String),
    #[error("non-finite confidence at query {0}")]
    NonFinite(usize),
    #[error("query {0} has no candidate mask")]
    MissingMask(usize),
}

impl QueryOutputs {
    pub fn query_count(&self) -> usize {
        self.pick_confidence.len()
    }

    pub fn validate(&self) -> Result<(), PairError> {
        let q = self.query_count();
        if q < 2 {
            return Err(PairError::TooFewQueries(q));
        }
        if self.put_confidence.len() != q
            || self.pick_embedding.len() != q
            || self.put_embedding.len() != q
        {
            return Err(PairError::DimensionMismatch(format!(
                "{q} pick confidences, {} put confidences, {} pick embeddings, {} put embeddings",
                self.put_confidence.len(),
                self.pick_embedding.len(),
                self.put_embedding.len()
            )));
        }
        let dim = self.pick_embedding[0].len();
        if self
            .pick_embedding
            .iter()
            .chain(&self.put_embedding)
            .any(|e| e.len() != dim)
        {
            return Err(PairError::DimensionMismatch(
                "embedding widths differ".into(),
            ));
        }
        for i in 0..q {
            if !self.pick_confidence[i].is_finite() || !self.put_confidence[i].is_finite() {
                return Err(PairError::NonFinite(i));
            }
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `s[i][j] = <q_i, k_j>`; the diagonal is NaN and never used.
pub fn pair_scores(outputs: &QueryOutputs) -> Result<Vec<Vec<f64>>, PairError> {
    outputs.validate()?;
    let q = outputs.query_count();
    Ok((0..q)
        .map(|i| {
            (0..q)
                .map(|j| {
                    if i == j {
                        f64::NAN
                    } else {
                        dot(&outputs.pick_embedding[i], &outputs.put_embedding[j])
                    }
                })
                .collect()
        })
        .collect())
}

fn log_conf(c: f64) -> f64 {
    c.max(CONFIDENCE_FLOOR).ln()
}

/// Indices of the `k` highest pick confidences, best first; equal
/// confidences keep index order.
pub fn top_pick_candidates(outputs: &QueryOutputs, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..outputs.query_count()).collect();
    idx.sort_by(|&a, &b| {
        outputs.pick_confidence[b]
            .total_cmp(&outputs.pick_confidence[a])
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Combined score of picking query `i` and putting onto query `j`.
pub fn pair_score(outputs: &QueryOutputs, i: usize, j: usize, lambda: f64) -> f64 {
    log_conf(outputs.pick_confidence[i])
        + log_conf(outputs.put_confidence[j])
        + lambda * dot(&outputs.pick_embedding[i], &outputs.put_embedding[j])
}

/// Best `(i, j)`, `i != j`, with `i` among the top-K pick candidates.
/// Equal scores resolve to the lexicographically smallest `(i, j)`.
pub fn select_action_pair(
    outputs: &QueryOutputs,
    params: &PairSelectParams,
) -> Result<PairChoice, PairError> {
    outputs.validate()?;
    let q = outputs.query_count();
    let mut best: Option<PairChoice> = None;
    let mut candidates = top_pick_candidates(outputs, params.top_k.max(1));
    candidates.sort_unstable();
    for &i in &candidates {
        for j in (0..q).filter(|&j| j != i) {
            let score = pair_score(outputs, i, j, params.lambda);
            if best.is_none_or(|b| score > b.score) {
                best = Some(PairChoice {
                    pick: i,
                    put: j,
                    score,
                });
            }
        }
    }
    best.ok_or(PairError::TooFewQueries(q))
}

pub fn decide_done(outputs: &QueryOutputs, threshold: f64) -> bool {
    outputs.done_probability > threshold
}

/// Turns head outputs into the mask pair of the selected queries.
pub fn decode_query_outputs(
    outputs: &QueryOutputs,
    params: &PairSelectParams,
) -> Result<ActionMaskPair, PairError> {
    let choice = select_action_pair(outputs, params)?;
    let mask = |i: usize| {
        outputs
            .masks
            .get(i)
            .cloned()
            .ok_or(PairError::MissingMask(i))
    };
    Ok(ActionMaskPair {
        pick_mask: mask(choice.pick)?,
        target_mask: mask(choice.put)?,
        done_probability: outputs.done_probability,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outputs(pick: &[f64], put: &[f64], q: &[&[f64]], k: &[&[f64]]) -> QueryOutputs {
        QueryOutputs {
            pick_confidence: pick.to_vec(),
            put_confidence: put.to_vec(),
            pick_embedding: q.iter().map(|r| r.to_vec()).collect(),
            put_embedding: k.iter().map(|r| r.to_vec()).collect(),
            masks: Vec::new(),
            done_probability: 0.0,
        }
    }

    #[test]
    fn two_query_example() {
        let o = outputs(
            &[0.9, 0.1],
            &[0.1, 0.9],
            &[&[1.0], &[0.0]],
            &[&[0.0], &[1.0]],
        );
        let c = select_action_pair(&o, &PairSelectParams::default()).unwrap();
        assert_eq!((c.pick, c.put), (0, 1));
        assert!((c.score - (0.9f64.ln() + 0.9f64.ln() + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn scores_are_dot_products() {
        let o = outputs(
            &[0.5, 0.5],
            &[0.5, 0.5],
            &[&[1.0, 0.0], &[0.0, 1.0]],
            &[&[0.0, 3.0], &[2.0, 0.0]],
        );
        let s = pair_scores(&o).unwrap();
        assert_eq!(s[0][1], 2.0);
        assert_eq!(s[1][0], 3.0);
        assert!(s[0][0].is_nan());
        let ortho = outputs(
            &[0.5, 0.5],
            &[0.5, 0.5],
            &[&[1.0, 0.0], &[0.0, 1.0]],
            &[&[1.0, 0.0], &[0.0, 1.0]],
        );
        let s = pair_scores(&ortho).unwrap();
        assert_eq!((s[0][1], s[1][0]), (0.0, 0.0));
    }

    #[test]
    fn four_query_table() {
        let q: [&[f64]; 4] = [&[1.0, 2.0], &[0.5, -1.0], &[-2.0, 0.0], &[3.0, 1.0]];
        let k: [&[f64]; 4] = [&[0.0, 1.0], &[2.0, 2.0], &[1.0, -1.0], &[-1.0, 0.5]];
        let o = outputs(&[0.4, 0.3, 0.2, 0.1], &[0.1, 0.2, 0.3, 0.4], &q, &k);
        let s = pair_scores(&o).unwrap();
        let expected = [
            [f64::NAN, 6.0, -1.0, 0.0],
            [-1.0, f64::NAN, 1.5, -1.0],
            [0.0, -4.0, f64::NAN, 2.0],
            [1.0, 8.0, 2.0, f64::NAN],
        ];
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert_eq!(s[i][j], expected[i][j], "({i},{j})");
                }
            }
        }
    }

    #[test]
    fn lambda_zero_is_independent_argmax() {
        let o = outputs(
            &[0.2, 0.9, 0.5],
            &[0.7, 0.1, 0.6],
            &[&[5.0], &[0.0], &[1.0]],
            &[&[0.0], &[9.0], &[1.0]],
        );
        let p = PairSelectParams {
            lambda: 0.0,
            ..Default::default()
        };
        let c = select_action_pair(&o, &p).unwrap();
        assert_eq!((c.pick, c.put), (1, 0));
    }

    #[test]
    fn zero_confidence_is_clamped() {
        let o = outputs(
            &[0.0, 0.0],
            &[0.0, 0.0],
            &[&[0.0], &[0.0]],
            &[&[0.0], &[0.0]],
        );
        let c = select_action_pair(&o, &PairSelectParams::default()).unwrap();
        assert_eq!((c.pick, c.put), (0, 1));
        assert!((c.score - 2.0 * 1e-12f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn shape_errors() {
        let o = outputs(&[0.5], &[0.5], &[&[0.0]], &[&[0.0]]);
        assert_eq!(
            select_action_pair(&o, &PairSelectParams::default()),
            Err(PairError::TooFewQueries(1))
        );
        let o = outputs(
            &[0.5, 0.5],
            &[0.5, 0.5],
            &[&[0.0], &[0.0, 1.0]],
            &[&[0.0], &[0.0]],
        );
        assert!(matches!(
            pair_scores(&o),
            Err(PairError::DimensionMismatch(_))
        ));
        let o = outputs(
            &[f64::NAN, 0.5],
            &[0.5, 0.5],
            &[&[0.0], &[0.0]],
            &[&[0.0], &[0.0]],
        );
        assert_eq!(pair_scores(&o), Err(PairError::NonFinite(0)));
    }

    #[test]
    fn done_threshold_is_strict() {
        let mut o = outputs(
            &[0.5, 0.5],
            &[0.5, 0.5],
            &[&[0.0], &[0.0]],
            &[&[0.0], &[0.0]],
        );
        for (p, want) in [(0.9, true), (0.5, false), (0.1, false)] {
            o.done_probability = p;
            assert_eq!(decide_done(&o, 0.5), want);
        }
    }
}
