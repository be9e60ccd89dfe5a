//! Hierarchical attention: per-cue proposal matching, cue-weighted
//! combination, and argmax selection.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::nn::{argmax, PairScorer};

/// Per-cue matching distribution over proposals as a `1 × N` row.
///
/// Proposals outside `mask` are excluded from the softmax and get exactly
/// zero. `None` features (a cue with nothing to score) give the uniform
/// distribution over the mask.
pub fn cue_matching(
    g: &mut Graph,
    scorer: &PairScorer,
    query: Var,
    features: Option<Var>,
    mask: &[bool],
) -> Var {
    match features {
        Some(f) => {
            let logits = scorer.forward(g, query, f);
            g.softmax_rows(logits, Some(mask))
        }
        None => g.constant(Tensor::row_vector(uniform_over(mask))),
    }
}

pub fn uniform_over(mask: &[bool]) -> Vec<f64> {
    let k = mask.iter().filter(|&&m| m).count() as f64;
    mask.iter().map(|&m| if m { 1.0 / k } else { 0.0 }).collect()
}

/// `S_t = w_s s_s + w_l s_l + w_c s_c`, optionally multiplied elementwise by
/// the soft-filter weights.
pub fn combine(g: &mut Graph, cue_scores: [Var; 3], weights: Var, soft_filter: Option<Var>) -> Var {
    let mut total = None;
    for (k, &s) in cue_scores.iter().enumerate() {
        let w = g.slice_cols(weights, k, 1);
        let term = g.scale_by(w, s);
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term),
        });
    }
    let total = total.expect("three cues");
    match soft_filter {
        Some(f) => g.mul(total, f),
        None => total,
    }
}

/// Plain-value version of [`combine`] followed by selection.
pub fn combine_values(
    cue_scores: [&[f64]; 3],
    weights: [f64; 3],
    soft_filter: Option<&[f64]>,
) -> (Vec<f64>, usize) {
    let n = cue_scores[0].len();
    let scores: Vec<f64> = (0..n)
        .map(|i| {
            let s = weights[0] * cue_scores[0][i]
                + weights[1] * cue_scores[1][i]
                + weights[2] * cue_scores[2][i];
            soft_filter.map_or(s, |f| s * f[i])
        })
        .collect();
    let selected = argmax(&scores);
    (scores, selected)
}

/// Inference output for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingResult {
    pub cue_scores: [Vec<f64>; 3],
    pub cue_weights: [f64; 3],
    pub final_scores: Vec<f64>,
    pub selected: usize,
    pub subject_scores: Vec<f64>,
    pub keep_mask: Vec<bool>,
}
