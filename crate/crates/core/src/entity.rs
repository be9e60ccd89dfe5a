//! Entity enhancement: word-vector similarity between proposal categories
//! and the query's subject/object words, the entity attention heads trained
//! against it, candidate filtering and context pooling.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::data::{BBox, UNK_TOKEN};
use crate::error::{Error, Result};
use crate::nn::{argmax, PairScorer};
use crate::visual::{ContextMode, ContextPairs};

/// Fixed word vectors keyed by word, with an `unk` fallback row.
#[derive(Debug, Clone, PartialEq)]
pub struct WordVectorTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
    unk: Vec<f64>,
}

impl WordVectorTable {
    pub fn new(dim: usize, vectors: HashMap<String, Vec<f64>>, unk: Vec<f64>) -> Result<Self> {
        if unk.len() != dim || vectors.values().any(|v| v.len() != dim) {
            return Err(Error::Dimension(format!("word vectors must all have dimension {dim}")));
        }
        if unk.iter().chain(vectors.values().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite word vector".into()));
        }
        Ok(Self { dim, vectors, unk })
    }

    /// One orthogonal unit vector per word; `unk` maps to zeros.
    pub fn one_hot<S: AsRef<str>>(words: &[S]) -> Self {
        let dim = words.len();
        let vectors = words
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let mut v = vec![0.0; dim];
                v[i] = 1.0;
                (w.as_ref().to_string(), v)
            })
            .collect();
        Self {
            dim,
            vectors,
            unk: vec![0.0; dim],
        }
    }

    /// Parses `word v1 v2 … vD` lines. The `<unk>` word, when present,
    /// becomes the fallback row; otherwise the fallback is zero.
    pub fn parse(text: &str) -> Result<Self> {
        let mut vectors = HashMap::new();
        let mut dim = None;
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let v: Vec<f64> = parts
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidRecord {
                    line: i + 1,
                    message: format!("bad word vector value: {e}"),
                })?;
            match dim {
                None => dim = Some(v.len()),
                Some(d) if d != v.len() => {
                    return Err(Error::InvalidRecord {
                        line: i + 1,
                        message: format!("expected {d} values, found {}", v.len()),
                    })
                }
                _ => {}
            }
            vectors.insert(word.to_string(), v);
        }
        let dim = dim.unwrap_or(0);
        let unk = vectors.remove(UNK_TOKEN).unwrap_or_else(|| vec![0.0; dim]);
        Self::new(dim, vectors, unk)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lookup(&self, word: &str) -> &[f64] {
        self.vectors.get(word).unwrap_or(&self.unk)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.vectors.contains_key(word)
    }
}

/// Cosine similarity clamped to `[0, 1]`; zero when either vector has zero norm.
pub fn cosine01(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(0.0, 1.0)
}

/// Similarity between each proposal's category vector and the entity word.
/// All zeros when the query has no such word.
pub fn semantic_similarity(category_vectors: &[&[f64]], entity: Option<&[f64]>) -> Vec<f64> {
    match entity {
        None => vec![0.0; category_vectors.len()],
        Some(e) => category_vectors.iter().map(|c| cosine01(c, e)).collect(),
    }
}

/// Regression target for the entity attention: similarities clamped to
/// `[0, 1]` and L1-normalized; uniform when they are all zero.
pub fn similarity_target(sim: &[f64]) -> Vec<f64> {
    let clamped: Vec<f64> = sim.iter().map(|s| s.clamp(0.0, 1.0)).collect();
    let total: f64 = clamped.iter().sum();
    if total <= 0.0 {
        let n = sim.len().max(1) as f64;
        return vec![1.0 / n; sim.len()];
    }
    clamped.iter().map(|s| s / total).collect()
}

/// MSE between softmaxed entity scores (`1 × N`) and the normalized
/// similarity target.
pub fn entity_supervision_loss(g: &mut Graph, scores: Var, sim: &[f64]) -> Var {
    assert_eq!(g.shape(scores), (1, sim.len()), "score/similarity shape mismatch");
    let target = g.constant(Tensor::row_vector(similarity_target(sim)));
    g.mse(scores, target)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterMode {
    #[default]
    None,
    Soft,
    Hard,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub keep_mask: Vec<bool>,
    /// Multipliers for the final ranking scores (soft mode only).
    pub soft_weights: Option<Vec<f64>>,
}

/// Softmaxed entity attention over the rows of `features` (`N × D`), as a
/// `1 × N` row. Without an entity word the distribution is uniform.
pub fn entity_attention(
    g: &mut Graph,
    scorer: &PairScorer,
    features: Var,
    entity: Option<&[f64]>,
) -> Var {
    let n = g.shape(features).0;
    match entity {
        None => g.constant(Tensor::row_vector(vec![1.0 / n as f64; n])),
        Some(e) => {
            let q = g.constant(Tensor::row_vector(e.to_vec()));
            let logits = scorer.forward(g, q, features);
            g.softmax_rows(logits, None)
        }
    }
}

/// Hard mode keeps proposals whose score is at least `threshold` times the
/// best score, so the best proposal always survives.
pub fn apply_filter(subject_scores: &[f64], mode: FilterMode, threshold: f64) -> FilterOutcome {
    let n = subject_scores.len();
    match mode {
        FilterMode::None => FilterOutcome {
            keep_mask: vec![true; n],
            soft_weights: None,
        },
        FilterMode::Soft => FilterOutcome {
            keep_mask: vec![true; n],
            soft_weights: Some(subject_scores.to_vec()),
        },
        FilterMode::Hard => {
            let best = argmax(subject_scores);
            let max = subject_scores[best];
            let keep_mask = subject_scores
                .iter()
                .enumerate()
                .map(|(i, &s)| i == best || (max > 0.0 && s / max >= threshold))
                .collect();
            FilterOutcome {
                keep_mask,
                soft_weights: None,
            }
        }
    }
}

/// Object scores after the optional distance penalty
/// `score · (1 − d_ij / d_max)`, with `d_max` the image diagonal.
pub fn penalized_scores(
    scores: &[f64],
    target: &BBox,
    candidates: &[BBox],
    image_diagonal: f64,
) -> Vec<f64> {
    scores
        .iter()
        .zip(candidates)
        .map(|(s, b)| s * (1.0 - target.center_distance(b) / image_diagonal))
        .collect()
}

/// Index (into the candidate list) chosen by max pooling.
pub fn max_pool_choice(
    scores: &[f64],
    penalty: Option<(&BBox, &[BBox], f64)>,
) -> usize {
    match penalty {
        Some((t, c, diag)) => argmax(&penalized_scores(scores, t, c, diag)),
        None => argmax(scores),
    }
}

/// Pools one target's candidate context pairs into a `1 × dim` feature.
///
/// `scores` is the target's `1 × M` object attention row. Max pooling modes
/// select a single pair (no gradient flows to the scores); soft pooling takes
/// the score-weighted sum. An empty candidate set gives zeros.
pub fn pool_context(
    g: &mut Graph,
    pairs: &ContextPairs,
    scores: Option<Var>,
    mode: ContextMode,
    penalty: Option<(&BBox, &[BBox], f64)>,
) -> Var {
    let dim = pairs.features.cols;
    let Some(scores) = scores.filter(|_| !pairs.is_empty()) else {
        return g.constant(Tensor::zeros(1, dim));
    };
    match mode {
        ContextMode::SoftAll => {
            let feats = g.constant(pairs.features.clone());
            g.matmul(scores, feats)
        }
        ContextMode::FiveNearest | ContextMode::MaxAll => {
            let k = max_pool_choice(&g.value(scores).data, penalty);
            g.constant(Tensor::row_vector(pairs.features.row(k).to_vec()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::ParamStore;

    #[test]
    fn cosine_cases() {
        assert!((cosine01(&[1.0, 0.0], &[1.0, 1.0]) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(cosine01(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(cosine01(&[0.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(cosine01(&[1.0, 0.0], &[-1.0, 0.0]), 0.0);
        let t = WordVectorTable::one_hot(&["circle", "square"]);
        assert_eq!(cosine01(t.lookup("circle"), t.lookup("circle")), 1.0);
        assert_eq!(semantic_similarity(&[t.lookup("circle")], None), vec![0.0]);
    }

    #[test]
    fn word_vector_file() {
        let t = WordVectorTable::parse("<unk> 0 0.5\ncat 1 0\ndog 0 1\n").unwrap();
        assert_eq!(t.dim(), 2);
        assert_eq!(t.lookup("dog"), &[0.0, 1.0]);
        assert_eq!(t.lookup("zebra"), &[0.0, 0.5]);
        assert!(WordVectorTable::parse("cat 1 0\ndog 1\n").is_err());
        assert!(WordVectorTable::parse("cat 1 x\n").is_err());
    }

    #[test]
    fn supervision_loss_values() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let sc = g.constant(Tensor::row_vector(vec![1.0, 0.0]));
        let l = entity_supervision_loss(&mut g, sc, &[0.3, 0.3]);
        assert!((g.value(l).item() - 0.25).abs() < 1e-12);
        let sc = g.constant(Tensor::row_vector(vec![0.25, 0.75]));
        let l = entity_supervision_loss(&mut g, sc, &[0.2, 0.6]);
        assert!(g.value(l).item().abs() < 1e-15);
        assert_eq!(similarity_target(&[0.0, 0.0]), vec![0.5, 0.5]);
    }

    #[test]
    fn filter_examples() {
        let out = apply_filter(&[0.6, 0.3, 0.1], FilterMode::Hard, 0.6);
        assert_eq!(out.keep_mask, vec![true, false, false]);
        let out = apply_filter(&[0.25; 4], FilterMode::Hard, 0.6);
        assert_eq!(out.keep_mask, vec![true; 4]);
        let out = apply_filter(&[0.6, 0.3, 0.1], FilterMode::Soft, 0.6);
        assert_eq!(out.soft_weights, Some(vec![0.6, 0.3, 0.1]));
        assert_eq!(out.keep_mask, vec![true; 3]);
        let out = apply_filter(&[0.2, 0.8], FilterMode::Hard, 1.0);
        assert_eq!(out.keep_mask, vec![false, true]);
    }

    fn pairs(rows: &[Vec<f64>]) -> ContextPairs {
        ContextPairs {
            indices: (1..=rows.len()).collect(),
            features: Tensor::from_rows(rows, rows[0].len()),
        }
    }

    #[test]
    fn context_pooling_modes() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let p = pairs(&[vec![1.0, 2.0], vec![3.0, 6.0]]);
        let w = g.constant(Tensor::row_vector(vec![0.5, 0.5]));
        let out = pool_context(&mut g, &p, Some(w), ContextMode::SoftAll, None);
        assert_eq!(g.value(out).data, vec![2.0, 4.0]);

        let w = g.constant(Tensor::row_vector(vec![1.0, 0.0]));
        let out = pool_context(&mut g, &p, Some(w), ContextMode::SoftAll, None);
        assert_eq!(g.value(out).data, vec![1.0, 2.0]);

        let w = g.constant(Tensor::row_vector(vec![0.3, 0.7]));
        let out = pool_context(&mut g, &p, Some(w), ContextMode::MaxAll, None);
        assert_eq!(g.value(out).data, vec![3.0, 6.0]);

        let empty = ContextPairs {
            indices: vec![],
            features: Tensor::zeros(0, 2),
        };
        let out = pool_context(&mut g, &empty, None, ContextMode::SoftAll, None);
        assert_eq!(g.value(out).data, vec![0.0, 0.0]);
    }

    #[test]
    fn distance_penalty_prefers_nearby() {
        let t = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let c = [BBox::new(80.0, 80.0, 90.0, 90.0).unwrap(), BBox::new(10.0, 0.0, 20.0, 10.0).unwrap()];
        let diag = 100f64.hypot(100.0);
        assert_eq!(max_pool_choice(&[0.55, 0.45], None), 0);
        assert_eq!(max_pool_choice(&[0.55, 0.45], Some((&t, &c, diag))), 1);
    }
}
