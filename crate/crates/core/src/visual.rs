//! Per-proposal cue features: subject pass-through, the 30-dim location
//! feature, and candidate context pairs.

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::data::{BBox, Scene};

pub const ABS_LOC_DIM: usize = 5;
pub const REL_SLOTS: usize = 5;
pub const LOCATION_DIM: usize = ABS_LOC_DIM + 5 * REL_SLOTS;

/// How candidate context proposals are chosen and pooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextMode {
    /// Five nearest proposals of a different category, max pooled.
    #[serde(rename = "5cxtp")]
    FiveNearest,
    /// All other proposals, max pooled by object attention.
    #[serde(rename = "mcxtp")]
    MaxAll,
    /// All other proposals, pooled as the attention-weighted sum.
    #[serde(rename = "scxtp")]
    SoftAll,
}

impl ContextMode {
    pub fn is_max_pooling(self) -> bool {
        !matches!(self, ContextMode::SoftAll)
    }
}

/// Location part appended to each context pair feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ContextLocation {
    /// Offsets of the context proposal relative to the target.
    #[default]
    Relative,
    /// Absolute location of the context proposal.
    Absolute,
    /// Both of the above.
    Concat,
}

impl ContextLocation {
    pub fn dim(self) -> usize {
        match self {
            ContextLocation::Relative | ContextLocation::Absolute => 5,
            ContextLocation::Concat => 10,
        }
    }
}

/// `[x_tl/W, y_tl/H, x_br/W, y_br/H, wh/(WH)]`.
pub fn encode_absolute_location(b: &BBox, width: f64, height: f64) -> [f64; 5] {
    [
        b.x_tl() / width,
        b.y_tl() / height,
        b.x_br() / width,
        b.y_br() / height,
        b.area() / (width * height),
    ]
}

/// Offsets of `other` relative to `target`, normalized by the target size,
/// plus the area ratio. Differences are taken as other minus target.
pub fn relative_offset(target: &BBox, other: &BBox) -> [f64; 5] {
    let w = target.width();
    let h = target.height();
    [
        (other.x_tl() - target.x_tl()) / w,
        (other.y_tl() - target.y_tl()) / h,
        (other.x_br() - target.x_br()) / w,
        (other.y_br() - target.y_br()) / h,
        other.area() / target.area(),
    ]
}

/// Indices of proposals other than `target` that satisfy `keep`, ordered by
/// center distance to the target (ties by index).
pub fn nearest_others(
    target: usize,
    boxes: &[BBox],
    keep: impl Fn(usize) -> bool,
) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..boxes.len()).filter(|&j| j != target && keep(j)).collect();
    let t = &boxes[target];
    idx.sort_by(|&a, &b| {
        t.center_distance(&boxes[a])
            .total_cmp(&t.center_distance(&boxes[b]))
            .then(a.cmp(&b))
    });
    idx
}

/// Offsets to the five nearest same-category proposals, zero padded.
pub fn encode_relative_location(target: usize, boxes: &[BBox], categories: &[usize]) -> [f64; 25] {
    let mut out = [0.0; 25];
    let same = nearest_others(target, boxes, |j| categories[j] == categories[target]);
    for (slot, &j) in same.iter().take(REL_SLOTS).enumerate() {
        out[slot * 5..slot * 5 + 5].copy_from_slice(&relative_offset(&boxes[target], &boxes[j]));
    }
    out
}

/// Absolute and relative location concatenated into the 30-dim feature.
pub fn encode_location(
    target: usize,
    boxes: &[BBox],
    categories: &[usize],
    width: f64,
    height: f64,
) -> [f64; LOCATION_DIM] {
    let mut out = [0.0; LOCATION_DIM];
    out[..5].copy_from_slice(&encode_absolute_location(&boxes[target], width, height));
    out[5..].copy_from_slice(&encode_relative_location(target, boxes, categories));
    out
}

/// Candidate context proposals for one target: one row `[v_ij ; location]`
/// per candidate `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextPairs {
    pub indices: Vec<usize>,
    /// `M × (D_v + location dim)`; `0 × dim` when there is no candidate.
    pub features: Tensor,
}

impl ContextPairs {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

pub fn context_candidates(target: usize, scene: &Scene, mode: ContextMode) -> Vec<usize> {
    let boxes = scene.boxes();
    match mode {
        ContextMode::FiveNearest => {
            let cat = scene.proposals[target].category;
            let mut idx = nearest_others(target, &boxes, |j| scene.proposals[j].category != cat);
            idx.truncate(5);
            idx
        }
        ContextMode::MaxAll | ContextMode::SoftAll => {
            (0..scene.len()).filter(|&j| j != target).collect()
        }
    }
}

pub fn assemble_context_pairs(
    target: usize,
    scene: &Scene,
    mode: ContextMode,
    location: ContextLocation,
) -> ContextPairs {
    let indices = context_candidates(target, scene, mode);
    let dv = scene.proposals[target].context_feature.len();
    let dim = dv + location.dim();
    let t = &scene.proposals[target].bbox;
    let rows: Vec<Vec<f64>> = indices
        .iter()
        .map(|&j| {
            let p = &scene.proposals[j];
            let mut row = p.context_feature.clone();
            match location {
                ContextLocation::Relative => row.extend(relative_offset(t, &p.bbox)),
                ContextLocation::Absolute => {
                    row.extend(encode_absolute_location(&p.bbox, scene.width, scene.height))
                }
                ContextLocation::Concat => {
                    row.extend(relative_offset(t, &p.bbox));
                    row.extend(encode_absolute_location(&p.bbox, scene.width, scene.height));
                }
            }
            row
        })
        .collect();
    ContextPairs {
        indices,
        features: Tensor::from_rows(&rows, dim),
    }
}

/// All visual cue inputs of one scene.
#[derive(Debug, Clone)]
pub struct CueFeatures {
    /// `N × D_s`
    pub subject: Tensor,
    /// `N × 30`
    pub location: Tensor,
    pub context_pairs: Vec<ContextPairs>,
    pub context_dim: usize,
}

impl CueFeatures {
    pub fn build(scene: &Scene, mode: ContextMode, location: ContextLocation) -> Self {
        let n = scene.len();
        let ds = scene.proposals[0].subject_feature.len();
        let dv = scene.proposals[0].context_feature.len();
        let boxes = scene.boxes();
        let cats = scene.categories();
        let subject: Vec<Vec<f64>> = scene.proposals.iter().map(|p| p.subject_feature.clone()).collect();
        let loc: Vec<Vec<f64>> = (0..n)
            .map(|i| encode_location(i, &boxes, &cats, scene.width, scene.height).to_vec())
            .collect();
        Self {
            subject: Tensor::from_rows(&subject, ds),
            location: Tensor::from_rows(&loc, LOCATION_DIM),
            context_pairs: (0..n)
                .map(|i| assemble_context_pairs(i, scene, mode, location))
                .collect(),
            context_dim: dv + location.dim(),
        }
    }

    pub fn len(&self) -> usize {
        self.subject.rows
    }

    pub fn is_empty(&self) -> bool {
        self.subject.rows == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Proposal, Query};
    use std::collections::BTreeSet;

    fn bx(c: [f64; 4]) -> BBox {
        BBox::try_from(c).unwrap()
    }

    fn scene(boxes: &[[f64; 4]], cats: &[usize]) -> Scene {
        Scene {
            width: 100.0,
            height: 100.0,
            proposals: boxes
                .iter()
                .zip(cats)
                .enumerate()
                .map(|(i, (b, &c))| Proposal {
                    bbox: bx(*b),
                    category: c,
                    subject_feature: vec![i as f64],
                    context_feature: vec![i as f64, 1.0],
                })
                .collect(),
            queries: vec![Query::new(vec![1], None, None, BTreeSet::new(), None)],
        }
    }

    #[test]
    fn absolute_location_examples() {
        let v = encode_absolute_location(&bx([10.0, 20.0, 30.0, 60.0]), 100.0, 100.0);
        let want = [0.1, 0.2, 0.3, 0.6, 0.08];
        for (a, b) in v.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(
            encode_absolute_location(&bx([0.0, 0.0, 100.0, 100.0]), 100.0, 100.0),
            [0.0, 0.0, 1.0, 1.0, 1.0]
        );
        assert_eq!(
            encode_absolute_location(&bx([0.0, 0.0, 50.0, 100.0]), 100.0, 100.0),
            [0.0, 0.0, 0.5, 1.0, 0.5]
        );
    }

    #[test]
    fn relative_location_examples() {
        let boxes = [bx([0.0, 0.0, 10.0, 10.0]), bx([50.0, 50.0, 60.0, 60.0])];
        assert_eq!(encode_relative_location(0, &boxes, &[0, 1]), [0.0; 25]);

        let twins = [bx([0.0, 0.0, 10.0, 10.0]), bx([0.0, 0.0, 10.0, 10.0])];
        let r = encode_relative_location(0, &twins, &[3, 3]);
        assert_eq!(&r[..5], &[0.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(r[5..].iter().all(|&v| v == 0.0));

        let pair = [bx([0.0, 0.0, 10.0, 10.0]), bx([10.0, 0.0, 20.0, 10.0])];
        let r = encode_relative_location(0, &pair, &[1, 1]);
        assert_eq!(&r[..5], &[1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn relative_slots_in_distance_order() {
        let boxes = [
            bx([0.0, 0.0, 10.0, 10.0]),
            bx([40.0, 0.0, 50.0, 10.0]),
            bx([20.0, 0.0, 30.0, 10.0]),
        ];
        let r = encode_relative_location(0, &boxes, &[0, 0, 0]);
        assert_eq!(r[0], 2.0);
        assert_eq!(r[5], 4.0);
    }

    #[test]
    fn context_pair_sets() {
        let single = scene(&[[0.0, 0.0, 10.0, 10.0]], &[0]);
        let p = assemble_context_pairs(0, &single, ContextMode::SoftAll, ContextLocation::Relative);
        assert!(p.is_empty());
        assert_eq!(p.features.shape(), (0, 7));

        let three = scene(
            &[[0.0, 0.0, 10.0, 10.0], [20.0, 0.0, 30.0, 10.0], [50.0, 50.0, 60.0, 70.0]],
            &[0, 0, 1],
        );
        let p = assemble_context_pairs(0, &three, ContextMode::SoftAll, ContextLocation::Relative);
        assert_eq!(p.indices, vec![1, 2]);
        assert_eq!(p.features.row(0), &[1.0, 1.0, 2.0, 0.0, 2.0, 0.0, 1.0]);
        let p = assemble_context_pairs(0, &three, ContextMode::FiveNearest, ContextLocation::Relative);
        assert_eq!(p.indices, vec![2]);
        let p = assemble_context_pairs(0, &three, ContextMode::MaxAll, ContextLocation::Concat);
        assert_eq!(p.features.cols, 12);
    }

    #[test]
    fn five_nearest_different_category() {
        // target 0 in category 0; six others of category 1 at increasing distance
        let mut boxes = vec![[0.0, 0.0, 5.0, 5.0], [5.0, 80.0, 10.0, 85.0]];
        let mut cats = vec![0, 0];
        for k in 0..6 {
            let x = 10.0 + 12.0 * k as f64;
            boxes.push([x, 0.0, x + 5.0, 5.0]);
            cats.push(1);
        }
        let s = scene(&boxes, &cats);
        let p = assemble_context_pairs(0, &s, ContextMode::FiveNearest, ContextLocation::Relative);
        assert_eq!(p.indices, vec![2, 3, 4, 5, 6]);
    }
}
