//! Scenes, proposals, queries, boxes, and the JSON Lines dataset format.
//!
//! Line 1 of a dataset file is a header carrying the vocabularies and
//! feature dimensions; every following line is one scene.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved id for out-of-vocabulary words. `vocab[0]` must be [`UNK_TOKEN`].
pub const UNK: usize = 0;
pub const UNK_TOKEN: &str = "<unk>";
pub const DEFAULT_MAX_LEN: usize = 20;

/// Axis-aligned box in pixel coordinates, stored as top-left and bottom-right
/// corners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x_tl: f64,
    y_tl: f64,
    x_br: f64,
    y_br: f64,
}

impl BBox {
    pub fn new(x_tl: f64, y_tl: f64, x_br: f64, y_br: f64) -> Result<Self> {
        let c = [x_tl, y_tl, x_br, y_br];
        if c.iter().any(|v| !v.is_finite()) || x_br <= x_tl || y_br <= y_tl {
            return Err(Error::InvalidBox(c));
        }
        Ok(Self {
            x_tl,
            y_tl,
            x_br,
            y_br,
        })
    }

    pub fn x_tl(&self) -> f64 {
        self.x_tl
    }
    pub fn y_tl(&self) -> f64 {
        self.y_tl
    }
    pub fn x_br(&self) -> f64 {
        self.x_br
    }
    pub fn y_br(&self) -> f64 {
        self.y_br
    }
    pub fn width(&self) -> f64 {
        self.x_br - self.x_tl
    }
    pub fn height(&self) -> f64 {
        self.y_br - self.y_tl
    }
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_tl + self.x_br), 0.5 * (self.y_tl + self.y_br))
    }

    pub fn center_distance(&self, other: &BBox) -> f64 {
        let (ax, ay) = self.center();
        let (bx, by) = other.center();
        (ax - bx).hypot(ay - by)
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x_tl >= 0.0 && self.y_tl >= 0.0 && self.x_br <= width && self.y_br <= height
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x_tl, self.y_tl, self.x_br, self.y_br]
    }

    /// Shifted copy. The result is valid whenever `self` is.
    pub fn translated(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x_tl: self.x_tl + dx,
            y_tl: self.y_tl + dy,
            x_br: self.x_br + dx,
            y_br: self.y_br + dy,
        }
    }

    /// Copy scaled about the origin by `k > 0`.
    pub fn scaled(&self, k: f64) -> BBox {
        assert!(k > 0.0);
        BBox {
            x_tl: self.x_tl * k,
            y_tl: self.y_tl * k,
            x_br: self.x_br * k,
            y_br: self.y_br * k,
        }
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;
    fn try_from(c: [f64; 4]) -> Result<Self> {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.corners()
    }
}

/// Intersection over union of two boxes, in `[0, 1]`.
pub fn compute_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_br.min(b.x_br) - a.x_tl.max(b.x_tl)).max(0.0);
    let ih = (a.y_br.min(b.y_br) - a.y_tl.max(b.y_tl)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub category: usize,
    pub subject_feature: Vec<f64>,
    pub context_feature: Vec<f64>,
}

/// Synthetic query templates, used for per-type evaluation breakdowns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryKind {
    Subject,
    Location,
    Context,
}

impl QueryKind {
    pub const ALL: [QueryKind; 3] = [QueryKind::Subject, QueryKind::Location, QueryKind::Context];

    pub fn name(self) -> &'static str {
        match self {
            QueryKind::Subject => "subject",
            QueryKind::Location => "location",
            QueryKind::Context => "context",
        }
    }
}

/// A referring expression with its parsed fields. The ground-truth index is
/// only reachable through [`Query::gt_index`]; training code works on
/// [`QueryView`]s, which do not carry it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub tokens: Vec<usize>,
    pub subject_word: Option<usize>,
    pub object_word: Option<usize>,
    #[serde(rename = "attributes")]
    pub attribute_labels: BTreeSet<usize>,
    gt_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<QueryKind>,
}

/// The weakly supervised view of a query: everything but the referent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryView<'a> {
    pub tokens: &'a [usize],
    pub subject_word: Option<usize>,
    pub object_word: Option<usize>,
    pub attribute_labels: &'a BTreeSet<usize>,
}

impl Query {
    pub fn new(
        tokens: Vec<usize>,
        subject_word: Option<usize>,
        object_word: Option<usize>,
        attribute_labels: BTreeSet<usize>,
        gt_index: Option<usize>,
    ) -> Self {
        Self {
            tokens,
            subject_word,
            object_word,
            attribute_labels,
            gt_index,
            kind: None,
        }
    }

    pub fn with_kind(mut self, kind: QueryKind) -> Self {
        self.kind = Some(kind);
        self
    }

    /// Evaluation only.
    pub fn gt_index(&self) -> Option<usize> {
        self.gt_index
    }

    pub fn set_gt_index(&mut self, gt: Option<usize>) {
        self.gt_index = gt;
    }

    pub fn view(&self) -> QueryView<'_> {
        QueryView {
            tokens: &self.tokens,
            subject_word: self.subject_word,
            object_word: self.object_word,
            attribute_labels: &self.attribute_labels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub width: f64,
    pub height: f64,
    pub proposals: Vec<Proposal>,
    pub queries: Vec<Query>,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.proposals.iter().map(|p| p.bbox).collect()
    }

    pub fn categories(&self) -> Vec<usize> {
        self.proposals.iter().map(|p| p.category).collect()
    }

    pub fn query_views(&self) -> Vec<QueryView<'_>> {
        self.queries.iter().map(Query::view).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub subject: usize,
    pub context: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub vocab: Vec<String>,
    pub attribute_vocab: Vec<String>,
    pub categories: Vec<String>,
    pub feature_dims: FeatureDims,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    /// Per-attribute label counts over the dataset's queries.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute_counts: Option<Vec<usize>>,
}

fn default_max_len() -> usize {
    DEFAULT_MAX_LEN
}

impl DatasetHeader {
    pub fn token_id(&self, word: &str) -> usize {
        self.vocab.iter().position(|w| w == word).unwrap_or(UNK)
    }

    /// Maps words to ids, sending unknown words to [`UNK`].
    pub fn encode(&self, words: &[&str]) -> Vec<usize> {
        words.iter().map(|w| self.token_id(w)).collect()
    }

    pub fn decode(&self, tokens: &[usize]) -> Vec<&str> {
        tokens
            .iter()
            .map(|&t| self.vocab.get(t).map_or(UNK_TOKEN, String::as_str))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn num_queries(&self) -> usize {
        self.scenes.iter().map(|s| s.queries.len()).sum()
    }

    /// Counts how often each attribute label appears across all queries.
    pub fn count_attributes(&self) -> Vec<usize> {
        let mut counts = vec![0; self.header.attribute_vocab.len()];
        for q in self.scenes.iter().flat_map(|s| &s.queries) {
            for &a in &q.attribute_labels {
                counts[a] += 1;
            }
        }
        counts
    }

    /// Header counts when present, otherwise counted from the scenes.
    pub fn attribute_counts(&self) -> Vec<usize> {
        self.header
            .attribute_counts
            .clone()
            .unwrap_or_else(|| self.count_attributes())
    }

    pub fn validate(&self) -> Result<()> {
        validate_header(&self.header, 1)?;
        for (i, s) in self.scenes.iter().enumerate() {
            validate_scene(&self.header, s, i + 2)?;
        }
        Ok(())
    }
}

fn invalid(line: usize, message: impl Into<String>) -> Error {
    Error::InvalidRecord {
        line,
        message: message.into(),
    }
}

fn validate_header(h: &DatasetHeader, line: usize) -> Result<()> {
    if h.vocab.first().map(String::as_str) != Some(UNK_TOKEN) {
        return Err(invalid(line, format!("vocab[0] must be `{UNK_TOKEN}`")));
    }
    if h.categories.is_empty() {
        return Err(invalid(line, "no categories"));
    }
    if h.max_len == 0 {
        return Err(invalid(line, "max_len must be positive"));
    }
    if let Some(c) = &h.attribute_counts {
        if c.len() != h.attribute_vocab.len() {
            return Err(invalid(line, "attribute_counts length differs from attribute_vocab"));
        }
    }
    Ok(())
}

fn validate_scene(h: &DatasetHeader, s: &Scene, line: usize) -> Result<()> {
    if !(s.width.is_finite() && s.height.is_finite() && s.width > 0.0 && s.height > 0.0) {
        return Err(invalid(line, "image dimensions must be positive"));
    }
    if s.proposals.is_empty() {
        return Err(invalid(line, "scene has no proposals"));
    }
    if s.queries.is_empty() {
        return Err(invalid(line, "scene has no queries"));
    }
    for (i, p) in s.proposals.iter().enumerate() {
        if !p.bbox.within(s.width, s.height) {
            return Err(invalid(line, format!("proposal {i} box lies outside the image")));
        }
        if p.category >= h.categories.len() {
            return Err(invalid(line, format!("proposal {i} category {} out of range", p.category)));
        }
        if p.subject_feature.len() != h.feature_dims.subject {
            return Err(invalid(
                line,
                format!(
                    "proposal {i} subject feature has dim {}, expected {}",
                    p.subject_feature.len(),
                    h.feature_dims.subject
                ),
            ));
        }
        if p.context_feature.len() != h.feature_dims.context {
            return Err(invalid(
                line,
                format!(
                    "proposal {i} context feature has dim {}, expected {}",
                    p.context_feature.len(),
                    h.feature_dims.context
                ),
            ));
        }
        if p
            .subject_feature
            .iter()
            .chain(&p.context_feature)
            .any(|v| !v.is_finite())
        {
            return Err(invalid(line, format!("proposal {i} has non-finite features")));
        }
    }
    let v = h.vocab.len();
    for (qi, q) in s.queries.iter().enumerate() {
        if q.tokens.is_empty() || q.tokens.len() > h.max_len {
            return Err(invalid(
                line,
                format!("query {qi} length {} outside 1..={}", q.tokens.len(), h.max_len),
            ));
        }
        let words = q.tokens.iter().chain(&q.subject_word).chain(&q.object_word);
        if let Some(t) = words.into_iter().find(|&&t| t >= v) {
            return Err(invalid(line, format!("query {qi} token {t} outside vocabulary of {v}")));
        }
        if let Some(a) = q.attribute_labels.iter().find(|&&a| a >= h.attribute_vocab.len()) {
            return Err(invalid(line, format!("query {qi} attribute {a} out of range")));
        }
        if let Some(gt) = q.gt_index {
            if gt >= s.proposals.len() {
                return Err(invalid(
                    line,
                    format!(
                        "query {qi} gt_index {gt} out of range for {} proposals",
                        s.proposals.len()
                    ),
                ));
            }
        }
    }
    Ok(())
}

/// Reads and validates a dataset. An empty file yields an empty dataset
/// with an empty header.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut header: Option<DatasetHeader> = None;
    let mut scenes = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match &header {
            None => {
                let h: DatasetHeader = serde_json::from_str(&line)
                    .map_err(|source| Error::Json { line: line_no, source })?;
                validate_header(&h, line_no)?;
                header = Some(h);
            }
            Some(h) => {
                let s: Scene = serde_json::from_str(&line)
                    .map_err(|source| Error::Json { line: line_no, source })?;
                validate_scene(h, &s, line_no)?;
                scenes.push(s);
            }
        }
    }
    Ok(Dataset {
        header: header.unwrap_or_else(empty_header),
        scenes,
    })
}

fn empty_header() -> DatasetHeader {
    DatasetHeader {
        vocab: vec![UNK_TOKEN.to_string()],
        attribute_vocab: Vec::new(),
        categories: Vec::new(),
        feature_dims: FeatureDims {
            subject: 0,
            context: 0,
        },
        max_len: DEFAULT_MAX_LEN,
        attribute_counts: None,
    }
}

/// Writes the header and one line per scene. Floats are printed in their
/// shortest round-trip form, so reloading is exact.
pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write_line = |v: String| -> Result<()> {
        w.write_all(v.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))
    };
    write_line(serde_json::to_string(&dataset.header).expect("header serializes"))?;
    for s in &dataset.scenes {
        write_line(serde_json::to_string(s).expect("scene serializes"))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
