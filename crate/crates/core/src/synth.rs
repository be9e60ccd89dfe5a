//! Synthetic grounding benchmark.
//!
//! Each scene is a grid of colored shapes. Queries come from three
//! templates, one per cue:
//!
//! - subject: `<color> <category>`; the only proposal with that pair
//! - location: `<left|right|top|bottom|middle> <category>`; the extreme
//!   proposal of that category along the named direction (nearest to the
//!   image center for `middle`), which must also be the only proposal of
//!   its category in the matching image region
//! - context: `<category> near <category₂>`; the proposal of the category
//!   closest (center to center) to any proposal of the second category
//!
//! Every referent shares its category with at least one other proposal, so
//! the category alone never identifies it.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{
    BBox, Dataset, DatasetHeader, FeatureDims, Proposal, Query, QueryKind, Scene, DEFAULT_MAX_LEN,
    UNK_TOKEN,
};
use crate::entity::WordVectorTable;
use crate::error::{Error, Result};

const CATEGORY_NAMES: [&str; 10] = [
    "circle", "square", "triangle", "star", "hexagon", "diamond", "cross", "heart", "ring", "arrow",
];
const COLOR_NAMES: [&str; 10] = [
    "red", "green", "blue", "yellow", "purple", "orange", "white", "black", "pink", "brown",
];
pub const LOCATION_WORDS: [&str; 5] = ["left", "right", "top", "bottom", "middle"];
pub const NEAR: &str = "near";

/// Pixel size of one grid cell.
pub const CELL: f64 = 100.0;
/// Minimum gap between the best and second-best candidate for location and
/// context templates.
pub const MARGIN: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_scenes: usize,
    pub n_eval_scenes: usize,
    pub proposals_per_scene: usize,
    pub n_categories: usize,
    pub n_colors: usize,
    /// (rows, cols)
    pub grid: (usize, usize),
    pub noise_sigma: f64,
    /// Fractions of subject, location and context queries.
    pub query_mix: [f64; 3],
    pub queries_per_scene: usize,
    pub max_retries: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_scenes: 500,
            n_eval_scenes: 200,
            proposals_per_scene: 8,
            n_categories: 4,
            n_colors: 4,
            grid: (4, 4),
            noise_sigma: 0.1,
            query_mix: [0.4, 0.4, 0.2],
            queries_per_scene: 3,
            max_retries: 1000,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.query_mix.iter().any(|&f| f < 0.0 || !f.is_finite()) {
            return bad("query mix fractions must be nonnegative");
        }
        if (self.query_mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("query mix fractions must sum to 1");
        }
        if self.proposals_per_scene < 2 {
            return bad("at least two proposals per scene are needed");
        }
        if self.proposals_per_scene > self.grid.0 * self.grid.1 {
            return bad("more proposals than grid cells");
        }
        if self.n_categories < 1 || self.n_colors < 1 {
            return bad("need at least one category and one color");
        }
        if self.query_mix[2] > 0.0 && self.n_categories < 2 {
            return bad("context queries need at least two categories");
        }
        if self.query_mix[0] > 0.0 && self.n_colors < 2 {
            return bad("subject queries need at least two colors");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise sigma must be finite and nonnegative");
        }
        if self.queries_per_scene == 0 {
            return bad("need at least one query per scene");
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_config(path)
    }
}

/// Reads a TOML or JSON config, chosen by file extension (JSON unless the
/// extension is `.toml`).
pub fn load_config<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))
    } else {
        serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))
    }
}

fn names(base: &[&str], n: usize, prefix: &str) -> Vec<String> {
    (0..n)
        .map(|i| base.get(i).map_or_else(|| format!("{prefix}{i}"), |s| s.to_string()))
        .collect()
}

/// Token ids of the synthetic vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthVocab {
    pub categories: Vec<String>,
    pub colors: Vec<String>,
}

impl SynthVocab {
    pub fn new(n_categories: usize, n_colors: usize) -> Self {
        Self {
            categories: names(&CATEGORY_NAMES, n_categories, "shape"),
            colors: names(&COLOR_NAMES, n_colors, "color"),
        }
    }

    pub fn from_config(config: &SynthConfig) -> Self {
        Self::new(config.n_categories, config.n_colors)
    }

    /// `<unk>`, categories, colors, location words, `near`.
    pub fn words(&self) -> Vec<String> {
        let mut v = vec![UNK_TOKEN.to_string()];
        v.extend(self.categories.iter().cloned());
        v.extend(self.colors.iter().cloned());
        v.extend(LOCATION_WORDS.iter().map(|s| s.to_string()));
        v.push(NEAR.to_string());
        v
    }

    /// Colors followed by location words.
    pub fn attribute_words(&self) -> Vec<String> {
        let mut v = self.colors.clone();
        v.extend(LOCATION_WORDS.iter().map(|s| s.to_string()));
        v
    }

    pub fn category_token(&self, c: usize) -> usize {
        1 + c
    }

    pub fn color_token(&self, c: usize) -> usize {
        1 + self.categories.len() + c
    }

    pub fn location_token(&self, l: usize) -> usize {
        1 + self.categories.len() + self.colors.len() + l
    }

    pub fn near_token(&self) -> usize {
        1 + self.categories.len() + self.colors.len() + LOCATION_WORDS.len()
    }

    pub fn color_attribute(&self, c: usize) -> usize {
        c
    }

    pub fn location_attribute(&self, l: usize) -> usize {
        self.colors.len() + l
    }

    fn as_category(&self, t: usize) -> Option<usize> {
        (1..=self.categories.len()).contains(&t).then(|| t - 1)
    }

    fn as_color(&self, t: usize) -> Option<usize> {
        let start = 1 + self.categories.len();
        (start..start + self.colors.len()).contains(&t).then(|| t - start)
    }

    fn as_location(&self, t: usize) -> Option<usize> {
        let start = 1 + self.categories.len() + self.colors.len();
        (start..start + LOCATION_WORDS.len()).contains(&t).then(|| t - start)
    }

    pub fn header(&self, subject_dim: usize, context_dim: usize) -> DatasetHeader {
        DatasetHeader {
            vocab: self.words(),
            attribute_vocab: self.attribute_words(),
            categories: self.categories.clone(),
            feature_dims: FeatureDims {
                subject: subject_dim,
                context: context_dim,
            },
            max_len: DEFAULT_MAX_LEN,
            attribute_counts: None,
        }
    }

    /// Orthogonal word vectors, one per vocabulary word (`<unk>` is zero).
    pub fn word_vectors(&self) -> WordVectorTable {
        let words: Vec<String> = self.words().into_iter().skip(1).collect();
        WordVectorTable::one_hot(&words)
    }
}

/// Fields recovered from a template query.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedQuery {
    pub subject_word: Option<usize>,
    pub object_word: Option<usize>,
    pub attribute_labels: BTreeSet<usize>,
}

/// Inverts the query templates. Token sequences that match no template parse
/// to all-empty fields.
pub fn parse_template_query(tokens: &[usize], vocab: &SynthVocab) -> ParsedQuery {
    match *tokens {
        [a, b] => {
            let Some(cat) = vocab.as_category(b) else {
                return ParsedQuery::default();
            };
            let attr = if let Some(c) = vocab.as_color(a) {
                vocab.color_attribute(c)
            } else if let Some(l) = vocab.as_location(a) {
                vocab.location_attribute(l)
            } else {
                return ParsedQuery::default();
            };
            ParsedQuery {
                subject_word: Some(vocab.category_token(cat)),
                object_word: None,
                attribute_labels: BTreeSet::from([attr]),
            }
        }
        [a, near, b] if near == vocab.near_token() => {
            match (vocab.as_category(a), vocab.as_category(b)) {
                (Some(c1), Some(c2)) => ParsedQuery {
                    subject_word: Some(vocab.category_token(c1)),
                    object_word: Some(vocab.category_token(c2)),
                    attribute_labels: BTreeSet::new(),
                },
                _ => ParsedQuery::default(),
            }
        }
        _ => ParsedQuery::default(),
    }
}

/// The generator's view of a placed shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shape {
    pub bbox: BBox,
    pub category: usize,
    pub color: usize,
}

/// Query template with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Template {
    Subject { color: usize, category: usize },
    Location { word: usize, category: usize },
    Context { category: usize, other: usize },
}

impl Template {
    pub fn kind(&self) -> QueryKind {
        match self {
            Template::Subject { .. } => QueryKind::Subject,
            Template::Location { .. } => QueryKind::Location,
            Template::Context { .. } => QueryKind::Context,
        }
    }

    pub fn tokens(&self, v: &SynthVocab) -> Vec<usize> {
        match *self {
            Template::Subject { color, category } => {
                vec![v.color_token(color), v.category_token(category)]
            }
            Template::Location { word, category } => {
                vec![v.location_token(word), v.category_token(category)]
            }
            Template::Context { category, other } => {
                vec![v.category_token(category), v.near_token(), v.category_token(other)]
            }
        }
    }

    pub fn category(&self) -> usize {
        match *self {
            Template::Subject { category, .. }
            | Template::Location { category, .. }
            | Template::Context { category, .. } => category,
        }
    }
}

/// Signed score that the location word maximizes.
fn location_key(word: usize, b: &BBox, width: f64, height: f64) -> f64 {
    let (x, y) = b.center();
    match LOCATION_WORDS[word] {
        "left" => -x,
        "right" => x,
        "top" => -y,
        "bottom" => y,
        _ => -(x - width / 2.0).hypot(y - height / 2.0),
    }
}

/// Image region a location word refers to: the named half of the image,
/// or the central `2·CELL × 2·CELL` square for `middle`.
pub fn in_region(word: usize, b: &BBox, width: f64, height: f64) -> bool {
    let (x, y) = b.center();
    match LOCATION_WORDS[word] {
        "left" => x < width / 2.0,
        "right" => x > width / 2.0,
        "top" => y < height / 2.0,
        "bottom" => y > height / 2.0,
        _ => (x - width / 2.0).abs() < CELL && (y - height / 2.0).abs() < CELL,
    }
}

/// The index maximizing `key` over `candidates` if it leads the runner-up
/// by at least `margin`.
fn unique_best(candidates: &[usize], key: impl Fn(usize) -> f64, margin: f64) -> Option<usize> {
    let mut scored: Vec<(f64, usize)> = candidates.iter().map(|&i| (key(i), i)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    match scored.as_slice() {
        [(_, i)] => Some(*i),
        [(a, i), (b, _), ..] if a - b >= margin => Some(*i),
        _ => None,
    }
}

/// Referent of a template in a scene, or `None` when the template does not
/// pick out a unique proposal with a same-category companion.
pub fn resolve_template(t: &Template, shapes: &[Shape], width: f64, height: f64) -> Option<usize> {
    let same: Vec<usize> = (0..shapes.len())
        .filter(|&i| shapes[i].category == t.category())
        .collect();
    if same.len() < 2 {
        return None;
    }
    match *t {
        Template::Subject { color, .. } => {
            let hits: Vec<usize> = same.iter().copied().filter(|&i| shapes[i].color == color).collect();
            (hits.len() == 1).then(|| hits[0])
        }
        Template::Location { word, .. } => unique_best(
            &same,
            |i| location_key(word, &shapes[i].bbox, width, height),
            MARGIN,
        )
        .filter(|&r| {
            same.iter()
                .all(|&j| (j == r) == in_region(word, &shapes[j].bbox, width, height))
        }),
        Template::Context { other, .. } => {
            let others: Vec<usize> = (0..shapes.len())
                .filter(|&j| shapes[j].category == other)
                .collect();
            if others.is_empty() {
                return None;
            }
            unique_best(
                &same,
                |i| {
                    -others
                        .iter()
                        .map(|&j| shapes[i].bbox.center_distance(&shapes[j].bbox))
                        .fold(f64::INFINITY, f64::min)
                },
                MARGIN,
            )
        }
    }
}

fn sample_kind<R: Rng + ?Sized>(mix: &[f64; 3], rng: &mut R) -> QueryKind {
    let u: f64 = rng.random();
    if u < mix[0] {
        QueryKind::Subject
    } else if u < mix[0] + mix[1] || mix[2] == 0.0 {
        QueryKind::Location
    } else {
        QueryKind::Context
    }
}

/// All templates of a kind that resolve in the scene, with their referents.
fn satisfiable(kind: QueryKind, shapes: &[Shape], w: f64, h: f64, c: &SynthConfig) -> Vec<(Template, usize)> {
    let mut out = Vec::new();
    for category in 0..c.n_categories {
        let candidates: Vec<Template> = match kind {
            QueryKind::Subject => (0..c.n_colors)
                .map(|color| Template::Subject { color, category })
                .collect(),
            QueryKind::Location => (0..LOCATION_WORDS.len())
                .map(|word| Template::Location { word, category })
                .collect(),
            QueryKind::Context => (0..c.n_categories)
                .filter(|&o| o != category)
                .map(|other| Template::Context { category, other })
                .collect(),
        };
        for t in candidates {
            if let Some(r) = resolve_template(&t, shapes, w, h) {
                out.push((t, r));
            }
        }
    }
    out
}

fn place_shapes<R: Rng + ?Sized>(c: &SynthConfig, rng: &mut R) -> Vec<Shape> {
    let (rows, cols) = c.grid;
    let mut cells: Vec<usize> = (0..rows * cols).collect();
    cells.shuffle(rng);
    cells[..c.proposals_per_scene]
        .iter()
        .map(|&cell| {
            let (r, col) = (cell / cols, cell % cols);
            let w = rng.random_range(0.4 * CELL..0.8 * CELL);
            let h = rng.random_range(0.4 * CELL..0.8 * CELL);
            let x = col as f64 * CELL + rng.random_range(0.0..CELL - w);
            let y = r as f64 * CELL + rng.random_range(0.0..CELL - h);
            Shape {
                bbox: BBox::new(x, y, x + w, y + h).expect("positive size"),
                category: rng.random_range(0..c.n_categories),
                color: rng.random_range(0..c.n_colors),
            }
        })
        .collect()
}

fn feature<R: Rng + ?Sized>(s: &Shape, c: &SynthConfig, noise: &Option<Normal<f64>>, rng: &mut R) -> Vec<f64> {
    let mut v = vec![0.0; c.n_categories + c.n_colors];
    v[s.category] = 1.0;
    v[c.n_categories + s.color] = 1.0;
    if let Some(n) = noise {
        for x in &mut v {
            *x += n.sample(rng);
        }
    }
    v
}

/// One scene from its own RNG stream.
pub fn generate_scene(c: &SynthConfig, vocab: &SynthVocab, rng: &mut ChaCha8Rng) -> Result<Scene> {
    let width = c.grid.1 as f64 * CELL;
    let height = c.grid.0 as f64 * CELL;
    let noise = (c.noise_sigma > 0.0).then(|| Normal::new(0.0, c.noise_sigma).expect("valid sigma"));
    'attempt: for _ in 0..c.max_retries {
        let shapes = place_shapes(c, rng);
        let mut queries = Vec::with_capacity(c.queries_per_scene);
        for _ in 0..c.queries_per_scene {
            let kind = sample_kind(&c.query_mix, rng);
            let options = satisfiable(kind, &shapes, width, height, c);
            if options.is_empty() {
                continue 'attempt;
            }
            let (t, referent) = options[rng.random_range(0..options.len())];
            let tokens = t.tokens(vocab);
            let parsed = parse_template_query(&tokens, vocab);
            queries.push(
                Query::new(
                    tokens,
                    parsed.subject_word,
                    parsed.object_word,
                    parsed.attribute_labels,
                    Some(referent),
                )
                .with_kind(kind),
            );
        }
        let proposals = shapes
            .iter()
            .map(|s| Proposal {
                bbox: s.bbox,
                category: s.category,
                subject_feature: feature(s, c, &noise, rng),
                context_feature: feature(s, c, &noise, rng),
            })
            .collect();
        return Ok(Scene {
            width,
            height,
            proposals,
            queries,
        });
    }
    Err(Error::Unsatisfiable(c.max_retries))
}

/// Stream id offset separating evaluation scenes from training scenes.
const EVAL_STREAM: u64 = 1 << 40;

fn scene_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generates the training and evaluation splits. Scene `i` depends only on
/// the config and `i`.
pub fn generate(c: &SynthConfig) -> Result<(Dataset, Dataset)> {
    c.validate()?;
    let vocab = SynthVocab::from_config(c);
    let dim = c.n_categories + c.n_colors;
    let header = vocab.header(dim, dim);
    let split = |count: usize, offset: u64| -> Result<Dataset> {
        let scenes = (0..count)
            .map(|i| generate_scene(c, &vocab, &mut scene_rng(c.seed, offset + i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let mut d = Dataset {
            header: header.clone(),
            scenes,
        };
        d.header.attribute_counts = Some(d.count_attributes());
        Ok(d)
    };
    Ok((split(c.n_scenes, 0)?, split(c.n_eval_scenes, EVAL_STREAM)?))
}

/// Rebuilds the generator's shape list (category and color) from a synthetic
/// scene's features, whose first blocks are exact one-hots before noise.
pub fn shapes_of(scene: &Scene, n_categories: usize) -> Vec<Shape> {
    scene
        .proposals
        .iter()
        .map(|p| {
            let colors = &p.subject_feature[n_categories..];
            let color = crate::nn::argmax(colors);
            Shape {
                bbox: p.bbox,
                category: p.category,
                color,
            }
        })
        .collect()
}
