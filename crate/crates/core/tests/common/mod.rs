//! Brute-force oracles and fixtures shared by the integration tests and the
//! acceptance harness.

#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use earn::data::{BBox, Dataset, Proposal, Query, Scene};
use earn::model::{Earn, ModelConfig};
use earn::synth::SynthVocab;
use earn::train::MetricRow;
use earn::TrainConfig;

// ---------------------------------------------------------------- oracles

/// IoU of two integer boxes by counting unit cells of a raster.
pub fn iou_raster(a: [i64; 4], b: [i64; 4]) -> f64 {
    let lo_x = a[0].min(b[0]);
    let lo_y = a[1].min(b[1]);
    let hi_x = a[2].max(b[2]);
    let hi_y = a[3].max(b[3]);
    let inside = |r: [i64; 4], x: i64, y: i64| x >= r[0] && x < r[2] && y >= r[1] && y < r[3];
    let (mut inter, mut union) = (0u64, 0u64);
    for y in lo_y..hi_y {
        for x in lo_x..hi_x {
            let (p, q) = (inside(a, x, y), inside(b, x, y));
            inter += (p && q) as u64;
            union += (p || q) as u64;
        }
    }
    inter as f64 / union as f64
}

/// The 30-dim location feature computed from scratch: absolute part, then
/// for each of the five closest same-category boxes (found by repeated
/// minimum search, ties to the lower index) the normalized offsets.
pub fn location_oracle(i: usize, boxes: &[[f64; 4]], cats: &[usize], w: f64, h: f64) -> Vec<f64> {
    let b = boxes[i];
    let (bw, bh) = (b[2] - b[0], b[3] - b[1]);
    let mut out = vec![b[0] / w, b[1] / h, b[2] / w, b[3] / h, bw * bh / (w * h)];
    let center = |r: [f64; 4]| ((r[0] + r[2]) / 2.0, (r[1] + r[3]) / 2.0);
    let (cx, cy) = center(b);
    let dist = |j: usize| {
        let (x, y) = center(boxes[j]);
        ((x - cx).powi(2) + (y - cy).powi(2)).sqrt()
    };
    let mut used = vec![false; boxes.len()];
    used[i] = true;
    for _ in 0..5 {
        let mut best: Option<usize> = None;
        for j in 0..boxes.len() {
            if used[j] || cats[j] != cats[i] {
                continue;
            }
            if best.is_none_or(|k| dist(j) < dist(k)) {
                best = Some(j);
            }
        }
        match best {
            Some(j) => {
                used[j] = true;
                let o = boxes[j];
                out.extend([
                    (o[0] - b[0]) / bw,
                    (o[1] - b[1]) / bh,
                    (o[2] - b[2]) / bw,
                    (o[3] - b[3]) / bh,
                    (o[2] - o[0]) * (o[3] - o[1]) / (bw * bh),
                ]);
            }
            None => out.extend([0.0; 5]),
        }
    }
    out
}

/// `Σ_i weights[i] · rows[i]`, accumulated element by element.
pub fn weighted_sum(weights: &[f64], rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows.first().map_or(0, Vec::len);
    let mut out = vec![0.0; d];
    for (k, o) in out.iter_mut().enumerate() {
        for (w, r) in weights.iter().zip(rows) {
            *o += w * r[k];
        }
    }
    out
}

pub fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// --------------------------------------------------------------- fixtures

pub fn random_box(rng: &mut ChaCha8Rng, w: f64, h: f64) -> [f64; 4] {
    let x0 = rng.random_range(0.0..w - 2.0);
    let y0 = rng.random_range(0.0..h - 2.0);
    let x1 = rng.random_range(x0 + 1.0..=w);
    let y1 = rng.random_range(y0 + 1.0..=h);
    [x0, y0, x1, y1]
}

pub fn bbox(b: [f64; 4]) -> BBox {
    BBox::new(b[0], b[1], b[2], b[3]).expect("valid box")
}

/// A scene with random boxes, categories and features, and `queries`
/// random queries over the synthetic vocabulary.
pub fn random_scene(rng: &mut ChaCha8Rng, vocab: &SynthVocab, n: usize, queries: usize) -> Scene {
    let ds = vocab.categories.len() + vocab.colors.len();
    let (w, h) = (rng.random_range(50.0..400.0), rng.random_range(50.0..400.0));
    let proposals = (0..n)
        .map(|_| Proposal {
            bbox: bbox(random_box(rng, w, h)),
            category: rng.random_range(0..vocab.categories.len()),
            subject_feature: (0..ds).map(|_| rng.random_range(-1.0..1.0)).collect(),
            context_feature: (0..ds).map(|_| rng.random_range(-1.0..1.0)).collect(),
        })
        .collect();
    let words = vocab.words().len();
    let attrs = vocab.attribute_words().len();
    let queries = (0..queries)
        .map(|_| {
            let t = rng.random_range(1..=5);
            let tokens = (0..t).map(|_| rng.random_range(0..words)).collect();
            let pick = |rng: &mut ChaCha8Rng| rng.random_bool(0.7).then(|| vocab.category_token(rng.random_range(0..vocab.categories.len())));
            let subject = pick(rng);
            let object = pick(rng);
            let labels: BTreeSet<usize> = (0..attrs).filter(|_| rng.random_bool(0.3)).collect();
            Query::new(tokens, subject, object, labels, Some(rng.random_range(0..n)))
        })
        .collect();
    Scene {
        width: w,
        height: h,
        proposals,
        queries,
    }
}

/// A dataset wrapper around random scenes; attribute counts are recomputed.
pub fn random_dataset(seed: u64, vocab: &SynthVocab, scenes: usize, max_n: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ds = vocab.categories.len() + vocab.colors.len();
    let scenes = (0..scenes)
        .map(|_| {
            let n = rng.random_range(1..=max_n);
            random_scene(&mut rng, vocab, n, 2)
        })
        .collect();
    let mut d = Dataset {
        header: vocab.header(ds, ds),
        scenes,
    };
    d.header.attribute_counts = Some(d.count_attributes());
    d
}

pub fn model_for(dataset: &Dataset, config: ModelConfig, seed: u64) -> Earn {
    let table = TrainConfig::default()
        .word_vector_table(&dataset.header)
        .expect("word vectors");
    Earn::for_dataset(config, &dataset.header, &table, &dataset.attribute_counts(), seed)
        .expect("model")
}

/// Small dimensions used wherever every parameter is perturbed.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        hidden_dim: 4,
        match_hidden: 5,
        ..ModelConfig::default()
    }
}

/// Three proposals (two of category 0, one of category 1) and one
/// three-token context query "c0 near c1" with attribute labels.
pub fn tiny_instance() -> Dataset {
    let vocab = SynthVocab::new(2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let ds = 4;
    let boxes = [[10.0, 10.0, 60.0, 50.0], [120.0, 30.0, 170.0, 90.0], [70.0, 120.0, 130.0, 180.0]];
    let cats = [0, 0, 1];
    let proposals = boxes
        .iter()
        .zip(cats)
        .map(|(&b, c)| Proposal {
            bbox: bbox(b),
            category: c,
            subject_feature: (0..ds).map(|_| rng.random_range(-1.0..1.0)).collect(),
            context_feature: (0..ds).map(|_| rng.random_range(-1.0..1.0)).collect(),
        })
        .collect();
    let tokens = vec![vocab.category_token(0), vocab.near_token(), vocab.category_token(1)];
    let labels: BTreeSet<usize> = [vocab.color_attribute(1), vocab.location_attribute(0)].into();
    let query = Query::new(
        tokens,
        Some(vocab.category_token(0)),
        Some(vocab.category_token(1)),
        labels,
        None,
    );
    let mut d = Dataset {
        header: vocab.header(ds, ds),
        scenes: vec![Scene {
            width: 200.0,
            height: 200.0,
            proposals,
            queries: vec![query],
        }],
    };
    d.header.attribute_counts = Some(vec![3; d.header.attribute_vocab.len()]);
    d
}

// ---------------------------------------------------------------- goldens

pub fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

pub fn blessing() -> bool {
    std::env::var_os("EARN_BLESS").is_some()
}

/// Compares `actual` with the golden file, or rewrites it when `EARN_BLESS`
/// is set. Errors describe the first differing line.
pub fn check_golden(name: &str, actual: &str) -> Result<(), String> {
    let path = golden_path(name);
    if blessing() {
        std::fs::create_dir_all(path.parent().unwrap()).map_err(|e| e.to_string())?;
        std::fs::write(&path, actual).map_err(|e| e.to_string())?;
        return Ok(());
    }
    let expected = std::fs::read_to_string(&path)
        .map_err(|e| format!("{}: {e} (run with EARN_BLESS=1 to create)", path.display()))?;
    if expected == actual {
        return Ok(());
    }
    for (k, (e, a)) in expected.lines().zip(actual.lines()).enumerate() {
        if e != a {
            return Err(format!("{name} line {}: expected `{e}`, got `{a}`", k + 1));
        }
    }
    Err(format!(
        "{name}: line count differs ({} vs {})",
        expected.lines().count(),
        actual.lines().count()
    ))
}

/// Bit pattern and decimal of each value, one per line.
pub fn golden_lines(label: &str, values: &[f64]) -> String {
    values
        .iter()
        .enumerate()
        .map(|(i, v)| format!("{label}[{i}] {:016x} {v:e}\n", v.to_bits()))
        .collect()
}

/// Iteration, total loss, and the bit pattern of every loss term per step.
pub fn loss_golden_text(rows: &[MetricRow]) -> String {
    let mut s = String::new();
    for r in rows {
        let t = r.bundle.terms();
        s.push_str(&format!("{} {:e}", r.iteration, r.bundle.total));
        for v in t {
            s.push_str(&format!(" {:016x}", v.to_bits()));
        }
        s.push('\n');
    }
    s
}
