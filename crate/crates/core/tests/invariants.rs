mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;
use earn::autograd::Graph;
use earn::data::{QueryKind, Scene};
use earn::entity::{apply_filter, FilterMode};
use earn::model::{CueToggles, ModelConfig};
use earn::reconstruct::LossWeights;
use earn::synth::{generate, SynthConfig, SynthVocab, LOCATION_WORDS};
use earn::visual::ContextMode;

fn close_to_one(v: &[f64]) -> bool {
    (v.iter().sum::<f64>() - 1.0).abs() < 1e-6
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn forward_distributions_are_normalized(
        seed in any::<u64>(),
        n in 1usize..=16,
        filter in 0usize..3,
        context in 0usize..3,
        threshold in 0.0f64..=1.0,
        cues in (any::<bool>(), any::<bool>()),
    ) {
        let vocab = SynthVocab::new(3, 3);
        let data = random_dataset(1, &vocab, 1, 3);
        let config = ModelConfig {
            filter_mode: [FilterMode::None, FilterMode::Soft, FilterMode::Hard][filter],
            context_mode: [ContextMode::SoftAll, ContextMode::MaxAll, ContextMode::FiveNearest][context],
            filter_threshold: threshold,
            cues: CueToggles { subject: true, location: cues.0, context: cues.1 },
            ..tiny_config()
        };
        let model = model_for(&data, config, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = random_scene(&mut rng, &vocab, n, 3);
        let feats = model.scene_features(&scene);
        let mut g = Graph::new(&model.store);
        let fwd = model.forward(&mut g, &feats, &scene.query_views(), LossWeights::default(), false).unwrap();
        for q in &fwd.queries {
            prop_assert!(close_to_one(&g.value(q.lang.weights).data));
            prop_assert!(close_to_one(&g.value(q.subject_scores).data));
            for k in 0..3 {
                prop_assert!(close_to_one(&g.value(q.lang.word_attention[k]).data));
                prop_assert!(close_to_one(&g.value(q.cue_scores[k]).data));
            }
            for row in q.object_scores.iter().flatten() {
                prop_assert!(close_to_one(&g.value(*row).data));
            }
            if filter != 1 {
                prop_assert!(close_to_one(&g.value(q.final_scores).data));
            }
            prop_assert!(q.keep_mask.iter().any(|&k| k));
            prop_assert!(q.keep_mask[q.selected]);
        }
    }

    #[test]
    fn hard_filter_keeps_the_best(scores in prop::collection::vec(0.0f64..1.0, 1..=16), t in 0.0f64..=1.0) {
        let out = apply_filter(&scores, FilterMode::Hard, t);
        prop_assert!(out.keep_mask[argmax_first(&scores)]);
        let max = scores[argmax_first(&scores)];
        for (s, k) in scores.iter().zip(&out.keep_mask) {
            if max > 0.0 && s / max >= t {
                prop_assert!(*k);
            }
        }
    }
}

#[test]
fn all_zero_scores_keep_one_proposal() {
    let out = apply_filter(&[0.0; 5], FilterMode::Hard, 0.6);
    assert_eq!(out.keep_mask.iter().filter(|&&k| k).count(), 1);
}

// ------------------------------------------------- generated ground truth

fn color_of(scene: &Scene, i: usize, n_categories: usize) -> usize {
    argmax_first(&scene.proposals[i].subject_feature[n_categories..])
}

/// Proposals satisfying the query's template predicate,
/// evaluated directly on the proposals.
fn referents(scene: &Scene, tokens: &[usize], vocab: &SynthVocab) -> Vec<usize> {
    let nc = vocab.categories.len();
    let cat_of_token = |t: usize| (0..nc).find(|&c| vocab.category_token(c) == t);
    let n = scene.len();
    let centers: Vec<(f64, f64)> = scene.boxes().iter().map(|b| b.center()).collect();
    let cat = |i: usize| scene.proposals[i].category;
    match tokens.len() {
        3 => {
            let (a, b) = (cat_of_token(tokens[0]).unwrap(), cat_of_token(tokens[2]).unwrap());
            let near = |i: usize| {
                (0..n)
                    .filter(|&j| cat(j) == b)
                    .map(|j| ((centers[i].0 - centers[j].0).powi(2) + (centers[i].1 - centers[j].1).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            };
            (0..n)
                .filter(|&i| cat(i) == a)
                .filter(|&i| (0..n).all(|k| k == i || cat(k) != a || near(k) - near(i) >= 20.0))
                .collect()
        }
        2 => {
            let c = cat_of_token(tokens[1]).unwrap();
            let color = (0..vocab.colors.len()).find(|&k| vocab.color_token(k) == tokens[0]);
            if let Some(color) = color {
                return (0..n).filter(|&i| cat(i) == c && color_of(scene, i, nc) == color).collect();
            }
            let word = (0..LOCATION_WORDS.len()).find(|&k| vocab.location_token(k) == tokens[0]).unwrap();
            let (w, h) = (scene.width, scene.height);
            let key = |i: usize| {
                let (x, y) = centers[i];
                match LOCATION_WORDS[word] {
                    "left" => -x,
                    "right" => x,
                    "top" => -y,
                    "bottom" => y,
                    _ => -((x - w / 2.0).powi(2) + (y - h / 2.0).powi(2)).sqrt(),
                }
            };
            let region = |i: usize| {
                let (x, y) = centers[i];
                match LOCATION_WORDS[word] {
                    "left" => x < w / 2.0,
                    "right" => x > w / 2.0,
                    "top" => y < h / 2.0,
                    "bottom" => y > h / 2.0,
                    _ => (x - w / 2.0).abs() < 100.0 && (y - h / 2.0).abs() < 100.0,
                }
            };
            let in_region: Vec<usize> = (0..n).filter(|&i| cat(i) == c && region(i)).collect();
            if in_region.len() != 1 {
                return Vec::new();
            }
            (0..n)
                .filter(|&i| cat(i) == c && region(i))
                .filter(|&i| (0..n).all(|k| k == i || cat(k) != c || key(i) - key(k) >= 20.0))
                .collect()
        }
        _ => Vec::new(),
    }
}

#[test]
fn every_generated_query_has_exactly_one_referent() {
    for seed in 0..3 {
        let config = SynthConfig {
            seed,
            n_scenes: 150,
            n_eval_scenes: 50,
            ..SynthConfig::default()
        };
        let vocab = SynthVocab::from_config(&config);
        let (train, eval) = generate(&config).unwrap();
        for scene in train.scenes.iter().chain(&eval.scenes) {
            for q in &scene.queries {
                let gt = q.gt_index().unwrap();
                assert_eq!(referents(scene, &q.tokens, &vocab), vec![gt], "tokens {:?}", q.tokens);
                let c = scene.proposals[gt].category;
                assert!(scene.proposals.iter().filter(|p| p.category == c).count() >= 2);
                assert_eq!(q.subject_word, Some(vocab.category_token(c)));
                assert_eq!(q.object_word, (q.tokens.len() == 3).then(|| q.tokens[2]));
            }
        }
    }
}

#[test]
fn leftmost_referent_has_minimal_center_x() {
    let config = SynthConfig {
        n_scenes: 200,
        n_eval_scenes: 1,
        query_mix: [0.0, 1.0, 0.0],
        ..SynthConfig::default()
    };
    let vocab = SynthVocab::from_config(&config);
    let (train, _) = generate(&config).unwrap();
    let left = vocab.location_token(0);
    let mut seen = 0;
    for scene in &train.scenes {
        for q in scene.queries.iter().filter(|q| q.tokens[0] == left) {
            let gt = q.gt_index().unwrap();
            let c = scene.proposals[gt].category;
            let best = (0..scene.len())
                .filter(|&i| scene.proposals[i].category == c)
                .min_by(|&a, &b| scene.proposals[a].bbox.center().0.total_cmp(&scene.proposals[b].bbox.center().0))
                .unwrap();
            assert_eq!(gt, best);
            seen += 1;
        }
    }
    assert!(seen > 20);
}

#[test]
fn generation_is_a_pure_function_of_the_config() {
    let c = SynthConfig {
        n_scenes: 30,
        n_eval_scenes: 10,
        ..SynthConfig::default()
    };
    let (a, b) = generate(&c).unwrap();
    let (a2, b2) = generate(&c).unwrap();
    assert_eq!(a, a2);
    assert_eq!(b, b2);
    let (other, _) = generate(&SynthConfig { seed: 1, ..c }).unwrap();
    assert_ne!(a, other);
}

#[test]
fn query_mix_is_respected() {
    let (train, _) = generate(&SynthConfig {
        n_scenes: 400,
        n_eval_scenes: 1,
        ..SynthConfig::default()
    })
    .unwrap();
    let total = train.num_queries() as f64;
    let frac = |k: QueryKind| {
        train.scenes.iter().flat_map(|s| &s.queries).filter(|q| q.kind == Some(k)).count() as f64 / total
    };
    assert!((frac(QueryKind::Subject) - 0.4).abs() < 0.05);
    assert!((frac(QueryKind::Location) - 0.4).abs() < 0.05);
    assert!((frac(QueryKind::Context) - 0.2).abs() < 0.05);
}
