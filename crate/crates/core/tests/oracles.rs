mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;
use earn::autograd::{Graph, ParamStore, Tensor};
use earn::data::{compute_iou, BBox};
use earn::entity::pool_context;
use earn::grounding::{combine, combine_values};
use earn::reconstruct::attentive_pool;
use earn::synth::SynthVocab;
use earn::visual::{
    assemble_context_pairs, context_candidates, encode_absolute_location, encode_location,
    encode_relative_location, ContextLocation, ContextMode,
};

fn int_box() -> impl Strategy<Value = [i64; 4]> {
    (0i64..20, 0i64..20, 1i64..12, 1i64..12).prop_map(|(x, y, w, h)| [x, y, x + w, y + h])
}

fn dist(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0f64..4.0, n).prop_map(|v| softmax(&v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn iou_matches_raster(a in int_box(), b in int_box()) {
        let f = |r: [i64; 4]| bbox(r.map(|v| v as f64));
        let got = compute_iou(&f(a), &f(b));
        prop_assert!((got - iou_raster(a, b)).abs() < 1e-12);
        prop_assert!((got - compute_iou(&f(b), &f(a))).abs() < 1e-15);
    }

    #[test]
    fn location_matches_oracle(seed in any::<u64>(), n in 1usize..=16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = SynthVocab::new(2, 2);
        let scene = random_scene(&mut rng, &vocab, n, 0);
        let corners: Vec<[f64; 4]> = scene.boxes().iter().map(BBox::corners).collect();
        let cats = scene.categories();
        for i in 0..n {
            let got = encode_location(i, &scene.boxes(), &cats, scene.width, scene.height);
            let want = location_oracle(i, &corners, &cats, scene.width, scene.height);
            prop_assert!(max_abs_diff(&got, &want) < 1e-9, "proposal {i}: {got:?} vs {want:?}");
            prop_assert!(got[..5].iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn combination_matches_oracle(
        (s, w, f) in (1usize..=16).prop_flat_map(|n| ([dist(n), dist(n), dist(n)], dist(3), dist(n)))
    ) {
        let n = s[0].len();
        let plain: Vec<f64> = (0..n).map(|i| w[0] * s[0][i] + w[1] * s[1][i] + w[2] * s[2][i]).collect();
        let filtered: Vec<f64> = plain.iter().zip(&f).map(|(a, b)| a * b).collect();
        let (got, sel) = combine_values([&s[0], &s[1], &s[2]], [w[0], w[1], w[2]], None);
        prop_assert!(max_abs_diff(&got, &plain) < 1e-12);
        prop_assert_eq!(sel, argmax_first(&plain));
        let (got, sel) = combine_values([&s[0], &s[1], &s[2]], [w[0], w[1], w[2]], Some(&f));
        prop_assert!(max_abs_diff(&got, &filtered) < 1e-12);
        prop_assert_eq!(sel, argmax_first(&filtered));

        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let vars = [0, 1, 2].map(|k| g.constant(Tensor::row_vector(s[k].clone())));
        let wv = g.constant(Tensor::row_vector(w.clone()));
        let st = combine(&mut g, vars, wv, None);
        prop_assert!(max_abs_diff(&g.value(st).data, &plain) < 1e-12);
    }

    #[test]
    fn attentive_pool_matches_oracle(
        (s, rows) in (1usize..=16, 1usize..6).prop_flat_map(|(n, d)| {
            (dist(n), prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), n))
        })
    ) {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let sv = g.constant(Tensor::row_vector(s.clone()));
        let fv = g.constant(Tensor::from_rows(&rows, rows[0].len()));
        let out = attentive_pool(&mut g, sv, fv);
        prop_assert!(max_abs_diff(&g.value(out).data, &weighted_sum(&s, &rows)) < 1e-12);
    }

    #[test]
    fn soft_context_pooling_matches_oracle(seed in any::<u64>(), n in 2usize..=16, logits in prop::collection::vec(-4.0f64..4.0, 15)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = SynthVocab::new(3, 2);
        let scene = random_scene(&mut rng, &vocab, n, 0);
        let pairs = assemble_context_pairs(0, &scene, ContextMode::SoftAll, ContextLocation::Relative);
        prop_assert_eq!(pairs.len(), n - 1);
        let row = softmax(&logits[..n - 1]);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let rv = g.constant(Tensor::row_vector(row.clone()));
        let out = pool_context(&mut g, &pairs, Some(rv), ContextMode::SoftAll, None);
        let feats: Vec<Vec<f64>> = (0..pairs.len()).map(|j| pairs.features.row(j).to_vec()).collect();
        prop_assert!(max_abs_diff(&g.value(out).data, &weighted_sum(&row, &feats)) < 1e-12);
    }

    #[test]
    fn five_nearest_context_by_distance(seed in any::<u64>(), n in 1usize..=16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = SynthVocab::new(3, 2);
        let scene = random_scene(&mut rng, &vocab, n, 0);
        let boxes = scene.boxes();
        for t in 0..n {
            let (cx, cy) = boxes[t].center();
            let mut others: Vec<(f64, usize)> = (0..n)
                .filter(|&j| scene.proposals[j].category != scene.proposals[t].category)
                .map(|j| {
                    let (x, y) = boxes[j].center();
                    (((x - cx).powi(2) + (y - cy).powi(2)).sqrt(), j)
                })
                .collect();
            others.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let want: Vec<usize> = others.iter().take(5).map(|p| p.1).collect();
            prop_assert_eq!(context_candidates(t, &scene, ContextMode::FiveNearest), want);
        }
    }

    #[test]
    fn translation_covariance(seed in any::<u64>(), n in 1usize..=8, dx in -30.0f64..30.0, dy in -30.0f64..30.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = SynthVocab::new(2, 2);
        let scene = random_scene(&mut rng, &vocab, n, 0);
        let boxes = scene.boxes();
        let moved: Vec<BBox> = boxes.iter().map(|b| b.translated(dx, dy)).collect();
        let cats = scene.categories();
        for i in 0..n {
            let a = encode_relative_location(i, &boxes, &cats);
            let b = encode_relative_location(i, &moved, &cats);
            prop_assert!(max_abs_diff(&a, &b) < 1e-9);
        }
        // scaling the boxes and the image together keeps normalized coordinates
        let k = 1.0 + dx.abs() / 10.0;
        for b in &boxes {
            let a = encode_absolute_location(b, scene.width, scene.height);
            let c = encode_absolute_location(&b.scaled(k), scene.width * k, scene.height * k);
            prop_assert!(max_abs_diff(&a, &c) < 1e-9);
        }
    }
}

#[test]
fn hand_evaluated_locations() {
    let abs = |b: [f64; 4], w, h| encode_absolute_location(&bbox(b), w, h);
    assert!(max_abs_diff(&abs([10.0, 20.0, 30.0, 60.0], 100.0, 100.0), &[0.1, 0.2, 0.3, 0.6, 0.08]) < 1e-12);
    assert_eq!(abs([0.0, 0.0, 100.0, 100.0], 100.0, 100.0), [0.0, 0.0, 1.0, 1.0, 1.0]);
    assert_eq!(abs([0.0, 0.0, 50.0, 100.0], 100.0, 100.0), [0.0, 0.0, 0.5, 1.0, 0.5]);

    let boxes = [bbox([0.0, 0.0, 10.0, 10.0]), bbox([10.0, 0.0, 20.0, 10.0])];
    let rel = encode_relative_location(0, &boxes, &[0, 0]);
    assert_eq!(&rel[..5], &[1.0, 0.0, 1.0, 0.0, 1.0]);
    assert!(rel[5..].iter().all(|&v| v == 0.0));
    assert_eq!(encode_relative_location(0, &boxes, &[0, 1]), [0.0; 25]);

    let twins = [bbox([5.0, 5.0, 15.0, 25.0]), bbox([5.0, 5.0, 15.0, 25.0])];
    assert_eq!(&encode_relative_location(0, &twins, &[0, 0])[..5], &[0.0, 0.0, 0.0, 0.0, 1.0]);
}

#[test]
fn soft_pooling_degenerate_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let scene = random_scene(&mut rng, &SynthVocab::new(2, 2), 3, 0);
    let pairs = assemble_context_pairs(0, &scene, ContextMode::SoftAll, ContextLocation::Relative);
    assert_eq!(pairs.indices, vec![1, 2]);
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let first = g.constant(Tensor::row_vector(vec![1.0, 0.0]));
    let out = pool_context(&mut g, &pairs, Some(first), ContextMode::SoftAll, None);
    assert_eq!(g.value(out).data, pairs.features.row(0));
    let half = g.constant(Tensor::row_vector(vec![0.5, 0.5]));
    let out = pool_context(&mut g, &pairs, Some(half), ContextMode::SoftAll, None);
    let mean: Vec<f64> = pairs.features.row(0).iter().zip(pairs.features.row(1)).map(|(a, b)| (a + b) / 2.0).collect();
    assert!(max_abs_diff(&g.value(out).data, &mean) < 1e-15);
}
