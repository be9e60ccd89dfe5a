mod common;

use common::*;
use earn::data::Dataset;
use earn::error::Error;
use earn::eval::{
    ablation_configs, evaluate, parse_toggles, read_predictions, recount, run_ablation, toggle_grid, Toggle,
};
use earn::entity::FilterMode;
use earn::synth::{generate, SynthConfig, SynthVocab};
use earn::TrainConfig;

fn eval_set(scenes: usize) -> Dataset {
    generate(&SynthConfig {
        seed: 21,
        n_scenes: 1,
        n_eval_scenes: scenes,
        ..SynthConfig::default()
    })
    .unwrap()
    .1
}

#[test]
fn untrained_models_score_at_chance() {
    let data = eval_set(700);
    let (mut hits, mut total) = (0, 0);
    for seed in 0..4 {
        let model = model_for(&data, Default::default(), seed);
        let r = evaluate(&model, &data).unwrap();
        hits += r.correct;
        total += r.count;
    }
    assert!(total >= 2000);
    let acc = hits as f64 / total as f64;
    assert!((acc - 0.125).abs() <= 0.05, "untrained accuracy {acc}");
}

#[test]
fn ground_truth_equal_to_prediction_scores_one() {
    let mut data = eval_set(30);
    let model = model_for(&data, tiny_config(), 3);
    let first = evaluate(&model, &data).unwrap();
    for r in &first.records {
        data.scenes[r.scene].queries[r.query].set_gt_index(Some(r.selected));
    }
    let again = evaluate(&model, &data).unwrap();
    assert_eq!(again.accuracy, 1.0);
    assert_eq!(again.correct, again.count);
}

#[test]
fn single_proposal_scenes_are_always_right() {
    let data = random_dataset(5, &SynthVocab::new(3, 2), 40, 1);
    let model = model_for(&data, tiny_config(), 0);
    let r = evaluate(&model, &data).unwrap();
    assert_eq!(r.accuracy, 1.0);
    assert_eq!(r.mean_candidates, 1.0);
}

#[test]
fn evaluation_is_idempotent_and_logged() {
    let data = eval_set(40);
    let model = model_for(&data, tiny_config(), 1);
    let a = evaluate(&model, &data).unwrap();
    let b = evaluate(&model, &data).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.records.len(), data.num_queries());

    let total: usize = a.breakdown.values().map(|s| s.count).sum();
    let correct: usize = a.breakdown.values().map(|s| s.correct).sum();
    assert_eq!((total, correct), (a.count, a.correct));
    assert_eq!(a.breakdown.keys().collect::<Vec<_>>(), ["context", "location", "subject"]);

    let dir = tempfile::tempdir().unwrap();
    a.write(dir.path(), "report").unwrap();
    for f in ["report.json", "report.csv", "report_predictions.csv"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let log = read_predictions(dir.path().join("report_predictions.csv")).unwrap();
    assert_eq!(log, a.records);
    assert_eq!(recount(&log), a.accuracy);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json["accuracy"].as_f64().unwrap(), a.accuracy);
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 1 + a.breakdown.len());
}

#[test]
fn missing_ground_truth_and_dimension_mismatch_are_errors() {
    let mut data = eval_set(3);
    let model = model_for(&data, tiny_config(), 0);
    data.scenes[1].queries[0].set_gt_index(None);
    assert!(matches!(evaluate(&model, &data), Err(Error::MissingGroundTruth { scene: 1, query: 0 })));
    let other = random_dataset(0, &SynthVocab::new(2, 2), 2, 3);
    assert!(matches!(evaluate(&model, &other), Err(Error::Dimension(_))));
}

#[test]
fn toggle_grids() {
    let t = parse_toggles("loc,hard").unwrap();
    let grid = toggle_grid(&t);
    assert_eq!(grid.len(), 4);
    assert!(grid[0].values().all(|&on| on));
    assert!(grid[3].values().all(|&on| !on));
    assert_eq!(toggle_grid(&[]).len(), 1);

    let configs = ablation_configs(&TrainConfig::default(), &t).unwrap();
    assert_eq!(configs.len(), 4);
    let off = &configs[3].1;
    assert!(!off.model.cues.location);
    assert_eq!(off.model.filter_mode, FilterMode::None);
    assert_eq!(configs[0].1, TrainConfig::default());

    assert!(matches!(parse_toggles("loc,banana"), Err(Error::InvalidToggle(_))));
    assert!(matches!(parse_toggles("loc,loc"), Err(Error::InvalidToggle(_))));
    assert!(matches!(parse_toggles("hard,soft"), Err(Error::InvalidToggle(_))));
    assert_eq!(parse_toggles(" Loc , cxt ").unwrap(), vec![Toggle::Loc, Toggle::Cxt]);
    assert_eq!(parse_toggles("").unwrap(), vec![]);
}

#[test]
fn small_ablation_writes_a_row_per_setting() {
    let (train, eval) = generate(&SynthConfig {
        n_scenes: 10,
        n_eval_scenes: 5,
        ..SynthConfig::default()
    })
    .unwrap();
    let base = TrainConfig {
        max_iterations: 5,
        model: tiny_config(),
        ..TrainConfig::default()
    };
    let mut seen = 0;
    let table = run_ablation(&train, &eval, &base, &[Toggle::Att], &[0, 1], |_, _, _| seen += 1).unwrap();
    assert_eq!(seen, 4);
    assert_eq!(table.rows.len(), 2);
    assert_eq!(table.rows[1].config.loss.lambda, 0.0);
    for row in &table.rows {
        let mean = row.reports.iter().map(|r| r.accuracy).sum::<f64>() / 2.0;
        assert_eq!(row.mean_accuracy, mean);
    }
    let dir = tempfile::tempdir().unwrap();
    table.write(dir.path()).unwrap();
    assert!(dir.path().join("ablation.json").is_file());
    let csv = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(std::fs::read_dir(dir.path()).unwrap().filter(|e| {
        e.as_ref().unwrap().file_name().to_string_lossy().contains("predictions")
    }).count() >= 4);

    assert!(run_ablation(&train, &eval, &base, &[], &[], |_, _, _| {}).is_err());
}
