//! Briefly trains a model, then grounds every query of one evaluation scene
//! and shows the per-cue scores behind each choice.
//!
//! ```text
//! cargo run --release --example ground_scene -- [iterations]
//! ```

use earn::synth::{generate, SynthConfig};
use earn::train::{train, TrainConfig};

fn main() -> earn::Result<()> {
    let iterations: u64 = std::env::args().nth(1).map_or(500, |s| s.parse().expect("iteration count"));
    let (train_set, eval_set) = generate(&SynthConfig::default())?;
    let outcome = train(&train_set, &TrainConfig {
        max_iterations: iterations,
        ..TrainConfig::default()
    })?;
    let model = outcome.model;

    let scene = &eval_set.scenes[0];
    for (q, r) in scene.queries.iter().zip(model.ground_scene(scene)?) {
        println!("\"{}\"", eval_set.header.decode(&q.tokens).join(" "));
        println!(
            "  weights s {:.2} l {:.2} c {:.2}",
            r.cue_weights[0], r.cue_weights[1], r.cue_weights[2]
        );
        for i in 0..scene.len() {
            let mark = match (i == r.selected, Some(i) == q.gt_index()) {
                (true, true) => "<- selected, correct",
                (true, false) => "<- selected",
                (false, true) => "<- ground truth",
                _ => "",
            };
            println!(
                "  {i} {:<7} s {:.3} l {:.3} c {:.3} final {:.3} {}{mark}",
                eval_set.header.categories[scene.proposals[i].category],
                r.cue_scores[0][i],
                r.cue_scores[1][i],
                r.cue_scores[2][i],
                r.final_scores[i],
                if r.keep_mask[i] { "" } else { "(filtered) " },
            );
        }
    }
    Ok(())
}
