//! Small ablation grid over the location cue and the hard subject filter.
//!
//! ```text
//! cargo run --release --example ablation -- [iterations] [toggles]
//! ```

use earn::eval::{parse_toggles, run_ablation};
use earn::synth::{generate, SynthConfig};
use earn::TrainConfig;

fn main() -> earn::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations: u64 = args.next().map_or(500, |s| s.parse().expect("iteration count"));
    let toggles = parse_toggles(&args.next().unwrap_or_else(|| "loc,hard".into()))?;

    let (train_set, eval_set) = generate(&SynthConfig::default())?;
    let base = TrainConfig {
        max_iterations: iterations,
        ..TrainConfig::default()
    };
    let table = run_ablation(&train_set, &eval_set, &base, &toggles, &[0], |label, seed, r| {
        eprintln!("{label} seed {seed}: {:.3}", r.accuracy);
    })?;
    table.write("ablation")?;
    println!("{:<14} {:>8} {:>10}", "setting", "accuracy", "candidates");
    for row in &table.rows {
        println!("{:<14} {:>8.3} {:>10.2}", row.label, row.mean_accuracy, row.mean_candidates);
    }
    Ok(())
}
