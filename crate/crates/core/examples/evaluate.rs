//! Trains for a few hundred steps, evaluates, and writes the JSON, CSV and
//! per-query prediction reports.
//!
//! ```text
//! cargo run --release --example evaluate -- [out_dir]
//! ```

use earn::eval::{evaluate, read_predictions, recount};
use earn::synth::{generate, SynthConfig};
use earn::train::{train, TrainConfig};

fn main() -> earn::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "eval".into());
    let (train_set, eval_set) = generate(&SynthConfig::default())?;
    let outcome = train(&train_set, &TrainConfig {
        max_iterations: 300,
        ..TrainConfig::default()
    })?;
    let report = evaluate(&outcome.model, &eval_set)?;
    report.write(&out, "report")?;

    println!("accuracy {:.3} ({}/{})", report.accuracy, report.correct, report.count);
    for (kind, s) in &report.breakdown {
        println!("  {kind:<9} {:.3} over {}", s.accuracy, s.count);
    }
    let log = read_predictions(format!("{out}/report_predictions.csv"))?;
    println!("recounted from the prediction log: {:.3}", recount(&log));
    Ok(())
}
