//! Trains briefly, logs metrics and predictions, and renders SVG charts from
//! the logs.
//!
//! ```text
//! cargo run --release --example render_report -- [out_dir]
//! ```

use std::path::PathBuf;

use earn::eval::evaluate;
use earn::report::render;
use earn::synth::{generate, SynthConfig};
use earn::train::{save_metrics, TrainConfig, Trainer};

fn main() -> earn::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "plots".into()));
    std::fs::create_dir_all(&out).map_err(|e| earn::Error::io(&out, e))?;
    let (train_set, eval_set) = generate(&SynthConfig::default())?;
    let mut trainer = Trainer::new(TrainConfig {
        max_iterations: 400,
        ..TrainConfig::default()
    }, &train_set)?;
    let rows = trainer.run(|_| {})?;
    save_metrics(&rows, out.join("metrics.csv"))?;
    evaluate(&trainer.model, &eval_set)?.write(&out, "report")?;

    for log in ["metrics.csv", "report_predictions.csv"] {
        for svg in render(out.join(log), &out)? {
            println!("wrote {}", svg.display());
        }
    }
    Ok(())
}
