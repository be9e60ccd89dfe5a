//! Trains on a generated benchmark and reports accuracy before and after.
//!
//! ```text
//! cargo run --release --example train_synthetic -- [iterations] [seed]
//! ```

use std::time::Instant;

use earn::eval::evaluate;
use earn::synth::{generate, SynthConfig};
use earn::train::{TrainConfig, Trainer};

fn main() -> earn::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations: u64 = args.next().map_or(3000, |s| s.parse().expect("iteration count"));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));

    let (train_set, eval_set) = generate(&SynthConfig {
        seed,
        ..SynthConfig::default()
    })?;
    let config = TrainConfig {
        max_iterations: iterations,
        seed,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(config, &train_set)?;
    let before = evaluate(&trainer.model, &eval_set)?;
    println!("untrained accuracy {:.3} over {} queries", before.accuracy, before.count);

    let start = Instant::now();
    let mut window = 0.0;
    trainer.run(|row| {
        window += row.bundle.total;
        if (row.iteration + 1) % 250 == 0 {
            println!(
                "iter {:>5}  mean total {:.4}  lr {:.1e}  {:.1}s",
                row.iteration + 1,
                window / 250.0,
                row.lr,
                start.elapsed().as_secs_f64()
            );
            window = 0.0;
        }
    })?;

    let after = evaluate(&trainer.model, &eval_set)?;
    println!("trained accuracy {:.3}", after.accuracy);
    for (kind, s) in &after.breakdown {
        println!("  {kind:<9} {:.3} ({} queries, {:.2} candidates)", s.accuracy, s.count, s.mean_candidates);
    }
    Ok(())
}
