//! Splits a run in two through a checkpoint file and confirms the result
//! matches an uninterrupted run bit for bit.

use earn::checkpoint::Checkpoint;
use earn::synth::{generate, SynthConfig};
use earn::train::{TrainConfig, Trainer};

fn main() -> earn::Result<()> {
    let (data, _) = generate(&SynthConfig {
        n_scenes: 60,
        n_eval_scenes: 1,
        ..SynthConfig::default()
    })?;
    let config = |n| TrainConfig {
        max_iterations: n,
        seed: 4,
        ..TrainConfig::default()
    };

    let mut straight = Trainer::new(config(80), &data)?;
    let all = straight.run(|_| {})?;

    let path = std::env::temp_dir().join("earn_example.earn");
    let mut first = Trainer::new(config(35), &data)?;
    first.run(|_| {})?;
    first.checkpoint().save(&path)?;
    println!("saved iteration {} to {}", first.iteration(), path.display());

    let mut second = Trainer::resume(Checkpoint::load(&path)?, &data, Some(config(80)))?;
    let tail = second.run(|_| {})?;
    let same = tail.iter().zip(&all[35..]).all(|(a, b)| a.bundle.total.to_bits() == b.bundle.total.to_bits());
    let params_same = straight.checkpoint().params == second.checkpoint().params;
    println!("losses identical: {same}, parameters identical: {params_same}");
    std::fs::remove_file(&path).ok();
    Ok(())
}
