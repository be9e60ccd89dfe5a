//! Generates a synthetic benchmark, writes it as JSON lines and prints a few
//! decoded queries.
//!
//! ```text
//! cargo run --example generate_benchmark -- [out_dir] [seed]
//! ```

use std::path::PathBuf;

use earn::synth::{generate, SynthConfig};
use earn::{save_dataset, QueryKind};

fn main() -> earn::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "bench".into()));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));
    std::fs::create_dir_all(&dir).map_err(|e| earn::Error::io(&dir, e))?;

    let (train, eval) = generate(&SynthConfig {
        seed,
        ..SynthConfig::default()
    })?;
    save_dataset(&train, dir.join("train.jsonl"))?;
    save_dataset(&eval, dir.join("eval.jsonl"))?;
    println!("{} train scenes, {} eval scenes in {}", train.scenes.len(), eval.scenes.len(), dir.display());

    for kind in QueryKind::ALL {
        let n = train.scenes.iter().flat_map(|s| &s.queries).filter(|q| q.kind == Some(kind)).count();
        println!("  {:<9} {n}", kind.name());
    }
    let scene = &train.scenes[0];
    for q in &scene.queries {
        let gt = q.gt_index().expect("generated queries carry ground truth");
        println!(
            "\"{}\" -> proposal {gt} {:?}",
            train.header.decode(&q.tokens).join(" "),
            scene.proposals[gt].bbox.corners()
        );
    }
    Ok(())
}
