//! Compares the tape gradient of the full training loss with central finite
//! differences over every parameter of a small model.

use earn::autograd::{finite_difference_check, Graph};
use earn::reconstruct::LossWeights;
use earn::synth::{generate, SynthConfig};
use earn::{Earn, ModelConfig, TrainConfig};

fn main() -> earn::Result<()> {
    let (mut data, _) = generate(&SynthConfig {
        n_scenes: 1,
        n_eval_scenes: 1,
        proposals_per_scene: 4,
        queries_per_scene: 2,
        ..SynthConfig::default()
    })?;
    data.scenes.truncate(1);
    let config = ModelConfig {
        embed_dim: 6,
        hidden_dim: 4,
        match_hidden: 4,
        ..ModelConfig::default()
    };
    let table = TrainConfig::default().word_vector_table(&data.header)?;
    let model = Earn::for_dataset(config, &data.header, &table, &data.attribute_counts(), 1)?;
    let scene = &data.scenes[0];
    let feats = model.scene_features(scene);
    let views = scene.query_views();
    let weights = LossWeights::default();

    let ids: Vec<_> = model.store.ids().collect();
    let mut store = model.store.clone();
    let report = finite_difference_check(&mut store, &ids, 1e-5, 1e-6, |g: &mut Graph| {
        let fwd = model.forward(g, &feats, &views, weights, true).expect("forward");
        fwd.losses.total.expect("loss is built")
    });
    println!("checked {} scalars, worst relative error {:.2e}", report.checked, report.worst_rel);
    if let Some((name, k, analytic, numeric)) = report.worst {
        println!("  at {name}[{k}]: tape {analytic:.6e}, finite difference {numeric:.6e}");
    }
    Ok(())
}
