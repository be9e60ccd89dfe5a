//! Runs the language encoder on one query and prints the word attention of
//! each cue and the cue weights.
//!
//! ```text
//! cargo run --example encode_query -- [words...]
//! ```

use earn::synth::{generate, SynthConfig};
use earn::{Earn, ModelConfig, TrainConfig};

fn main() -> earn::Result<()> {
    let words: Vec<String> = std::env::args().skip(1).collect();
    let (data, _) = generate(&SynthConfig {
        n_scenes: 20,
        n_eval_scenes: 1,
        ..SynthConfig::default()
    })?;
    let header = &data.header;
    let table = TrainConfig::default().word_vector_table(header)?;
    let model = Earn::for_dataset(ModelConfig::default(), header, &table, &data.attribute_counts(), 0)?;

    let tokens = if words.is_empty() {
        data.scenes[0].queries[0].tokens.clone()
    } else {
        header.encode(&words.iter().map(String::as_str).collect::<Vec<_>>())
    };
    let enc = model.modules.lang.encode_query(&model.store, &tokens)?;
    let text = header.decode(&tokens);
    println!("query: {}", text.join(" "));
    println!("cue weights  subject {:.3}  location {:.3}  context {:.3}", enc.w_s, enc.w_l, enc.w_c);
    for (name, attn) in ["subject", "location", "context"].iter().zip(&enc.word_attn) {
        let row: Vec<String> = text.iter().zip(attn).map(|(w, a)| format!("{w}:{a:.2}")).collect();
        println!("{name:<9} {}", row.join(" "));
    }
    println!("phrase embedding dim {}", enc.q_s.len());
    Ok(())
}
