use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use earn::checkpoint::Checkpoint;
use earn::eval::{evaluate, parse_toggles, run_ablation};
use earn::synth::{generate, load_config, SynthConfig};
use earn::train::{save_metrics, Trainer};
use earn::{load_dataset, save_dataset, Error, Result, TrainConfig};

#[derive(Parser)]
#[command(name = "earn", version, about = "Weakly supervised referring-expression grounding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/eval pair in JSON Lines format.
    Generate {
        /// TOML or JSON benchmark config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training set path. The eval set goes next to it as `<stem>.eval.jsonl`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        eval_out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write checkpoint.earn, metrics.csv and config.json.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Evaluate on this set after training.
        #[arg(long)]
        eval: Option<PathBuf>,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Evaluate a checkpoint; writes report.json, report.csv and the prediction log.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
    },
    /// Train and evaluate one model per toggle combination and seed.
    Ablate {
        #[arg(long)]
        train_data: PathBuf,
        #[arg(long)]
        eval_data: PathBuf,
        /// Comma separated subset of adp,lan,att,ent,scxtp,loc,cxt,hard,soft,distp.
        #[arg(long, default_value = "")]
        toggles: String,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Render metrics, ablation or prediction CSV logs to SVG charts.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
}

/// Overrides applied on top of `--config` (or the defaults).
#[derive(Args, Clone, Default)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    lr_decay_factor: Option<f64>,
    #[arg(long)]
    lr_decay_every: Option<u64>,
    #[arg(long)]
    max_iterations: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    word_vectors: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// none, soft or hard.
    #[arg(long)]
    filter_mode: Option<String>,
    #[arg(long)]
    filter_threshold: Option<f64>,
    /// 5cxtp, mcxtp or scxtp.
    #[arg(long)]
    context_mode: Option<String>,
    #[arg(long)]
    distance_penalty: Option<bool>,
    #[arg(long)]
    entity_enhancement: Option<bool>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    match_hidden: Option<usize>,
}

fn enum_value<T: serde::de::DeserializeOwned>(flag: &str, v: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(v.to_string()))
        .map_err(|_| Error::Config(format!("--{flag}: unknown value `{v}`")))
}

impl TrainArgs {
    fn resolve(&self, base: Option<TrainConfig>) -> Result<TrainConfig> {
        let mut c = match (&self.config, base) {
            (Some(p), _) => load_config::<TrainConfig>(p)?,
            (None, Some(b)) => b,
            (None, None) => TrainConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { $target = v; })*
            };
        }
        set! {
            learning_rate => c.learning_rate,
            lr_decay_factor => c.lr_decay_factor,
            lr_decay_every => c.lr_decay_every,
            max_iterations => c.max_iterations,
            seed => c.seed,
            alpha => c.loss.alpha,
            beta => c.loss.beta,
            gamma => c.loss.gamma,
            lambda => c.loss.lambda,
            filter_threshold => c.model.filter_threshold,
            distance_penalty => c.model.distance_penalty,
            entity_enhancement => c.model.entity_enhancement,
            embed_dim => c.model.embed_dim,
            hidden_dim => c.model.hidden_dim,
            match_hidden => c.model.match_hidden,
        }
        if let Some(p) = &self.word_vectors {
            c.word_vectors = Some(p.clone());
        }
        if let Some(v) = &self.filter_mode {
            c.model.filter_mode = enum_value("filter-mode", v)?;
        }
        if let Some(v) = &self.context_mode {
            c.model.context_mode = enum_value("context-mode", v)?;
        }
        c.validate()?;
        Ok(c)
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let s = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, s).map_err(|source| Error::Io { path: path.into(), source })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.into(), source })
}

fn print_report(report: &earn::eval::EvalReport) {
    println!("accuracy {:.4} ({}/{})", report.accuracy, report.correct, report.count);
    for (k, s) in &report.breakdown {
        println!("  {k:<9} {:.4} ({}/{})", s.accuracy, s.correct, s.count);
    }
    println!("mean surviving candidates {:.2}", report.mean_candidates);
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, out, eval_out, seed } => {
            let mut c = match config {
                Some(p) => SynthConfig::load(p)?,
                None => SynthConfig::default(),
            };
            if let Some(s) = seed {
                c.seed = s;
            }
            c.validate()?;
            let (train, eval) = generate(&c)?;
            let eval_out = eval_out.unwrap_or_else(|| out.with_extension("eval.jsonl"));
            save_dataset(&train, &out)?;
            save_dataset(&eval, &eval_out)?;
            println!(
                "wrote {} ({} scenes, {} queries) and {} ({} scenes, {} queries)",
                out.display(),
                train.scenes.len(),
                train.num_queries(),
                eval_out.display(),
                eval.scenes.len(),
                eval.num_queries()
            );
        }
        Command::Train { data, eval, resume, out, train } => {
            let dataset = load_dataset(&data)?;
            let mut trainer = match resume {
                Some(p) => {
                    let ckpt = Checkpoint::load(p)?;
                    let config = train.resolve(Some(ckpt.config.clone()))?;
                    Trainer::resume(ckpt, &dataset, Some(config))?
                }
                None => Trainer::new(train.resolve(None)?, &dataset)?,
            };
            create_dir(&out)?;
            write_json(&out.join("config.json"), &trainer.config)?;
            let total = trainer.config.max_iterations;
            let every = (total / 20).max(1);
            let metrics = trainer.run(|row| {
                if (row.iteration + 1) % every == 0 {
                    eprintln!(
                        "iteration {:>6}/{total} loss {:.4} lr {:.1e}",
                        row.iteration + 1,
                        row.bundle.total,
                        row.lr
                    );
                }
            })?;
            save_metrics(&metrics, out.join("metrics.csv"))?;
            trainer.checkpoint().save(out.join("checkpoint.earn"))?;
            println!("wrote {}", out.display());
            if let Some(p) = eval {
                let report = evaluate(&trainer.model, &load_dataset(p)?)?;
                report.write(&out, "report")?;
                print_report(&report);
            }
        }
        Command::Evaluate { checkpoint, data, out } => {
            let model = Checkpoint::load(checkpoint)?.model()?;
            let report = evaluate(&model, &load_dataset(data)?)?;
            report.write(&out, "report")?;
            print_report(&report);
        }
        Command::Ablate { train_data, eval_data, toggles, seeds, out, train } => {
            let toggles = parse_toggles(&toggles)?;
            let base = train.resolve(None)?;
            let train_set = load_dataset(train_data)?;
            let eval_set = load_dataset(eval_data)?;
            let table = run_ablation(&train_set, &eval_set, &base, &toggles, &seeds, |label, seed, r| {
                eprintln!("{label:<30} seed {seed}: accuracy {:.4}", r.accuracy);
            })?;
            table.write(&out)?;
            for r in &table.rows {
                println!("{:<30} {:.4}  candidates {:.2}", r.label, r.mean_accuracy, r.mean_candidates);
            }
        }
        Command::Report { inputs, out } => {
            for input in inputs {
                for p in earn::report::render(&input, &out)? {
                    println!("wrote {}", p.display());
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
