//! Weakly supervised training: one Adam step per image, step-decayed
//! learning rate, sequential epochs over a seeded shuffle.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, ParamStore, Tensor};
use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, DatasetHeader, Scene};
use crate::entity::WordVectorTable;
use crate::error::{Error, Result};
use crate::model::{Earn, ModelConfig, SceneFeatures};
use crate::reconstruct::{LossBundle, LossWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: u64,
    pub max_iterations: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    /// Word vector file (`word v1 … vD` per line). One-hot vectors over the
    /// vocabulary are used when absent.
    pub word_vectors: Option<PathBuf>,
    #[serde(flatten)]
    pub loss: LossWeights,
    #[serde(flatten)]
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 4e-4,
            lr_decay_factor: 10.0,
            lr_decay_every: 8000,
            max_iterations: 30000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
            word_vectors: None,
            loss: LossWeights::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.lr_decay_factor > 1.0 && self.lr_decay_factor.is_finite()) {
            return bad("learning rate decay factor must exceed 1");
        }
        if self.lr_decay_every == 0 {
            return bad("decay interval must be positive");
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be at least 1");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.adam_epsilon > 0.0) {
            return bad("Adam epsilon must be positive");
        }
        let w = self.loss;
        if [w.alpha, w.beta, w.gamma, w.lambda]
            .iter()
            .any(|c| !(c.is_finite() && *c >= 0.0))
        {
            return bad("loss coefficients must be finite and nonnegative");
        }
        self.model.validate()
    }

    /// Learning rate used by the update at zero-based step `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        lr_at(self.learning_rate, self.lr_decay_factor, self.lr_decay_every, step)
    }

    pub fn word_vector_table(&self, header: &DatasetHeader) -> Result<WordVectorTable> {
        match &self.word_vectors {
            Some(p) => WordVectorTable::load(p),
            None => Ok(WordVectorTable::one_hot(&header.vocab[1.min(header.vocab.len())..])),
        }
    }
}

/// `lr0 / decay^⌊step / every⌋`.
pub fn lr_at(lr0: f64, decay: f64, every: u64, step: u64) -> f64 {
    lr0 / decay.powi((step / every) as i32)
}

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlot {
    pub m: Tensor,
    pub v: Tensor,
    /// Number of updates this parameter has received.
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub slots: Vec<AdamSlot>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let slots = store
            .iter()
            .map(|(_, t)| AdamSlot {
                m: Tensor::zeros(t.rows, t.cols),
                v: Tensor::zeros(t.rows, t.cols),
                steps: 0,
            })
            .collect();
        Self {
            beta1,
            beta2,
            epsilon,
            slots,
        }
    }

    /// Applies one update. Parameters without a gradient are left untouched,
    /// moments included.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let slot = &mut self.slots[id.0];
            slot.steps += 1;
            let c1 = 1.0 - self.beta1.powi(slot.steps as i32);
            let c2 = 1.0 - self.beta2.powi(slot.steps as i32);
            let p = store.get_mut(id);
            for k in 0..g.data.len() {
                let gk = g.data[k];
                let m = self.beta1 * slot.m.data[k] + (1.0 - self.beta1) * gk;
                let v = self.beta2 * slot.v.data[k] + (1.0 - self.beta2) * gk * gk;
                slot.m.data[k] = m;
                slot.v.data[k] = v;
                p.data[k] -= lr * (m / c1) / ((v / c2).sqrt() + self.epsilon);
            }
        }
    }
}

/// Position in the stream of shuffled epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EpochCursor {
    pub epoch: u64,
    pub position: usize,
}

/// Image order for one epoch; a pure function of the seed and epoch number.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_e90c);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// One logged training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    /// Zero-based step index; the learning rate is the schedule at this step.
    pub iteration: u64,
    pub scene: usize,
    pub bundle: LossBundle,
    pub lr: f64,
}

/// Copy of the dataset with every ground-truth index removed. Training only
/// ever sees this copy.
pub fn strip_ground_truth(dataset: &Dataset) -> Dataset {
    let mut d = dataset.clone();
    for q in d.scenes.iter_mut().flat_map(|s| s.queries.iter_mut()) {
        q.set_gt_index(None);
    }
    d
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Earn,
    pub optimizer: Adam,
    iteration: u64,
    cursor: EpochCursor,
    order: Vec<usize>,
    scenes: Vec<Scene>,
    features: Vec<SceneFeatures>,
}

impl Trainer {
    /// Fresh model and optimizer for `dataset`.
    pub fn new(config: TrainConfig, dataset: &Dataset) -> Result<Self> {
        config.validate()?;
        let table = config.word_vector_table(&dataset.header)?;
        let counts = dataset.attribute_counts();
        let model = Earn::for_dataset(config.model, &dataset.header, &table, &counts, config.seed)?;
        let optimizer = Adam::new(
            &model.store,
            config.adam_beta1,
            config.adam_beta2,
            config.adam_epsilon,
        );
        Self::assemble(config, model, optimizer, 0, EpochCursor::default(), dataset)
    }

    /// Continues from a checkpoint. `config` may change the iteration budget
    /// but nothing that shapes the model or the trajectory.
    pub fn resume(checkpoint: Checkpoint, dataset: &Dataset, config: Option<TrainConfig>) -> Result<Self> {
        let config = match config {
            Some(c) => {
                check_resumable(&checkpoint.config, &c)?;
                c
            }
            None => checkpoint.config.clone(),
        };
        config.validate()?;
        checkpoint.check_dataset(&dataset.header)?;
        let iteration = checkpoint.iteration;
        let cursor = checkpoint.cursor;
        let (model, optimizer) = checkpoint.into_parts()?;
        let optimizer = optimizer.ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        Self::assemble(config, model, optimizer, iteration, cursor, dataset)
    }

    fn assemble(
        config: TrainConfig,
        model: Earn,
        optimizer: Adam,
        iteration: u64,
        cursor: EpochCursor,
        dataset: &Dataset,
    ) -> Result<Self> {
        if dataset.scenes.is_empty() {
            return Err(Error::Config("training set has no scenes".into()));
        }
        dataset.validate()?;
        let scenes = strip_ground_truth(dataset).scenes;
        let features = scenes.iter().map(|s| model.scene_features(s)).collect();
        let order = epoch_order(config.seed, cursor.epoch, scenes.len());
        if cursor.position > scenes.len() {
            return Err(Error::Checkpoint("epoch cursor beyond dataset size".into()));
        }
        Ok(Self {
            config,
            model,
            optimizer,
            iteration,
            cursor,
            order,
            scenes,
            features,
        })
    }

    /// Number of completed updates.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn cursor(&self) -> EpochCursor {
        self.cursor
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.max_iterations
    }

    fn next_scene(&mut self) -> usize {
        if self.cursor.position == self.order.len() {
            self.cursor = EpochCursor {
                epoch: self.cursor.epoch + 1,
                position: 0,
            };
            self.order = epoch_order(self.config.seed, self.cursor.epoch, self.scenes.len());
        }
        let s = self.order[self.cursor.position];
        self.cursor.position += 1;
        s
    }

    /// Loss of the next image without updating anything.
    pub fn peek_loss(&self) -> Result<LossBundle> {
        let mut probe = self.cursor;
        if probe.position == self.order.len() {
            probe = EpochCursor {
                epoch: probe.epoch + 1,
                position: 0,
            };
        }
        let order = epoch_order(self.config.seed, probe.epoch, self.scenes.len());
        let s = order[probe.position];
        let views = self.scenes[s].query_views();
        Ok(self
            .model
            .loss_and_gradients(&self.features[s], &views, self.config.loss)?
            .0)
    }

    /// One forward/backward pass and Adam update on the next image.
    pub fn step(&mut self) -> Result<MetricRow> {
        let s = self.next_scene();
        let scene = &self.scenes[s];
        debug_assert!(scene.queries.iter().all(|q| q.gt_index().is_none()));
        let views = scene.query_views();
        let (bundle, grads) = self
            .model
            .loss_and_gradients(&self.features[s], &views, self.config.loss)?;
        if let Some(term) = bundle.non_finite_term() {
            return Err(Error::NonFiniteLoss {
                term,
                iteration: self.iteration,
            });
        }
        let lr = self.config.lr_at(self.iteration);
        self.optimizer.step(&mut self.model.store, &grads, lr);
        let row = MetricRow {
            iteration: self.iteration,
            scene: s,
            bundle,
            lr,
        };
        self.iteration += 1;
        Ok(row)
    }

    /// Steps until `max_iterations`, calling `on_step` after every update.
    pub fn run(&mut self, mut on_step: impl FnMut(&MetricRow)) -> Result<Vec<MetricRow>> {
        let mut rows = Vec::new();
        while !self.is_done() {
            let row = self.step()?;
            on_step(&row);
            rows.push(row);
        }
        Ok(rows)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.config, &self.model, Some(&self.optimizer), self.iteration, self.cursor)
    }

    pub fn into_model(self) -> Earn {
        self.model
    }
}

/// Everything except the iteration budget must match for a resumed run to
/// continue the same trajectory.
fn check_resumable(saved: &TrainConfig, new: &TrainConfig) -> Result<()> {
    let mut a = saved.clone();
    a.max_iterations = new.max_iterations;
    a.word_vectors = new.word_vectors.clone();
    if a.model != new.model {
        return Err(Error::Config("model configuration differs from the checkpoint".into()));
    }
    if a != *new {
        return Err(Error::Config("training configuration differs from the checkpoint".into()));
    }
    Ok(())
}

/// Result of a complete training run.
pub struct TrainOutcome {
    pub model: Earn,
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricRow>,
}

/// Trains a fresh model to `config.max_iterations`.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    finish(Trainer::new(config.clone(), dataset)?)
}

/// Continues a checkpointed run to the budget of `config` (or the saved
/// config when `None`).
pub fn resume(checkpoint: Checkpoint, dataset: &Dataset, config: Option<TrainConfig>) -> Result<TrainOutcome> {
    finish(Trainer::resume(checkpoint, dataset, config)?)
}

fn finish(mut trainer: Trainer) -> Result<TrainOutcome> {
    let metrics = trainer.run(|_| {})?;
    let checkpoint = trainer.checkpoint();
    Ok(TrainOutcome {
        model: trainer.into_model(),
        checkpoint,
        metrics,
    })
}

pub fn metrics_header() -> Vec<&'static str> {
    let mut h = vec!["iteration"];
    h.extend(LossBundle::TERM_NAMES);
    h.push("lr");
    h
}

/// Writes the metrics log as CSV.
pub fn write_metrics<W: Write>(rows: &[MetricRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Config(format!("metrics log: {e}"));
    w.write_record(metrics_header()).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![r.iteration.to_string()];
        rec.extend(r.bundle.terms().iter().map(|v| format!("{v:e}")));
        rec.push(format!("{:e}", r.lr));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<metrics>", e))?;
    Ok(())
}

pub fn save_metrics(rows: &[MetricRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_metrics(rows, std::io::BufWriter::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 4e-4);
        assert_eq!(c.lr_at(7999), 4e-4);
        assert_eq!(c.lr_at(8001), 4e-4 / 10.0);
        assert_eq!(c.lr_at(16000), 4e-4 / 100.0);
    }

    #[test]
    fn validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.lr_decay_factor = 1.0;
        assert!(c.validate().is_err());
        c = TrainConfig {
            max_iterations: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::row_vector(vec![1.0, -2.0, 0.5]));
        let mut adam = Adam::new(&store, 0.9, 0.999, 1e-8);
        let grads = Gradients {
            by_param: vec![Some(Tensor::row_vector(vec![0.3, -4.0, 0.0]))],
        };
        adam.step(&mut store, &grads, 0.1);
        let p = &store.get(id).data;
        // bias-corrected first step is lr·sign(g)
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 1.9).abs() < 1e-6);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn epochs_are_permutations() {
        let a = epoch_order(3, 0, 10);
        let b = epoch_order(3, 1, 10);
        assert_ne!(a, b);
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(3, 0, 10));
    }

    #[test]
    fn config_formats() {
        let t: TrainConfig = toml::from_str("alpha = 0.5\nembed_dim = 16\nfilter_mode = \"soft\"\n").unwrap();
        assert_eq!(t.loss.alpha, 0.5);
        assert_eq!(t.loss.beta, 1.0);
        assert_eq!(t.model.embed_dim, 16);
        let j: TrainConfig = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        assert_eq!(j, t);
    }
}
