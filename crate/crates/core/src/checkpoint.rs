//! Checkpoint archive.
//!
//! Byte layout:
//!
//! | offset | size | content                                   |
//! |--------|------|-------------------------------------------|
//! | 0      | 8    | magic `EARNCKP1`                          |
//! | 8      | 8    | manifest length `m`, u64 little endian    |
//! | 16     | m    | UTF-8 JSON manifest                       |
//! | 16 + m | 8·k  | `k` f64 values, little endian             |
//!
//! The manifest lists every array as `{name, rows, cols, offset}` where
//! `offset` counts f64 elements from the start of the data section. Arrays
//! are stored row-major. Names: `param/<parameter>`, `adam.m/<parameter>`,
//! `adam.v/<parameter>`, `lexicon.tokens`, `lexicon.categories`,
//! `attribute_weights`.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::data::DatasetHeader;
use crate::error::{Error, Result};
use crate::model::{Earn, Lexicon, ModelDims};
use crate::train::{Adam, AdamSlot, EpochCursor, TrainConfig};

pub const MAGIC: &[u8; 8] = b"EARNCKP1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamManifest {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Per-parameter update counts, in parameter order.
    pub steps: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: TrainConfig,
    pub dims: ModelDims,
    pub iteration: u64,
    pub cursor: EpochCursor,
    pub parameters: Vec<String>,
    pub adam: Option<AdamManifest>,
    pub arrays: Vec<ArrayEntry>,
}

/// Model parameters, optimizer state and the position in the training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub dims: ModelDims,
    pub iteration: u64,
    pub cursor: EpochCursor,
    pub lexicon: Lexicon,
    pub attribute_weights: Vec<f64>,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<Adam>,
}

impl Checkpoint {
    pub fn capture(
        config: &TrainConfig,
        model: &Earn,
        optimizer: Option<&Adam>,
        iteration: u64,
        cursor: EpochCursor,
    ) -> Self {
        let mut config = config.clone();
        config.model = model.config;
        Self {
            config,
            dims: model.dims,
            iteration,
            cursor,
            lexicon: model.lexicon.clone(),
            attribute_weights: model.attribute_weights.clone(),
            params: model
                .store
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
            optimizer: optimizer.cloned(),
        }
    }

    /// Rebuilds the model (and the optimizer, when saved).
    pub fn into_parts(self) -> Result<(Earn, Option<Adam>)> {
        let mut model = Earn::new(
            self.config.model,
            self.dims,
            self.lexicon,
            &vec![0; self.dims.attribute_count],
            self.config.seed,
        )?;
        if model.store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                model.store.len(),
                self.params.len()
            )));
        }
        for (name, t) in self.params {
            let id = model
                .store
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            let slot = model.store.get_mut(id);
            if slot.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        if self.attribute_weights.len() != model.attribute_weights.len() {
            return Err(Error::Checkpoint("attribute weight count mismatch".into()));
        }
        model.attribute_weights = self.attribute_weights;
        Ok((model, self.optimizer))
    }

    pub fn model(&self) -> Result<Earn> {
        Ok(self.clone().into_parts()?.0)
    }

    /// Errors when `header` describes data the model cannot consume.
    pub fn check_dataset(&self, header: &DatasetHeader) -> Result<()> {
        check_dims(&self.dims, header)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut arrays = Vec::new();
        let mut data: Vec<f64> = Vec::new();
        let mut push = |name: String, t: &Tensor| {
            arrays.push(ArrayEntry {
                name,
                rows: t.rows,
                cols: t.cols,
                offset: data.len(),
            });
            data.extend_from_slice(&t.data);
        };
        for (n, t) in &self.params {
            push(format!("param/{n}"), t);
        }
        if let Some(adam) = &self.optimizer {
            for ((n, _), s) in self.params.iter().zip(&adam.slots) {
                push(format!("adam.m/{n}"), &s.m);
                push(format!("adam.v/{n}"), &s.v);
            }
        }
        let d = self.dims.word_vector_dim;
        push("lexicon.tokens".into(), &Tensor::from_rows(&self.lexicon.token_vectors, d));
        push("lexicon.categories".into(), &Tensor::from_rows(&self.lexicon.category_vectors, d));
        push("attribute_weights".into(), &Tensor::row_vector(self.attribute_weights.clone()));

        let manifest = Manifest {
            config: self.config.clone(),
            dims: self.dims,
            iteration: self.iteration,
            cursor: self.cursor,
            parameters: self.params.iter().map(|(n, _)| n.clone()).collect(),
            adam: self.optimizer.as_ref().map(|a| AdamManifest {
                beta1: a.beta1,
                beta2: a.beta2,
                epsilon: a.epsilon,
                steps: a.slots.iter().map(|s| s.steps).collect(),
            }),
            arrays,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 8 * data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint archive"));
        }
        let m = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + m).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        let raw = &bytes[16 + m..];
        if raw.len() % 8 != 0 {
            return Err(bad("data section is not a whole number of f64 values"));
        }
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut arrays: HashMap<&str, Tensor> = HashMap::new();
        for a in &manifest.arrays {
            let end = a.offset + a.rows * a.cols;
            let slice = data
                .get(a.offset..end)
                .ok_or_else(|| Error::Checkpoint(format!("array `{}` out of bounds", a.name)))?;
            arrays.insert(a.name.as_str(), Tensor::from_vec(a.rows, a.cols, slice.to_vec()));
        }
        let mut take = |name: &str| {
            arrays
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))
        };
        let params = manifest
            .parameters
            .iter()
            .map(|n| Ok((n.clone(), take(&format!("param/{n}"))?)))
            .collect::<Result<Vec<_>>>()?;
        let optimizer = match &manifest.adam {
            None => None,
            Some(a) => {
                if a.steps.len() != params.len() {
                    return Err(bad("optimizer step counts do not match parameters"));
                }
                let slots = manifest
                    .parameters
                    .iter()
                    .zip(&a.steps)
                    .map(|(n, &steps)| {
                        Ok(AdamSlot {
                            m: take(&format!("adam.m/{n}"))?,
                            v: take(&format!("adam.v/{n}"))?,
                            steps,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(Adam {
                    beta1: a.beta1,
                    beta2: a.beta2,
                    epsilon: a.epsilon,
                    slots,
                })
            }
        };
        let rows = |t: Tensor| (0..t.rows).map(|r| t.row(r).to_vec()).collect::<Vec<_>>();
        let lexicon = Lexicon {
            token_vectors: rows(take("lexicon.tokens")?),
            category_vectors: rows(take("lexicon.categories")?),
        };
        let attribute_weights = take("attribute_weights")?.data;
        Ok(Self {
            config: manifest.config,
            dims: manifest.dims,
            iteration: manifest.iteration,
            cursor: manifest.cursor,
            lexicon,
            attribute_weights,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn check_dims(dims: &ModelDims, header: &DatasetHeader) -> Result<()> {
    let pairs = [
        ("vocabulary size", dims.vocab_size, header.vocab.len()),
        ("attribute count", dims.attribute_count, header.attribute_vocab.len()),
        ("subject feature dim", dims.subject_dim, header.feature_dims.subject),
        ("context feature dim", dims.context_dim, header.feature_dims.context),
    ];
    for (what, model, data) in pairs {
        if model != data {
            return Err(Error::Dimension(format!(
                "{what}: model has {model}, dataset has {data}"
            )));
        }
    }
    Ok(())
}
