//! Query encoder: word embeddings, a bidirectional LSTM, one attention head
//! per cue, and the cue weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, LstmCell, INIT_BOUND};

/// The three aspects a query can describe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cue {
    Subject,
    Location,
    Context,
}

impl Cue {
    pub const ALL: [Cue; 3] = [Cue::Subject, Cue::Location, Cue::Context];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// What the word attention pools over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhrasePooling {
    /// Word embeddings `e_t`.
    #[default]
    Embeddings,
    /// BiLSTM states `h_t`.
    Hidden,
}

#[derive(Debug, Clone, Copy)]
pub struct LangEncoder {
    pub embedding: ParamId,
    pub forward_cell: LstmCell,
    pub backward_cell: LstmCell,
    pub attention: [Linear; 3],
    pub cue_weights: Linear,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub pooling: PhrasePooling,
}

/// Graph handles produced by one encoder pass.
#[derive(Debug, Clone, Copy)]
pub struct LangVars {
    /// `T × D_e`
    pub embeddings: Var,
    /// `T × 2·D_h`
    pub hidden: Var,
    /// Per cue, `1 × T`.
    pub word_attention: [Var; 3],
    /// Per cue, `1 × phrase_dim`.
    pub phrases: [Var; 3],
    /// `1 × 3`
    pub weights: Var,
}

/// Plain values of an encoder pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LangEncoding {
    pub q_s: Vec<f64>,
    pub q_l: Vec<f64>,
    pub q_c: Vec<f64>,
    pub w_s: f64,
    pub w_l: f64,
    pub w_c: f64,
    pub word_attn: [Vec<f64>; 3],
    pub h_seq: Tensor,
    pub h_ends: Vec<f64>,
}

impl LangEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        vocab_size: usize,
        embed_dim: usize,
        hidden_dim: usize,
        pooling: PhrasePooling,
        rng: &mut R,
    ) -> Self {
        let embedding = store.add(
            "lang.embedding",
            Tensor::uniform(vocab_size, embed_dim, INIT_BOUND, rng),
        );
        let forward_cell = LstmCell::new(store, "lang.lstm_fwd", embed_dim, hidden_dim, rng);
        let backward_cell = LstmCell::new(store, "lang.lstm_bwd", embed_dim, hidden_dim, rng);
        let attention = [
            Linear::new(store, "lang.attn_subject", 2 * hidden_dim, 1, rng),
            Linear::new(store, "lang.attn_location", 2 * hidden_dim, 1, rng),
            Linear::new(store, "lang.attn_context", 2 * hidden_dim, 1, rng),
        ];
        let cue_weights = Linear::new(store, "lang.cue_weights", 4 * hidden_dim, 3, rng);
        Self {
            embedding,
            forward_cell,
            backward_cell,
            attention,
            cue_weights,
            vocab_size,
            embed_dim,
            hidden_dim,
            pooling,
        }
    }

    /// Dimension of the phrase features `q_x`.
    pub fn phrase_dim(&self) -> usize {
        match self.pooling {
            PhrasePooling::Embeddings => self.embed_dim,
            PhrasePooling::Hidden => 2 * self.hidden_dim,
        }
    }

    pub fn embed_tokens(&self, g: &mut Graph, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::EmptyQuery);
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                size: self.vocab_size,
            });
        }
        let table = g.param(self.embedding);
        Ok(g.gather_rows(table, tokens))
    }

    /// Encodes a query. Disabled cues get zero weight; the weights are a
    /// softmax over the enabled ones.
    pub fn forward(&self, g: &mut Graph, tokens: &[usize], enabled: [bool; 3]) -> Result<LangVars> {
        let embeddings = self.embed_tokens(g, tokens)?;
        let t_len = tokens.len();
        let rows: Vec<Var> = (0..t_len).map(|t| g.row(embeddings, t)).collect();

        let mut fwd = Vec::with_capacity(t_len);
        let mut state = None;
        for &x in &rows {
            let s = self.forward_cell.step(g, x, state);
            fwd.push(s.0);
            state = Some(s);
        }
        let mut bwd = vec![rows[0]; t_len];
        let mut state = None;
        for t in (0..t_len).rev() {
            let s = self.backward_cell.step(g, rows[t], state);
            bwd[t] = s.0;
            state = Some(s);
        }
        let per_step: Vec<Var> = (0..t_len).map(|t| g.concat_cols(&[fwd[t], bwd[t]])).collect();
        let hidden = g.concat_rows(&per_step);

        let pooled_source = match self.pooling {
            PhrasePooling::Embeddings => embeddings,
            PhrasePooling::Hidden => hidden,
        };
        let mut word_attention = [embeddings; 3];
        let mut phrases = [embeddings; 3];
        for k in 0..3 {
            let m = self.attention[k].forward(g, hidden);
            let m = g.reshape(m, 1, t_len);
            let a = g.softmax_rows(m, None);
            word_attention[k] = a;
            phrases[k] = g.matmul(a, pooled_source);
        }

        let ends = g.concat_cols(&[per_step[0], per_step[t_len - 1]]);
        let logits = self.cue_weights.forward(g, ends);
        let weights = g.softmax_rows(logits, Some(&enabled));
        Ok(LangVars {
            embeddings,
            hidden,
            word_attention,
            phrases,
            weights,
        })
    }

    /// Runs the encoder on its own and returns plain values.
    pub fn encode_query(&self, store: &ParamStore, tokens: &[usize]) -> Result<LangEncoding> {
        let mut g = Graph::new(store);
        let v = self.forward(&mut g, tokens, [true; 3])?;
        Ok(self.read(&g, &v, tokens.len()))
    }

    pub fn read(&self, g: &Graph, v: &LangVars, t_len: usize) -> LangEncoding {
        let h = g.value(v.hidden).clone();
        let mut h_ends = h.row(0).to_vec();
        h_ends.extend_from_slice(h.row(t_len - 1));
        let w = &g.value(v.weights).data;
        LangEncoding {
            q_s: g.value(v.phrases[0]).data.clone(),
            q_l: g.value(v.phrases[1]).data.clone(),
            q_c: g.value(v.phrases[2]).data.clone(),
            w_s: w[0],
            w_l: w[1],
            w_c: w[2],
            word_attn: std::array::from_fn(|k| g.value(v.word_attention[k]).data.clone()),
            h_seq: h,
            h_ends,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder() -> (ParamStore, LangEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = LangEncoder::new(&mut store, 10, 6, 5, PhrasePooling::Embeddings, &mut rng);
        (store, enc)
    }

    #[test]
    fn single_token_attention_is_trivial() {
        let (store, enc) = encoder();
        let e = enc.encode_query(&store, &[4]).unwrap();
        for a in &e.word_attn {
            assert_eq!(a, &vec![1.0]);
        }
        let row = store.get(enc.embedding).row(4).to_vec();
        assert_eq!(e.q_s, row);
        assert_eq!(e.q_l, row);
        assert_eq!(e.q_c, row);
        assert!((e.w_s + e.w_l + e.w_c - 1.0).abs() < 1e-12);
    }

    #[test]
    fn repeated_tokens_embed_identically() {
        let (store, enc) = encoder();
        let mut g = Graph::new(&store);
        let e = enc.embed_tokens(&mut g, &[7, 0, 7]).unwrap();
        let v = g.value(e);
        assert_eq!(v.row(0), v.row(2));
        assert_eq!(v.row(1), store.get(enc.embedding).row(crate::data::UNK));
    }

    #[test]
    fn invalid_token_sequences() {
        let (store, enc) = encoder();
        assert!(matches!(enc.encode_query(&store, &[]), Err(Error::EmptyQuery)));
        assert!(matches!(
            enc.encode_query(&store, &[1, 10]),
            Err(Error::TokenOutOfRange { id: 10, size: 10 })
        ));
    }

    #[test]
    fn disabled_cues_get_zero_weight() {
        let (store, enc) = encoder();
        let mut g = Graph::new(&store);
        let v = enc.forward(&mut g, &[1, 2, 3], [true, false, false]).unwrap();
        assert_eq!(g.value(v.weights).data, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn hidden_pooling_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = LangEncoder::new(&mut store, 10, 6, 5, PhrasePooling::Hidden, &mut rng);
        let e = enc.encode_query(&store, &[1, 2]).unwrap();
        assert_eq!(e.q_s.len(), 10);
        assert_eq!(e.h_ends.len(), 20);
    }
}
