//! Collaborative reconstruction: adaptive visual and language
//! reconstruction, direct language reconstruction, attribute classification,
//! and composition of the training objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::nn::{Linear, LstmCell, INIT_BOUND};

/// Logit clamp applied before the attribute sigmoid.
pub const BCE_CLAMP: f64 = 30.0;

/// `Σ_i S_t^i · features_i` for `S_t: 1 × N`, `features: N × D`.
pub fn attentive_pool(g: &mut Graph, scores: Var, features: Var) -> Var {
    g.matmul(scores, features)
}

/// Projections from pooled proposal features into the phrase space.
#[derive(Debug, Clone, Copy)]
pub struct AdaptiveVisual {
    pub projections: [Linear; 3],
}

/// Graph handles of the adaptive visual loss.
#[derive(Debug, Clone, Copy)]
pub struct AdaptiveVisualVars {
    pub per_cue: [Var; 3],
    pub total: Var,
}

impl AdaptiveVisual {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        feature_dims: [usize; 3],
        phrase_dim: usize,
        rng: &mut R,
    ) -> Self {
        let names = ["recon.avis_subject", "recon.avis_location", "recon.avis_context"];
        Self {
            projections: std::array::from_fn(|k| {
                Linear::new(store, names[k], feature_dims[k], phrase_dim, rng)
            }),
        }
    }

    /// `L_x = MSE(FC_x(ṽ_x), q_x)` and `Σ w_x L_x`.
    pub fn loss(&self, g: &mut Graph, pooled: [Var; 3], phrases: [Var; 3], weights: Var) -> AdaptiveVisualVars {
        let per_cue: [Var; 3] = std::array::from_fn(|k| {
            let v = self.projections[k].forward(g, pooled[k]);
            g.mse(v, phrases[k])
        });
        let mut total = None;
        for (k, &l) in per_cue.iter().enumerate() {
            let w = g.slice_cols(weights, k, 1);
            let t = g.scale_by(w, l);
            total = Some(match total {
                None => t,
                Some(acc) => g.add(acc, t),
            });
        }
        AdaptiveVisualVars {
            per_cue,
            total: total.expect("three cues"),
        }
    }
}

/// One-layer LSTM query decoder. The conditioning vector is the input at the
/// first step only; later steps are teacher forced with the target words and
/// an end token is predicted last.
#[derive(Debug, Clone, Copy)]
pub struct QueryDecoder {
    pub embedding: ParamId,
    pub cell: LstmCell,
    pub output: Linear,
    /// Size of the output distribution; the last index is the end token.
    pub out_vocab: usize,
    pub input_dim: usize,
}

impl QueryDecoder {
    /// A decoder over `vocab_size` words plus an end token.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        vocab_size: usize,
        input_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self::with_output_size(store, name, vocab_size, vocab_size + 1, input_dim, hidden, rng)
    }

    pub fn with_output_size<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        vocab_size: usize,
        out_vocab: usize,
        input_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let embedding = store.add(
            format!("{name}.embedding"),
            Tensor::uniform(vocab_size.max(1), input_dim, INIT_BOUND, rng),
        );
        let cell = LstmCell::new(store, &format!("{name}.lstm"), input_dim, hidden, rng);
        let output = Linear::new(store, &format!("{name}.out"), hidden, out_vocab, rng);
        Self {
            embedding,
            cell,
            output,
            out_vocab,
            input_dim,
        }
    }

    pub fn end_token(&self) -> usize {
        self.out_vocab - 1
    }

    /// Summed negative log-likelihood of `tokens` followed by the end token.
    pub fn nll(&self, g: &mut Graph, conditioning: Var, tokens: &[usize]) -> Var {
        let mut targets = tokens.to_vec();
        targets.push(self.end_token());
        self.nll_of_targets(g, conditioning, &targets)
    }

    /// Summed negative log-likelihood of an explicit output sequence. Step 0
    /// consumes the conditioning vector; step `t > 0` consumes the embedding
    /// of `targets[t - 1]`.
    pub fn nll_of_targets(&self, g: &mut Graph, conditioning: Var, targets: &[usize]) -> Var {
        assert!(!targets.is_empty(), "decoder needs at least one target");
        let table = g.param(self.embedding);
        let inputs = g.gather_rows(table, &targets[..targets.len() - 1]);
        let mut state = None;
        let mut hs = Vec::with_capacity(targets.len());
        for t in 0..targets.len() {
            let x = if t == 0 { conditioning } else { g.row(inputs, t - 1) };
            let s = self.cell.step(g, x, state);
            hs.push(s.0);
            state = Some(s);
        }
        let h = g.concat_rows(&hs);
        let logits = self.output.forward(g, h);
        g.softmax_nll(logits, targets)
    }
}

/// Per-attribute weights `1 / frequency`, where frequency is the share of
/// attribute-bearing queries carrying the label. Labels never seen get 1.
pub fn attribute_class_weights(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    counts
        .iter()
        .map(|&c| {
            if c == 0 || total == 0 {
                1.0
            } else {
                total as f64 / c as f64
            }
        })
        .collect()
}

/// Multi-label weighted BCE on the attribute logits (`1 × A`).
pub fn attribute_loss(g: &mut Graph, logits: Var, labels: &[usize], class_weights: &[f64]) -> Var {
    let a = g.shape(logits).1;
    let mut y = vec![0.0; a];
    for &l in labels {
        y[l] = 1.0;
    }
    g.weighted_bce(logits, &y, class_weights, BCE_CLAMP)
}

/// Loss mixing coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Adaptive visual reconstruction.
    pub alpha: f64,
    /// Adaptive language reconstruction.
    pub beta: f64,
    /// Language reconstruction.
    pub gamma: f64,
    /// Attribute classification.
    pub lambda: f64,
}

impl LossWeights {
    pub const COCO: LossWeights = LossWeights {
        alpha: 0.01,
        beta: 1.0,
        gamma: 1.0,
        lambda: 1.0,
    };
    pub const CLEF: LossWeights = LossWeights {
        alpha: 0.001,
        beta: 1.0,
        gamma: 30.0,
        lambda: 1.0,
    };
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::COCO
    }
}

/// The raw loss terms of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub loss_sub: f64,
    pub loss_obj: f64,
    pub l_s: f64,
    pub l_l: f64,
    pub l_c: f64,
    pub loss_avis: f64,
    pub loss_alan: f64,
    pub loss_lan: f64,
    pub loss_att: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub loss_sub: f64,
    pub loss_obj: f64,
    pub l_s: f64,
    pub l_l: f64,
    pub l_c: f64,
    pub loss_avis: f64,
    pub loss_alan: f64,
    pub loss_adp: f64,
    pub loss_lan: f64,
    pub loss_att: f64,
    pub loss_clb: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBundle {
    pub const TERM_NAMES: [&'static str; 12] = [
        "loss_sub", "loss_obj", "L_s", "L_l", "L_c", "loss_avis", "loss_alan", "loss_adp",
        "loss_lan", "loss_att", "loss_clb", "total",
    ];

    pub fn terms(&self) -> [f64; 12] {
        [
            self.loss_sub,
            self.loss_obj,
            self.l_s,
            self.l_l,
            self.l_c,
            self.loss_avis,
            self.loss_alan,
            self.loss_adp,
            self.loss_lan,
            self.loss_att,
            self.loss_clb,
            self.total,
        ]
    }

    /// The first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        Self::TERM_NAMES
            .iter()
            .zip(self.terms())
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| *n)
    }
}

/// Combines the loss terms:
/// `adp = α·avis + β·alan`, `clb = adp + γ·lan + λ·att`,
/// `total = sub + obj + clb`.
pub fn compose_losses(t: &LossTerms, w: LossWeights) -> LossBundle {
    let loss_adp = w.alpha * t.loss_avis + w.beta * t.loss_alan;
    let loss_clb = loss_adp + w.gamma * t.loss_lan + w.lambda * t.loss_att;
    LossBundle {
        loss_sub: t.loss_sub,
        loss_obj: t.loss_obj,
        l_s: t.l_s,
        l_l: t.l_l,
        l_c: t.l_c,
        loss_avis: t.loss_avis,
        loss_alan: t.loss_alan,
        loss_adp,
        loss_lan: t.loss_lan,
        loss_att: t.loss_att,
        loss_clb,
        total: t.loss_sub + t.loss_obj + loss_clb,
        weights: w,
    }
}

/// Graph-side composition matching [`compose_losses`]. Terms with a zero
/// coefficient are left out of the graph entirely.
pub fn compose_loss_vars(
    g: &mut Graph,
    sub: Option<Var>,
    obj: Option<Var>,
    avis: Option<Var>,
    alan: Option<Var>,
    lan: Option<Var>,
    att: Option<Var>,
    w: LossWeights,
) -> Var {
    let mut parts: Vec<Var> = Vec::new();
    parts.extend(sub);
    parts.extend(obj);
    for (v, k) in [(avis, w.alpha), (alan, w.beta), (lan, w.gamma), (att, w.lambda)] {
        if let Some(v) = v {
            if k != 0.0 {
                parts.push(g.scale(v, k));
            }
        }
    }
    let mut total = g.constant(Tensor::scalar(0.0));
    for p in parts {
        total = g.add(total, p);
    }
    total
}
