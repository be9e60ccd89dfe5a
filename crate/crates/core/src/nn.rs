//! Layers shared by the encoders, attention heads and decoders.

use rand::Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Tensor, Var};

/// Uniform initialization bound for every parameter.
pub const INIT_BOUND: f64 = 0.08;

/// `y = x W + b` with `W: in × out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), Tensor::uniform(input, output, INIT_BOUND, rng));
        let b = store.add(format!("{name}.bias"), Tensor::uniform(1, output, INIT_BOUND, rng));
        Self {
            w,
            b,
            input,
            output,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// Two-layer perceptron scoring `[query, row_i]` for every row of a feature
/// matrix: `W₂ · ReLU(W₁ [query, row_i] + b₁) + b₂`.
///
/// `W₁` is stored as two blocks so the query half is computed once and
/// broadcast over rows, which equals the concatenated form exactly.
#[derive(Debug, Clone, Copy)]
pub struct PairScorer {
    pub w_query: ParamId,
    pub w_row: ParamId,
    pub b1: ParamId,
    pub out: Linear,
    pub query_dim: usize,
    pub row_dim: usize,
}

impl PairScorer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        query_dim: usize,
        row_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let w_query = store.add(
            format!("{name}.fc1.weight_query"),
            Tensor::uniform(query_dim, hidden, INIT_BOUND, rng),
        );
        let w_row = store.add(
            format!("{name}.fc1.weight_row"),
            Tensor::uniform(row_dim, hidden, INIT_BOUND, rng),
        );
        let b1 = store.add(format!("{name}.fc1.bias"), Tensor::uniform(1, hidden, INIT_BOUND, rng));
        let out = Linear::new(store, &format!("{name}.fc2"), hidden, 1, rng);
        Self {
            w_query,
            w_row,
            b1,
            out,
            query_dim,
            row_dim,
        }
    }

    /// Logits as a `1 × N` row, one per row of `rows` (`N × row_dim`).
    pub fn forward(&self, g: &mut Graph, query: Var, rows: Var) -> Var {
        let n = g.shape(rows).0;
        let wq = g.param(self.w_query);
        let wr = g.param(self.w_row);
        let b1 = g.param(self.b1);
        let qh = g.matmul(query, wq);
        let qh = g.add_row(qh, b1);
        let rh = g.matmul(rows, wr);
        let h = g.add_row(rh, qh);
        let h = g.relu(h);
        let logits = self.out.forward(g, h);
        g.reshape(logits, 1, n)
    }
}

/// LSTM cell with gates ordered input, forget, cell, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let w_input = store.add(
            format!("{name}.weight_ih"),
            Tensor::uniform(input, 4 * hidden, INIT_BOUND, rng),
        );
        let w_hidden = store.add(
            format!("{name}.weight_hh"),
            Tensor::uniform(hidden, 4 * hidden, INIT_BOUND, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::uniform(1, 4 * hidden, INIT_BOUND, rng));
        Self {
            w_input,
            w_hidden,
            bias,
            input,
            hidden,
        }
    }

    /// One step from `(h, c)`; `None` means the zero initial state.
    pub fn step(&self, g: &mut Graph, x: Var, state: Option<(Var, Var)>) -> (Var, Var) {
        let hd = self.hidden;
        let wi = g.param(self.w_input);
        let b = g.param(self.bias);
        let mut z = g.matmul(x, wi);
        if let Some((h, _)) = state {
            let wh = g.param(self.w_hidden);
            let hz = g.matmul(h, wh);
            z = g.add(z, hz);
        }
        let z = g.add_row(z, b);
        let i = g.slice_cols(z, 0, hd);
        let i = g.sigmoid(i);
        let f = g.slice_cols(z, hd, hd);
        let f = g.sigmoid(f);
        let cc = g.slice_cols(z, 2 * hd, hd);
        let cc = g.tanh(cc);
        let o = g.slice_cols(z, 3 * hd, hd);
        let o = g.sigmoid(o);
        let ic = g.mul(i, cc);
        let c = match state {
            Some((_, c_prev)) => {
                let fc = g.mul(f, c_prev);
                g.add(fc, ic)
            }
            None => ic,
        };
        let tc = g.tanh(c);
        let h = g.mul(o, tc);
        (h, c)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
