//! Abstract-level context enrichment and the per-sentence emission head.

use rand_chacha::ChaCha8Rng;

use crate::config::{CellKind, ContextConfig};
use crate::error::Result;
use crate::nn::{self, BiRecurrent};
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Var};

/// Bi-LSTM over the sentence vectors of one abstract. `None` disables the
/// layer and passes sentence vectors through unchanged.
#[derive(Clone, Debug)]
pub struct ContextLayer {
    pub rnn: Option<BiRecurrent>,
}

impl ContextLayer {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        cfg: &ContextConfig,
        input: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let rnn = cfg
            .use_context
            .then(|| BiRecurrent::init(store, "ctx.rnn", CellKind::Lstm, input, cfg.d_hd, rng));
        ContextLayer { rnn }
    }

    /// One output per sentence: `[forward_t ; backward_t]` of width `2·d_hd`,
    /// or the input itself when the layer is disabled.
    pub fn contextualize<F: Scalar>(&self, g: &mut Graph<'_, F>, sentences: &[Var]) -> Result<Vec<Var>> {
        let Some(rnn) = &self.rnn else {
            return Ok(sentences.to_vec());
        };
        let x = g.stack_columns(sentences)?;
        let h = rnn.run(g, x)?;
        (0..sentences.len()).map(|t| g.column(h, t)).collect()
    }
}

/// One-hidden-layer feed-forward network producing `l` emission scores.
#[derive(Clone, Debug)]
pub struct EmissionHead {
    pub w_hidden: ParamId,
    pub b_hidden: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
    pub softmax: bool,
}

impl EmissionHead {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        cfg: &ContextConfig,
        input: usize,
        labels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        EmissionHead {
            w_hidden: store.insert("head.w1", nn::xavier(cfg.ffn_hidden, input, rng)),
            b_hidden: store.insert("head.b1", nn::zeros(&[cfg.ffn_hidden])),
            w_out: store.insert("head.w2", nn::xavier(labels, cfg.ffn_hidden, rng)),
            b_out: store.insert("head.b2", nn::zeros(&[labels])),
            softmax: cfg.emission_softmax,
        }
    }

    /// `W₂ tanh(W₁ h + b₁) + b₂`, optionally softmax-normalized.
    pub fn emit<F: Scalar>(&self, g: &mut Graph<'_, F>, h: Var) -> Result<Var> {
        let hidden = nn::linear(g, self.w_hidden, self.b_hidden, h)?;
        let hidden = g.tanh(hidden);
        let out = nn::linear(g, self.w_out, self.b_out, hidden)?;
        if self.softmax {
            g.softmax(out, 0)
        } else {
            Ok(out)
        }
    }
}
