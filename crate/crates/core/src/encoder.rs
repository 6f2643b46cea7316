//! Sentence encoding: a bidirectional RNN or a multi-window CNN over the
//! word embeddings, followed by attention pooling into one vector.
//!
//! With hidden states `H` (`d_out × N`), pooling computes
//!
//! ```text
//! A = softmax_rows(U_s · tanh(W_s · H + b_s))     (r × N)
//! S = A · Hᵀ                                      (r × d_out)
//! s = row-major flattening of S                   (r · d_out)
//! ```

use rand_chacha::ChaCha8Rng;

use crate::config::{EncoderConfig, EncoderKind, Pooling};
use crate::error::Result;
use crate::nn::{self, BiRecurrent};
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Var};

#[derive(Clone, Debug)]
pub struct AttentionParams {
    /// `d_a × d_out`
    pub w_s: ParamId,
    /// `d_a`
    pub b_s: ParamId,
    /// `r × d_a`; each row is one context vector.
    pub u_s: ParamId,
}

impl AttentionParams {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        prefix: &str,
        d_out: usize,
        d_a: usize,
        r: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        AttentionParams {
            w_s: store.insert(format!("{prefix}.w_s"), nn::xavier(d_a, d_out, rng)),
            b_s: store.insert(format!("{prefix}.b_s"), nn::zeros(&[d_a])),
            u_s: store.insert(format!("{prefix}.u_s"), nn::xavier(r, d_a, rng)),
        }
    }
}

/// One convolution bank: `d_c` filters spanning `window` tokens.
#[derive(Clone, Debug)]
pub struct ConvFilter {
    pub window: usize,
    /// `d_c × (window · d_w)`
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl ConvFilter {
    /// Tokens of left context under "same" padding.
    pub fn left(&self) -> usize {
        (self.window - 1) / 2
    }
}

#[derive(Clone, Debug)]
pub enum EncoderLayer {
    Rnn(BiRecurrent),
    Cnn(Vec<ConvFilter>),
}

#[derive(Clone, Debug)]
pub struct SentenceEncoder {
    pub config: EncoderConfig,
    pub layer: EncoderLayer,
    pub attention: Option<AttentionParams>,
}

impl SentenceEncoder {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        cfg: &EncoderConfig,
        d_w: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let layer = match cfg.kind {
            EncoderKind::Rnn => {
                EncoderLayer::Rnn(BiRecurrent::init(store, "sent.rnn", cfg.cell, d_w, cfg.d_hs, rng))
            }
            EncoderKind::Cnn => EncoderLayer::Cnn(
                cfg.windows
                    .iter()
                    .map(|&w| ConvFilter {
                        window: w,
                        kernel: store.insert(format!("sent.cnn{w}.k"), nn::xavier(cfg.d_c, w * d_w, rng)),
                        bias: store.insert(format!("sent.cnn{w}.b"), nn::zeros(&[cfg.d_c])),
                    })
                    .collect(),
            ),
        };
        let attention = (cfg.pooling == Pooling::Attention)
            .then(|| AttentionParams::init(store, "sent.attn", cfg.d_out(), cfg.d_a, cfg.r, rng));
        SentenceEncoder {
            config: cfg.clone(),
            layer,
            attention,
        }
    }

    /// Hidden states `H` (`d_out × N`) for embeddings `E` (`d_w × N`).
    pub fn hidden_states<F: Scalar>(&self, g: &mut Graph<'_, F>, e: Var) -> Result<Var> {
        match &self.layer {
            EncoderLayer::Rnn(rnn) => encode_rnn(g, e, rnn),
            EncoderLayer::Cnn(filters) => encode_cnn(g, e, filters),
        }
    }

    pub fn pool<F: Scalar>(&self, g: &mut Graph<'_, F>, h: Var) -> Result<Var> {
        match &self.attention {
            Some(attn) => attention_pool(g, h, attn),
            None => fallback_pool(g, h, self.config.kind),
        }
    }

    pub fn encode<F: Scalar>(&self, g: &mut Graph<'_, F>, e: Var) -> Result<Var> {
        let h = self.hidden_states(g, e)?;
        self.pool(g, h)
    }
}

/// Bidirectional recurrence from zero states; column `t` is
/// `[forward_t ; backward_t]`.
pub fn encode_rnn<F: Scalar>(g: &mut Graph<'_, F>, e: Var, rnn: &BiRecurrent) -> Result<Var> {
    rnn.run(g, e)
}

/// For each window, a "same"-padded convolution with `tanh`; the window
/// outputs are stacked so each column has `|windows| · d_c` features.
pub fn encode_cnn<F: Scalar>(g: &mut Graph<'_, F>, e: Var, filters: &[ConvFilter]) -> Result<Var> {
    let mut banks = Vec::with_capacity(filters.len());
    for f in filters {
        let patches = g.unfold(e, f.window, f.left())?;
        let pre = nn::linear(g, f.kernel, f.bias, patches)?;
        banks.push(g.tanh(pre));
    }
    g.concat(&banks)
}

pub fn attention_weights<F: Scalar>(
    g: &mut Graph<'_, F>,
    h: Var,
    attn: &AttentionParams,
) -> Result<Var> {
    let proj = nn::linear(g, attn.w_s, attn.b_s, h)?;
    let proj = g.tanh(proj);
    let u = g.param(attn.u_s);
    let scores = g.matmul(u, proj)?;
    g.softmax(scores, 1)
}

pub fn attention_pool<F: Scalar>(
    g: &mut Graph<'_, F>,
    h: Var,
    attn: &AttentionParams,
) -> Result<Var> {
    let a = attention_weights(g, h, attn)?;
    let ht = g.transpose(h)?;
    let s = g.matmul(a, ht)?;
    let len = g.value(s).len();
    g.reshape(s, &[len])
}

/// Pooling used when attention is ablated: final forward state with the
/// backward state at the first token for the RNN encoder, position-wise
/// maximum for the CNN encoder.
pub fn fallback_pool<F: Scalar>(g: &mut Graph<'_, F>, h: Var, kind: EncoderKind) -> Result<Var> {
    match kind {
        EncoderKind::Rnn => {
            let shape = g.shape(h).to_vec();
            let (d_out, n) = (shape[0], shape[1]);
            let half = d_out / 2;
            let last = g.column(h, n - 1)?;
            let first = g.column(h, 0)?;
            let fwd = g.slice_rows(last, 0, half)?;
            let bwd = g.slice_rows(first, half, half)?;
            g.concat(&[fwd, bwd])
        }
        EncoderKind::Cnn => g.max_columns(h),
    }
}
