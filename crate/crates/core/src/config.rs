//! Model and training configuration, named presets, and the flat
//! `key = value` text form used by config files and checkpoints.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Rnn,
    Cnn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    Lstm,
    Gru,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    Attention,
    /// Final states for the RNN encoder, max over positions for the CNN one.
    LastStateOrMaxPool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub cell: CellKind,
    /// Hidden size per direction of the sentence-level RNN.
    pub d_hs: usize,
    pub windows: Vec<usize>,
    /// Filters per window of the CNN encoder.
    pub d_c: usize,
    /// Attention projection size.
    pub d_a: usize,
    /// Number of attention context vectors.
    pub r: usize,
    pub pooling: Pooling,
}

impl EncoderConfig {
    /// Width of one column of the encoder output `H`.
    pub fn d_out(&self) -> usize {
        match self.kind {
            EncoderKind::Rnn => 2 * self.d_hs,
            EncoderKind::Cnn => self.windows.len() * self.d_c,
        }
    }

    /// Length of the pooled sentence vector.
    pub fn sentence_dim(&self) -> usize {
        match self.pooling {
            Pooling::Attention => self.r * self.d_out(),
            Pooling::LastStateOrMaxPool => self.d_out(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextConfig {
    /// Hidden size per direction of the abstract-level bi-LSTM.
    pub d_hd: usize,
    pub ffn_hidden: usize,
    pub use_context: bool,
    /// Normalize emissions with a per-sentence softmax before the CRF.
    pub emission_softmax: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_w: usize,
    pub encoder: EncoderConfig,
    pub context: ContextConfig,
    pub use_crf: bool,
    /// Learn start/end transition scores in addition to `T`.
    pub crf_boundary: bool,
    pub dropout: f64,
}

impl ModelConfig {
    /// Input width of the emission head.
    pub fn head_input_dim(&self) -> usize {
        if self.context.use_context {
            2 * self.context.d_hd
        } else {
            self.encoder.sentence_dim()
        }
    }

    /// Number of trainable scalars for `labels` labels, excluding embeddings.
    pub fn param_count(&self, labels: usize) -> usize {
        let lstm = |input: usize, hidden: usize| 4 * hidden * (input + hidden) + 4 * hidden;
        let gru = |input: usize, hidden: usize| 3 * hidden * (input + hidden) + 4 * hidden;
        let e = &self.encoder;
        let encoder = match e.kind {
            EncoderKind::Rnn => {
                2 * match e.cell {
                    CellKind::Lstm => lstm(self.d_w, e.d_hs),
                    CellKind::Gru => gru(self.d_w, e.d_hs),
                }
            }
            EncoderKind::Cnn => e.windows.iter().map(|w| e.d_c * w * self.d_w + e.d_c).sum(),
        };
        let attention = match e.pooling {
            Pooling::Attention => e.d_a * e.d_out() + e.d_a + e.r * e.d_a,
            Pooling::LastStateOrMaxPool => 0,
        };
        let c = &self.context;
        let context = if c.use_context {
            2 * lstm(e.sentence_dim(), c.d_hd)
        } else {
            0
        };
        let head = c.ffn_hidden * self.head_input_dim() + c.ffn_hidden + labels * c.ffn_hidden + labels;
        let crf = if self.use_crf {
            labels * labels + if self.crf_boundary { 2 * labels } else { 0 }
        } else {
            0
        };
        encoder + attention + context + head + crf
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_w == 0 {
            return fail("d_w must be at least 1");
        }
        match e.kind {
            EncoderKind::Rnn if e.d_hs == 0 => return fail("encoder.d_hs must be at least 1"),
            EncoderKind::Cnn if e.windows.is_empty() || e.windows.contains(&0) => {
                return fail("encoder.windows must be non-empty positive sizes")
            }
            EncoderKind::Cnn if e.d_c == 0 => return fail("encoder.d_c must be at least 1"),
            _ => {}
        }
        if e.r == 0 || e.d_a == 0 {
            return fail("encoder.r and encoder.d_a must be at least 1");
        }
        if self.context.d_hd == 0 || self.context.ffn_hidden == 0 {
            return fail("context.d_hd and context.ffn_hidden must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_decay: f64,
    pub epochs: usize,
    /// Stop after this many epochs without validation improvement.
    pub patience: usize,
    pub batch_size: usize,
    /// Weight of the expectation-linearization penalty.
    pub beta: f64,
    pub el_reg: bool,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub min_count: usize,
    pub trainable_embeddings: bool,
    pub lowercase: bool,
    pub normalize_digits: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr0 > 0.0) {
            return fail("train.lr0 must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail("train.lr_decay must lie in (0, 1]");
        }
        if !(self.beta >= 0.0) {
            return fail("train.beta must be non-negative");
        }
        if self.batch_size == 0 || self.min_count == 0 {
            return fail("train.batch_size and train.min_count must be at least 1");
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return fail("train.clip_norm must be positive");
            }
        }
        Ok(())
    }

    /// Effective penalty weight after the `dropout-reg` ablation.
    pub fn effective_beta(&self) -> f64 {
        if self.el_reg {
            self.beta
        } else {
            0.0
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.003,
            lr_decay: 0.9,
            epochs: 30,
            patience: 5,
            batch_size: 16,
            beta: 0.01,
            el_reg: true,
            clip_norm: None,
            seed: 1,
            min_count: 1,
            trainable_embeddings: false,
            lowercase: true,
            normalize_digits: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Whether the preset expects pretrained vectors.
    pub pretrained: bool,
}

/// Components that can be removed for ablation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Context,
    SeqOpt,
    DropoutReg,
    Attention,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::Context => "context",
            Ablation::SeqOpt => "seq-opt",
            Ablation::DropoutReg => "dropout-reg",
            Ablation::Attention => "attention",
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "context" => Ok(Ablation::Context),
            "seq-opt" | "seq_opt" | "crf" => Ok(Ablation::SeqOpt),
            "dropout-reg" | "dropout_reg" | "el-reg" => Ok(Ablation::DropoutReg),
            "attention" => Ok(Ablation::Attention),
            _ => Err(Error::Config(format!("unknown ablation `{s}`"))),
        }
    }
}

pub const PRESETS: [&str; 5] = ["tiny", "pubmed-rnn", "pubmed-cnn", "nicta-rnn", "nicta-cnn"];

impl Config {
    pub fn preset(name: &str) -> Result<Self> {
        // (kind, cell, d_hs, d_hd, d_a, d_c, r, beta, dr)
        let (kind, cell, d_hs, d_hd, d_a, d_c, r, beta, dr) = match name {
            "pubmed-rnn" => (EncoderKind::Rnn, CellKind::Lstm, 200, 200, 200, 0, 15, 0.01, 0.5),
            "pubmed-cnn" => (EncoderKind::Cnn, CellKind::Lstm, 0, 200, 100, 200, 1, 0.001, 0.5),
            "nicta-rnn" => (EncoderKind::Rnn, CellKind::Gru, 200, 200, 250, 0, 5, 0.01, 0.6),
            "nicta-cnn" => (EncoderKind::Cnn, CellKind::Gru, 0, 300, 75, 150, 4, 0.01, 0.6),
            "tiny" => return Ok(Config::tiny()),
            _ => {
                return Err(Error::Config(format!(
                    "unknown preset `{name}` (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(Config {
            model: ModelConfig {
                d_w: 200,
                encoder: EncoderConfig {
                    kind,
                    cell,
                    d_hs,
                    windows: vec![2, 3, 4, 5],
                    d_c,
                    d_a,
                    r,
                    pooling: Pooling::Attention,
                },
                context: ContextConfig {
                    d_hd,
                    ffn_hidden: d_hd,
                    use_context: true,
                    emission_softmax: false,
                },
                use_crf: true,
                crf_boundary: false,
                dropout: dr,
            },
            train: TrainConfig {
                beta,
                ..TrainConfig::default()
            },
            pretrained: true,
        })
    }

    /// Small LSTM configuration for synthetic corpora and quick experiments.
    pub fn tiny() -> Self {
        Config {
            model: ModelConfig {
                d_w: 24,
                encoder: EncoderConfig {
                    kind: EncoderKind::Rnn,
                    cell: CellKind::Lstm,
                    d_hs: 16,
                    windows: vec![2, 3, 4, 5],
                    d_c: 8,
                    d_a: 16,
                    r: 2,
                    pooling: Pooling::Attention,
                },
                context: ContextConfig {
                    d_hd: 16,
                    ffn_hidden: 16,
                    use_context: true,
                    emission_softmax: false,
                },
                use_crf: true,
                crf_boundary: false,
                dropout: 0.2,
            },
            train: TrainConfig {
                beta: 0.01,
                ..TrainConfig::default()
            },
            pretrained: false,
        }
    }

    pub fn apply(&mut self, ablation: Ablation) {
        match ablation {
            Ablation::Context => self.model.context.use_context = false,
            Ablation::SeqOpt => self.model.use_crf = false,
            Ablation::DropoutReg => self.train.el_reg = false,
            Ablation::Attention => self.model.encoder.pooling = Pooling::LastStateOrMaxPool,
        }
    }

    pub fn ablations(&self) -> Vec<Ablation> {
        let mut out = Vec::new();
        if !self.model.context.use_context {
            out.push(Ablation::Context);
        }
        if !self.model.use_crf {
            out.push(Ablation::SeqOpt);
        }
        if !self.train.el_reg {
            out.push(Ablation::DropoutReg);
        }
        if self.model.encoder.pooling == Pooling::LastStateOrMaxPool {
            out.push(Ablation::Attention);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Flat `key = value` lines in a fixed key order.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let e = &m.encoder;
        let c = &m.context;
        let t = &self.train;
        let windows: Vec<String> = e.windows.iter().map(ToString::to_string).collect();
        vec![
            ("d_w", m.d_w.to_string()),
            ("encoder.kind", match e.kind {
                EncoderKind::Rnn => "rnn",
                EncoderKind::Cnn => "cnn",
            }
            .into()),
            ("encoder.cell", match e.cell {
                CellKind::Lstm => "lstm",
                CellKind::Gru => "gru",
            }
            .into()),
            ("encoder.d_hs", e.d_hs.to_string()),
            ("encoder.windows", windows.join(",")),
            ("encoder.d_c", e.d_c.to_string()),
            ("encoder.d_a", e.d_a.to_string()),
            ("encoder.r", e.r.to_string()),
            ("encoder.pooling", match e.pooling {
                Pooling::Attention => "attention",
                Pooling::LastStateOrMaxPool => "last-or-max",
            }
            .into()),
            ("context.d_hd", c.d_hd.to_string()),
            ("context.ffn_hidden", c.ffn_hidden.to_string()),
            ("context.use_context", c.use_context.to_string()),
            ("context.emission_softmax", c.emission_softmax.to_string()),
            ("crf.enabled", m.use_crf.to_string()),
            ("crf.boundary", m.crf_boundary.to_string()),
            ("dropout", m.dropout.to_string()),
            ("train.lr0", t.lr0.to_string()),
            ("train.lr_decay", t.lr_decay.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.patience", t.patience.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.beta", t.beta.to_string()),
            ("train.el_reg", t.el_reg.to_string()),
            ("train.clip_norm", t.clip_norm.map_or("none".into(), |c| c.to_string())),
            ("train.seed", t.seed.to_string()),
            ("train.min_count", t.min_count.to_string()),
            ("train.trainable_embeddings", t.trainable_embeddings.to_string()),
            ("train.lowercase", t.lowercase.to_string()),
            ("train.normalize_digits", t.normalize_digits.to_string()),
            ("pretrained", self.pretrained.to_string()),
        ]
    }

    /// Sets one key. Unknown keys and unparsable values are config errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
        }
        let v = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        match key.trim() {
            "d_w" => m.d_w = p(key, v)?,
            "encoder.kind" => {
                m.encoder.kind = match v {
                    "rnn" => EncoderKind::Rnn,
                    "cnn" => EncoderKind::Cnn,
                    _ => return Err(Error::Config(format!("bad encoder.kind `{v}`"))),
                }
            }
            "encoder.cell" => {
                m.encoder.cell = match v {
                    "lstm" => CellKind::Lstm,
                    "gru" => CellKind::Gru,
                    _ => return Err(Error::Config(format!("bad encoder.cell `{v}`"))),
                }
            }
            "encoder.d_hs" => m.encoder.d_hs = p(key, v)?,
            "encoder.windows" => {
                m.encoder.windows = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| p(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "encoder.d_c" => m.encoder.d_c = p(key, v)?,
            "encoder.d_a" => m.encoder.d_a = p(key, v)?,
            "encoder.r" => m.encoder.r = p(key, v)?,
            "encoder.pooling" => {
                m.encoder.pooling = match v {
                    "attention" => Pooling::Attention,
                    "last-or-max" => Pooling::LastStateOrMaxPool,
                    _ => return Err(Error::Config(format!("bad encoder.pooling `{v}`"))),
                }
            }
            "context.d_hd" => m.context.d_hd = p(key, v)?,
            "context.ffn_hidden" => m.context.ffn_hidden = p(key, v)?,
            "context.use_context" => m.context.use_context = p(key, v)?,
            "context.emission_softmax" => m.context.emission_softmax = p(key, v)?,
            "crf.enabled" => m.use_crf = p(key, v)?,
            "crf.boundary" => m.crf_boundary = p(key, v)?,
            "dropout" => m.dropout = p(key, v)?,
            "train.lr0" => t.lr0 = p(key, v)?,
            "train.lr_decay" => t.lr_decay = p(key, v)?,
            "train.epochs" => t.epochs = p(key, v)?,
            "train.patience" => t.patience = p(key, v)?,
            "train.batch_size" => t.batch_size = p(key, v)?,
            "train.beta" => t.beta = p(key, v)?,
            "train.el_reg" => t.el_reg = p(key, v)?,
            "train.clip_norm" => {
                t.clip_norm = if v == "none" { None } else { Some(p(key, v)?) }
            }
            "train.seed" => t.seed = p(key, v)?,
            "train.min_count" => t.min_count = p(key, v)?,
            "train.trainable_embeddings" => t.trainable_embeddings = p(key, v)?,
            "train.lowercase" => t.lowercase = p(key, v)?,
            "train.normalize_digits" => t.normalize_digits = p(key, v)?,
            "pretrained" => self.pretrained = p(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn merge_kv(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Parses a complete configuration: every key must be present.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Config::tiny();
        cfg.merge_kv(text)?;
        let mut seen: Vec<&str> = text
            .lines()
            .filter_map(|l| l.split_once('=').map(|(k, _)| k.trim()))
            .collect();
        seen.sort_unstable();
        for (k, _) in cfg.entries() {
            if seen.binary_search(&k).is_err() {
                return Err(Error::Config(format!("missing key `{k}`")));
            }
        }
        Ok(cfg)
    }
}
