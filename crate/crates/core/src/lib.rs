//! Rhetorical-role labels for every sentence of a scientific abstract, predicted jointly.
//!
//! Each abstract is encoded bottom-up: word embeddings, a per-sentence
//! encoder (bi-RNN or CNN) with attention pooling, an abstract-level
//! bi-LSTM for context, a feed-forward emission head and a linear-chain CRF
//! over the label sequence. Everything runs on a small reverse-mode
//! autodiff engine in [`tensor`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod context;
pub mod crf;
pub mod data;
pub mod embeddings;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{Ablation, Config};
pub use data::{Abstract, Corpus, LabelSet};
pub use error::{Error, Result};
pub use model::Hsln;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/corpus.md")]
    mod corpus {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/encoding.md")]
    mod encoding {}
    #[doc = include_str!("../../../book/src/crf.md")]
    mod crf {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
