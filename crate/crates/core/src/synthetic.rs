//! Grammar-generated corpora with a known label structure.
//!
//! Every abstract walks the labels in order, emitting a segment of
//! sentences per label. A sentence mixes tokens from its label's private
//! vocabulary with shared filler tokens. Optionally, sentences of two chosen
//! labels are made indistinguishable by content: with some probability
//! their tokens come from a pool shared by both labels, so only their
//! position in the abstract tells them apart.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{serialize_corpus, Abstract, LabelSet};
use crate::error::{Error, Result};

pub const CANONICAL_LABELS: [&str; 5] = ["BACKGROUND", "OBJECTIVE", "METHODS", "RESULTS", "CONCLUSIONS"];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub abstracts: usize,
    pub seed: u64,
    pub labels: Vec<String>,
    /// Inclusive `(min, max)` segment length per label.
    pub segment: Vec<(usize, usize)>,
    /// Inclusive token count range per sentence.
    pub tokens: (usize, usize),
    /// Private vocabulary size per label.
    pub label_vocab: usize,
    pub filler_vocab: usize,
    /// Probability that a token is filler rather than label-specific.
    pub filler_rate: f64,
    /// Labels whose content is confusable, with the confusion probability.
    pub ambiguous: Option<(usize, usize, f64)>,
    pub id_prefix: String,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            abstracts: 500,
            seed: 1,
            labels: CANONICAL_LABELS.map(String::from).to_vec(),
            segment: vec![(1, 1); 5],
            tokens: (4, 10),
            label_vocab: 20,
            filler_vocab: 30,
            filler_rate: 0.5,
            ambiguous: None,
            id_prefix: "syn".into(),
        }
    }
}

impl SyntheticConfig {
    /// The position-dependent variant: BACKGROUND and OBJECTIVE each span
    /// exactly two sentences and share content with probability `p`.
    pub fn positional(abstracts: usize, seed: u64, p: f64) -> Self {
        SyntheticConfig {
            abstracts,
            seed,
            segment: vec![(2, 2), (2, 2), (1, 1), (1, 1), (1, 1)],
            ambiguous: Some((0, 1, p)),
            ..SyntheticConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.labels.len() != self.segment.len() {
            return fail("one segment range per label is required");
        }
        if self.segment.iter().any(|&(lo, hi)| lo > hi) || self.segment.iter().all(|&(_, hi)| hi == 0) {
            return fail("segment ranges must be ordered and allow at least one sentence");
        }
        if self.tokens.0 == 0 || self.tokens.0 > self.tokens.1 {
            return fail("token range must be ordered and positive");
        }
        if self.label_vocab == 0 || self.filler_vocab == 0 {
            return fail("vocabulary sizes must be positive");
        }
        if !(0.0..=1.0).contains(&self.filler_rate) {
            return fail("filler_rate must lie in [0, 1]");
        }
        if let Some((a, b, p)) = self.ambiguous {
            if a == b || a >= self.labels.len() || b >= self.labels.len() || !(0.0..=1.0).contains(&p) {
                return fail("ambiguous labels must be two distinct indices with p in [0, 1]");
            }
        }
        Ok(())
    }
}

/// Generates labeled abstracts and their label set.
pub fn generate(cfg: &SyntheticConfig) -> Result<(Vec<Abstract>, LabelSet)> {
    cfg.validate()?;
    let labels = LabelSet::new(cfg.labels.iter().cloned())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.abstracts);
    for k in 0..cfg.abstracts {
        let mut text = Vec::new();
        let mut gold = Vec::new();
        loop {
            for (y, &(lo, hi)) in cfg.segment.iter().enumerate() {
                for _ in 0..rng.random_range(lo..=hi) {
                    text.push(sentence(cfg, y, &mut rng));
                    gold.push(Some(y));
                }
            }
            if !text.is_empty() {
                break;
            }
        }
        let sentences = text
            .iter()
            .map(|s| s.split(' ').map(String::from).collect())
            .collect();
        out.push(Abstract {
            id: format!("{}{k}", cfg.id_prefix),
            text,
            sentences,
            labels: gold,
        });
    }
    Ok((out, labels))
}

fn sentence(cfg: &SyntheticConfig, label: usize, rng: &mut ChaCha8Rng) -> String {
    let pool = match cfg.ambiguous {
        Some((a, b, p)) if (label == a || label == b) && rng.random_bool(p) => "amb".to_string(),
        _ => format!("l{label}w"),
    };
    let n = rng.random_range(cfg.tokens.0..=cfg.tokens.1);
    let words: Vec<String> = (0..n)
        .map(|_| {
            if rng.random_bool(cfg.filler_rate) {
                format!("f{}", rng.random_range(0..cfg.filler_vocab))
            } else {
                format!("{pool}{}", rng.random_range(0..cfg.label_vocab))
            }
        })
        .collect();
    words.join(" ")
}

/// Generated corpus in file format.
pub fn generate_text(cfg: &SyntheticConfig) -> Result<String> {
    let (abstracts, labels) = generate(cfg)?;
    Ok(serialize_corpus(&abstracts, &labels))
}
