//! Vocabulary construction and the word embedding matrix.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::data::{token_counts, Corpus};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const PAD_INDEX: usize = 0;
pub const UNK_INDEX: usize = 1;

/// Range of the uniform distribution used for vectors not found in a
/// pretrained file.
pub const OOV_RANGE: f32 = 0.25;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from an explicit token list. The list must start
    /// with the reserved PAD and UNK entries.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD_INDEX] != PAD || tokens[UNK_INDEX] != UNK {
            return Err(Error::Contract(
                "vocabulary must begin with <pad> and <unk>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Contract(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Index of `token`, falling back to UNK.
    pub fn lookup(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK_INDEX)
    }

    pub fn token(&self, index: usize) -> &str {
        &self.tokens[index]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn indices<S: AsRef<str>>(&self, sentence: &[S]) -> Vec<usize> {
        sentence.iter().map(|t| self.lookup(t.as_ref())).collect()
    }

    /// Hex SHA-256 over the newline-joined token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// All tokens seen at least `min_count` times, ordered by descending
/// frequency and then lexicographically, after PAD and UNK.
pub fn build_vocab(corpus: &Corpus, min_count: usize) -> Result<Vocabulary> {
    if min_count == 0 {
        return Err(Error::Contract("min_count must be at least 1".into()));
    }
    if corpus.abstracts.is_empty() {
        return Err(Error::EmptyCorpus("cannot build a vocabulary".into()));
    }
    let mut entries: Vec<(&str, usize)> = token_counts(corpus)
        .into_iter()
        .filter(|&(t, c)| c >= min_count && t != PAD && t != UNK)
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let tokens = [PAD.to_string(), UNK.to_string()]
        .into_iter()
        .chain(entries.into_iter().map(|(t, _)| t.to_string()))
        .collect();
    Vocabulary::from_tokens(tokens)
}

/// `d^w × |V|` embedding matrix; column `i` embeds vocabulary entry `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub matrix: Tensor<f32>,
    pub trainable: bool,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn vocab_size(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn column(&self, index: usize) -> Vec<f32> {
        (0..self.dim()).map(|r| self.matrix.at(r, index)).collect()
    }

    /// Seeded uniform initialization with a zero PAD column.
    pub fn random(vocab: &Vocabulary, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let columns: Vec<Vec<f32>> = (0..vocab.len())
            .map(|i| oov_column(&mut rng, dim, i == PAD_INDEX))
            .collect();
        EmbeddingTable::from_columns(&columns, dim)
    }

    fn from_columns(columns: &[Vec<f32>], dim: usize) -> Self {
        let v = columns.len();
        let matrix = Tensor::from_fn(&[dim, v], |k| columns[k % v][k / v]);
        EmbeddingTable {
            matrix,
            trainable: false,
        }
    }

    /// Hex SHA-256 of the matrix bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for x in self.matrix.data() {
            h.update(x.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn oov_column(rng: &mut ChaCha8Rng, dim: usize, zero: bool) -> Vec<f32> {
    // Draw even for PAD so the stream position depends only on the index.
    let col: Vec<f32> = (0..dim)
        .map(|_| rng.random_range(-OOV_RANGE..OOV_RANGE))
        .collect();
    if zero {
        vec![0.0; dim]
    } else {
        col
    }
}

/// How many non-reserved vocabulary entries were found in a pretrained file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Coverage {
    pub covered: usize,
    pub total: usize,
}

impl Coverage {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.covered as f64 / self.total as f64
        }
    }
}

impl fmt::Display for Coverage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{} ({:.1}%)",
            self.covered,
            self.total,
            100.0 * self.fraction()
        )
    }
}

/// Loads vectors in word2vec text format (`<count> <dim>` header, then one
/// `<word> <v1> .. <vdim>` line per word). Vocabulary entries missing from the
/// file get seeded uniform vectors; PAD is zero.
pub fn load_pretrained(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
) -> Result<(EmbeddingTable, Coverage)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_word2vec(&text, &path.display().to_string(), vocab, dim, seed)
}

pub fn parse_word2vec(
    text: &str,
    origin: &str,
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
) -> Result<(EmbeddingTable, Coverage)> {
    let format_err = |msg: String| Error::Format {
        path: origin.to_string(),
        msg,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| format_err("missing header".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let (count, file_dim) = match fields.as_slice() {
        [c, d] => (
            c.parse::<usize>()
                .map_err(|_| format_err(format!("bad word count `{c}`")))?,
            d.parse::<usize>()
                .map_err(|_| format_err(format!("bad dimension `{d}`")))?,
        ),
        _ => return Err(format_err("header must be `<count> <dim>`".into())),
    };
    if file_dim != dim {
        return Err(format_err(format!(
            "file dimension {file_dim} does not match configured dimension {dim}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut columns: Vec<Vec<f32>> = (0..vocab.len())
        .map(|i| oov_column(&mut rng, dim, i == PAD_INDEX))
        .collect();
    let mut found = vec![false; vocab.len()];
    let mut rows = 0;
    for (i, line) in lines {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        rows += 1;
        let mut parts = line.split_whitespace();
        let word = parts.next().unwrap_or_default();
        let values: Vec<f32> = parts
            .map(str::parse::<f32>)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg: format!("bad value: {e}"),
            })?;
        if values.len() != dim {
            return Err(Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg: format!("expected {dim} values, found {}", values.len()),
            });
        }
        if let Some(idx) = vocab.get(word) {
            if idx > UNK_INDEX && !found[idx] {
                columns[idx] = values;
                found[idx] = true;
            }
        }
    }
    if rows != count {
        return Err(format_err(format!(
            "header announces {count} vectors, file has {rows}"
        )));
    }
    let coverage = Coverage {
        covered: found.iter().filter(|&&f| f).count(),
        total: vocab.len().saturating_sub(2),
    };
    Ok((EmbeddingTable::from_columns(&columns, dim), coverage))
}

/// Embeds a tokenized sentence as a `d^w × N` tensor.
pub fn embed<S: AsRef<str>>(
    sentence: &[S],
    table: &EmbeddingTable,
    vocab: &Vocabulary,
) -> Result<Tensor<f32>> {
    if sentence.is_empty() {
        return Err(Error::EmptySentence);
    }
    let idx = vocab.indices(sentence);
    let (d, v, n) = (table.dim(), table.vocab_size(), idx.len());
    let data = table.matrix.data();
    Tensor::new(&[d, n], (0..d * n).map(|k| data[(k / n) * v + idx[k % n]]).collect())
}
