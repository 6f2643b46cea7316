//! Corpus reading and writing in the PubMed-RCT layout.
//!
//! ```text
//! ###24854809
//! BACKGROUND<TAB>Emotional eating is associated with overeating .
//! OBJECTIVE<TAB>The aim of this study was ...
//!
//! ###24293578
//! ...
//! ```
//!
//! An abstract starts at a `###<id>` line and ends at a blank line (or at the
//! next header / end of file). `\r` before `\n` is stripped.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Ordered, duplicate-free label names.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSet {
    names: Vec<String>,
}

impl LabelSet {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.len() < 2 {
            return Err(Error::Contract(format!(
                "a label set needs at least two labels, got {}",
                names.len()
            )));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.contains(char::is_whitespace) || n.contains(',') {
                return Err(Error::Contract(format!("invalid label name `{n}`")));
            }
            if names[..i].contains(n) {
                return Err(Error::Contract(format!("duplicate label `{n}`")));
            }
        }
        Ok(LabelSet { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// One document: sentences in order, each with a gold label index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Abstract {
    pub id: String,
    /// Original sentence text, as read.
    pub text: Vec<String>,
    pub sentences: Vec<Vec<String>>,
    /// Gold label per sentence; `None` only for unlabeled prediction input.
    pub labels: Vec<Option<usize>>,
}

impl Abstract {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Gold path, if every sentence is labeled.
    pub fn gold(&self) -> Option<Vec<usize>> {
        self.labels.iter().copied().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn is_train(self) -> bool {
        self == Split::Train
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub abstracts: Vec<Abstract>,
    pub label_set: LabelSet,
    pub split: Split,
    /// Sentences whose label field listed several labels; the first was kept.
    pub multi_label_reduced: usize,
}

impl Corpus {
    pub fn sentence_count(&self) -> usize {
        self.abstracts.iter().map(Abstract::len).sum()
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenizerOptions {
    pub lowercase: bool,
    pub normalize_digits: bool,
}

impl Default for TokenizerOptions {
    fn default() -> Self {
        TokenizerOptions {
            lowercase: true,
            normalize_digits: false,
        }
    }
}

/// Whitespace tokenization with optional lowercasing and digit folding
/// (every digit becomes `0`).
pub fn tokenize(sentence: &str, opts: TokenizerOptions) -> Result<Vec<String>> {
    let tokens: Vec<String> = sentence
        .split_whitespace()
        .map(|t| {
            let t = if opts.lowercase {
                t.to_lowercase()
            } else {
                t.to_string()
            };
            if opts.normalize_digits {
                t.chars()
                    .map(|c| if c.is_ascii_digit() { '0' } else { c })
                    .collect()
            } else {
                t
            }
        })
        .collect();
    if tokens.is_empty() {
        return Err(Error::EmptySentence);
    }
    Ok(tokens)
}

#[derive(Clone, Debug)]
pub struct ReadOptions<'a> {
    pub known_labels: Option<&'a LabelSet>,
    pub tokenizer: TokenizerOptions,
    pub split: Split,
    /// Accept sentence lines without a `LABEL<TAB>` prefix.
    pub allow_unlabeled: bool,
}

impl Default for ReadOptions<'_> {
    fn default() -> Self {
        ReadOptions {
            known_labels: None,
            tokenizer: TokenizerOptions::default(),
            split: Split::Train,
            allow_unlabeled: false,
        }
    }
}

/// Reads a labeled corpus file. Labels are collected in order of first
/// appearance unless `known_labels` is given.
pub fn parse_rct(path: impl AsRef<Path>, known_labels: Option<&LabelSet>) -> Result<Corpus> {
    read_corpus(
        path,
        &ReadOptions {
            known_labels,
            ..ReadOptions::default()
        },
    )
}

pub fn read_corpus(path: impl AsRef<Path>, opts: &ReadOptions<'_>) -> Result<Corpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus_str(&text, &path.display().to_string(), opts)
}

/// Parses corpus text; `origin` is used in error messages.
pub fn parse_corpus_str(text: &str, origin: &str, opts: &ReadOptions<'_>) -> Result<Corpus> {
    let mut names: Vec<String> = opts
        .known_labels
        .map(|l| l.names().to_vec())
        .unwrap_or_default();
    let mut abstracts = Vec::new();
    let mut current: Option<Abstract> = None;
    let mut multi = 0;
    let parse_err = |line: usize, msg: &str| Error::Parse {
        path: origin.to_string(),
        line,
        msg: msg.to_string(),
    };

    let finish = |cur: &mut Option<Abstract>, out: &mut Vec<Abstract>, line: usize| {
        if let Some(a) = cur.take() {
            if a.is_empty() {
                return Err(parse_err(line, &format!("abstract `{}` has no sentences", a.id)));
            }
            out.push(a);
        }
        Ok(())
    };

    for (i, raw) in text.split('\n').enumerate() {
        let lineno = i + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if let Some(id) = line.strip_prefix("###") {
            finish(&mut current, &mut abstracts, lineno)?;
            current = Some(Abstract {
                id: id.trim().to_string(),
                text: Vec::new(),
                sentences: Vec::new(),
                labels: Vec::new(),
            });
            continue;
        }
        if line.trim().is_empty() {
            finish(&mut current, &mut abstracts, lineno)?;
            continue;
        }
        let Some(cur) = current.as_mut() else {
            return Err(parse_err(lineno, "sentence line outside of an abstract"));
        };
        let (label, sentence) = match line.split_once('\t') {
            Some((label, sentence)) => (Some(label.trim()), sentence),
            None if opts.allow_unlabeled => (None, line),
            None => return Err(parse_err(lineno, "expected LABEL<TAB>sentence")),
        };
        let label = match label {
            Some(field) => {
                let mut parts = field.split(',').map(str::trim).filter(|p| !p.is_empty());
                let first = parts
                    .next()
                    .ok_or_else(|| parse_err(lineno, "empty label"))?;
                if parts.next().is_some() {
                    multi += 1;
                }
                let idx = match names.iter().position(|n| n == first) {
                    Some(idx) => idx,
                    None if opts.known_labels.is_some() => {
                        return Err(Error::UnknownLabel {
                            label: first.to_string(),
                            path: origin.to_string(),
                            line: lineno,
                        })
                    }
                    None => {
                        names.push(first.to_string());
                        names.len() - 1
                    }
                };
                Some(idx)
            }
            None => None,
        };
        let tokens = tokenize(sentence, opts.tokenizer)
            .map_err(|_| parse_err(lineno, "empty sentence"))?;
        cur.text.push(sentence.trim().to_string());
        cur.sentences.push(tokens);
        cur.labels.push(label);
    }
    finish(&mut current, &mut abstracts, text.lines().count() + 1)?;

    if abstracts.is_empty() {
        return Err(Error::EmptyCorpus(origin.to_string()));
    }
    let label_set = match opts.known_labels {
        Some(l) => l.clone(),
        None => LabelSet::new(names).map_err(|e| Error::Format {
            path: origin.to_string(),
            msg: e.to_string(),
        })?,
    };
    Ok(Corpus {
        abstracts,
        label_set,
        split: opts.split,
        multi_label_reduced: multi,
    })
}

/// Writes abstracts back in corpus format. Sentences without a label are
/// written without the `LABEL<TAB>` prefix.
pub fn serialize_corpus(abstracts: &[Abstract], labels: &LabelSet) -> String {
    let mut out = String::new();
    for (i, a) in abstracts.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = writeln!(out, "###{}", a.id);
        for (text, label) in a.text.iter().zip(&a.labels) {
            match label {
                Some(l) => {
                    let _ = writeln!(out, "{}\t{}", labels.name(*l), text);
                }
                None => {
                    let _ = writeln!(out, "{text}");
                }
            }
        }
    }
    out
}

/// Groups whole abstracts into batches. Training splits are shuffled by
/// `seed`; other splits keep file order.
pub fn make_batches(corpus: &Corpus, max_abstracts_per_batch: usize, seed: u64) -> Vec<Vec<usize>> {
    assert!(max_abstracts_per_batch >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..corpus.abstracts.len()).collect();
    if corpus.split.is_train() {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(max_abstracts_per_batch)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Token frequencies over every sentence of the corpus.
pub fn token_counts(corpus: &Corpus) -> HashMap<&str, usize> {
    let mut counts = HashMap::new();
    for a in &corpus.abstracts {
        for s in &a.sentences {
            for t in s {
                *counts.entry(t.as_str()).or_insert(0) += 1;
            }
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = "###1\nBACKGROUND\tA b c .\nOBJECTIVE\tThe aim .\r\nMETHODS\tWe did it .\n\n###2\nRESULTS\tIt worked .\nCONCLUSIONS\tGood .\n";

    fn parse(text: &str) -> Result<Corpus> {
        parse_corpus_str(text, "fixture", &ReadOptions::default())
    }

    #[test]
    fn two_abstract_fixture() {
        let c = parse(FIXTURE).unwrap();
        assert_eq!(c.abstracts.len(), 2);
        let counts: Vec<usize> = c.abstracts.iter().map(Abstract::len).collect();
        assert_eq!(counts, [3, 2]);
        assert_eq!(c.sentence_count(), 5);
        assert_eq!(
            c.label_set.names(),
            ["BACKGROUND", "OBJECTIVE", "METHODS", "RESULTS", "CONCLUSIONS"]
        );
        assert_eq!(c.abstracts[0].sentences[1], ["the", "aim", "."]);
        assert_eq!(c.abstracts[0].text[1], "The aim .");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse("###1\nBACKGROUND no tab here\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn unknown_label_against_known_set() {
        let known = LabelSet::new(["BACKGROUND", "METHODS"]).unwrap();
        let opts = ReadOptions {
            known_labels: Some(&known),
            ..ReadOptions::default()
        };
        let err = parse_corpus_str(FIXTURE, "fixture", &opts).unwrap_err();
        assert!(matches!(err, Error::UnknownLabel { line: 3, .. }), "{err}");
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(matches!(parse(""), Err(Error::EmptyCorpus(_))));
        assert!(matches!(parse("\n\n"), Err(Error::EmptyCorpus(_))));
    }

    #[test]
    fn multi_label_keeps_first() {
        let c = parse("###1\nOUTCOME,POPULATION\tx y\nOTHER\tz\n").unwrap();
        assert_eq!(c.multi_label_reduced, 1);
        assert_eq!(c.label_set.names(), ["OUTCOME", "OTHER"]);
        assert_eq!(c.abstracts[0].labels, [Some(0), Some(1)]);
    }

    #[test]
    fn tokenizer_modes() {
        let plain = TokenizerOptions::default();
        assert_eq!(tokenize("The aim was 85", plain).unwrap(), ["the", "aim", "was", "85"]);
        let digits = TokenizerOptions {
            normalize_digits: true,
            ..plain
        };
        assert_eq!(tokenize("N = 85", digits).unwrap(), ["n", "=", "00"]);
        assert_eq!(tokenize("The aim of this study", plain).unwrap().len(), 5);
        assert!(matches!(tokenize(" \t ", plain), Err(Error::EmptySentence)));
    }

    #[test]
    fn batches_keep_abstracts_whole() {
        let text: String = (0..5)
            .map(|i| format!("###{i}\nA\tx\nB\ty\n\n"))
            .collect();
        let train = parse(&text).unwrap();
        let sizes: Vec<usize> = make_batches(&train, 2, 7).iter().map(Vec::len).collect();
        assert_eq!(sizes, [2, 2, 1]);
        assert_eq!(make_batches(&train, 2, 7), make_batches(&train, 2, 7));

        let eval = train.clone().with_split(Split::Test);
        let flat: Vec<usize> = make_batches(&eval, 2, 99).concat();
        assert_eq!(flat, [0, 1, 2, 3, 4]);
    }

    #[test]
    fn serialize_round_trip() {
        let c = parse(FIXTURE).unwrap();
        let text = serialize_corpus(&c.abstracts, &c.label_set);
        let again = parse(&text).unwrap();
        assert_eq!(again.abstracts, c.abstracts);
        assert_eq!(again.label_set, c.label_set);
    }

    #[test]
    fn unlabeled_lines_when_allowed() {
        let known = LabelSet::new(["A", "B"]).unwrap();
        let opts = ReadOptions {
            known_labels: Some(&known),
            allow_unlabeled: true,
            ..ReadOptions::default()
        };
        let c = parse_corpus_str("###x\nfirst one\nsecond\nthird\n", "f", &opts).unwrap();
        assert_eq!(c.abstracts[0].labels, [None, None, None]);
        assert!(c.abstracts[0].gold().is_none());
    }
}
