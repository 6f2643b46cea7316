//! Self-describing checkpoint files.
//!
//! Layout: a UTF-8 header of `[section]` blocks (config, labels, vocab, meta,
//! params) terminated by a `[data]` line, followed by the raw little-endian
//! `f32` values of every parameter in header order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::Config;
use crate::data::LabelSet;
use crate::embeddings::{EmbeddingTable, Vocabulary};
use crate::error::{Error, Result};
use crate::model::Hsln;
use crate::tensor::Tensor;

const MAGIC: &str = "hsln-checkpoint v1";
const DATA_MARKER: &[u8] = b"[data]\n";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: Config,
    pub model: Hsln,
    pub epoch: usize,
    pub val_weighted_f1: f64,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let mut h = String::new();
        let _ = writeln!(h, "{MAGIC}");
        h.push_str("[config]\n");
        h.push_str(&self.config.to_kv());
        let _ = writeln!(h, "[labels] {}", m.labels.len());
        for name in m.labels.names() {
            let _ = writeln!(h, "{name}");
        }
        let _ = writeln!(h, "[vocab] {} {}", m.vocab.len(), m.vocab.hash());
        for t in m.vocab.tokens() {
            let _ = writeln!(h, "{t}");
        }
        h.push_str("[meta]\n");
        let _ = writeln!(h, "epoch = {}", self.epoch);
        let _ = writeln!(h, "val_weighted_f1 = {:?}", self.val_weighted_f1);
        let _ = writeln!(h, "[params] {}", m.store.len());
        for (_, name, t) in m.store.iter() {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let _ = writeln!(h, "{name} {} {}", u8::from(t.requires_grad()), dims.join("x"));
        }
        let mut bytes = h.into_bytes();
        bytes.extend_from_slice(DATA_MARKER);
        for (_, _, t) in m.store.iter() {
            for x in t.data() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .windows(DATA_MARKER.len() + 1)
            .position(|w| w[0] == b'\n' && &w[1..] == DATA_MARKER)
            .ok_or_else(|| corrupt("missing [data] section"))?;
        let header = std::str::from_utf8(&bytes[..=split]).map_err(|_| corrupt("header is not UTF-8"))?;
        let mut data = &bytes[split + 1 + DATA_MARKER.len()..];
        let mut lines = header.lines();
        let mut next = |what: &str| lines.next().ok_or_else(|| corrupt(format!("truncated before {what}")));

        if next("magic")? != MAGIC {
            return Err(corrupt("not an hsln checkpoint"));
        }
        if next("config")? != "[config]" {
            return Err(corrupt("expected [config]"));
        }
        let mut kv = String::new();
        let labels_line = loop {
            let line = next("labels")?;
            if line.starts_with("[labels]") {
                break line;
            }
            kv.push_str(line);
            kv.push('\n');
        };
        let config = Config::from_kv(&kv).map_err(|e| corrupt(format!("config: {e}")))?;
        let count = |line: &str, tag: &str| -> Result<Vec<String>> {
            let rest = line
                .strip_prefix(tag)
                .ok_or_else(|| corrupt(format!("expected {tag}")))?;
            Ok(rest.split_whitespace().map(String::from).collect())
        };
        let n_labels: usize = count(labels_line, "[labels]")?
            .first()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| corrupt("bad label count"))?;
        let names = (0..n_labels).map(|_| next("label").map(String::from)).collect::<Result<Vec<_>>>()?;
        let labels = LabelSet::new(names).map_err(|e| corrupt(format!("labels: {e}")))?;

        let vocab_fields = count(next("vocab")?, "[vocab]")?;
        let (n_vocab, hash) = match vocab_fields.as_slice() {
            [n, h] => (n.parse::<usize>().map_err(|_| corrupt("bad vocab size"))?, h.clone()),
            _ => return Err(corrupt("bad [vocab] line")),
        };
        let tokens = (0..n_vocab).map(|_| next("vocab entry").map(String::from)).collect::<Result<Vec<_>>>()?;
        let vocab = Vocabulary::from_tokens(tokens).map_err(|e| corrupt(format!("vocab: {e}")))?;
        if vocab.hash() != hash {
            return Err(corrupt("vocabulary hash mismatch"));
        }

        if next("meta")? != "[meta]" {
            return Err(corrupt("expected [meta]"));
        }
        let meta = |line: &str, key: &str| -> Result<String> {
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix(" = "))
                .map(String::from)
                .ok_or_else(|| corrupt(format!("expected `{key}`")))
        };
        let epoch: usize = meta(next("epoch")?, "epoch")?
            .parse()
            .map_err(|_| corrupt("bad epoch"))?;
        let val_weighted_f1: f64 = meta(next("val_weighted_f1")?, "val_weighted_f1")?
            .parse()
            .map_err(|_| corrupt("bad val_weighted_f1"))?;

        let n_params: usize = count(next("params")?, "[params]")?
            .first()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| corrupt("bad parameter count"))?;
        let mut declared = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let line = next("parameter")?;
            let f: Vec<&str> = line.split_whitespace().collect();
            let [name, flag, dims] = f.as_slice() else {
                return Err(corrupt(format!("bad parameter line `{line}`")));
            };
            let shape = dims
                .split('x')
                .map(|d| d.parse::<usize>().map_err(|_| corrupt(format!("bad shape `{dims}`"))))
                .collect::<Result<Vec<_>>>()?;
            let trainable = match *flag {
                "0" => false,
                "1" => true,
                _ => return Err(corrupt(format!("bad trainable flag `{flag}`"))),
            };
            declared.push((name.to_string(), trainable, shape));
        }
        if lines.next().is_some() {
            return Err(corrupt("unexpected header lines"));
        }

        let d_w = config.model.d_w;
        let table = EmbeddingTable {
            matrix: Tensor::zeros(&[d_w, vocab.len()]),
            trainable: false,
        };
        let mut model = Hsln::init(&config.model, labels, vocab, table, 0)
            .map_err(|e| corrupt(format!("config does not build a model: {e}")))?;
        if model.store.len() != declared.len() {
            return Err(corrupt(format!(
                "{} parameters declared, the config implies {}",
                declared.len(),
                model.store.len()
            )));
        }
        let ids: Vec<_> = model.store.ids().collect();
        for (id, (name, trainable, shape)) in ids.into_iter().zip(declared) {
            if model.store.name(id) != name {
                return Err(corrupt(format!("expected parameter `{}`, found `{name}`", model.store.name(id))));
            }
            let t = model.store.get(id);
            if t.shape() != shape.as_slice() {
                return Err(corrupt(format!(
                    "parameter `{name}` has shape {:?}, the config implies {:?}",
                    shape,
                    t.shape()
                )));
            }
            let n = t.numel();
            if data.len() < 4 * n {
                return Err(corrupt(format!("data ends inside `{name}`")));
            }
            let values = data[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            data = &data[4 * n..];
            let t = Tensor::new(&shape, values)?.with_requires_grad(trainable);
            *model.store.get_mut(id) = t;
        }
        if !data.is_empty() {
            return Err(corrupt(format!("{} trailing bytes", data.len())));
        }
        Ok(Checkpoint {
            config,
            model,
            epoch,
            val_weighted_f1,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let config = Config::tiny();
        let labels = LabelSet::new(["B", "O", "M"]).unwrap();
        let vocab = Vocabulary::from_tokens(["<pad>", "<unk>", "the", "aim"].map(String::from).to_vec()).unwrap();
        let table = EmbeddingTable::random(&vocab, config.model.d_w, 3);
        let model = Hsln::init(&config.model, labels, vocab, table, 4).unwrap();
        Checkpoint {
            config,
            model,
            epoch: 2,
            val_weighted_f1: 0.8125,
        }
    }

    #[test]
    fn bytes_round_trip() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.model.store, ck.model.store);
        assert_eq!(back.epoch, 2);
        assert_eq!(back.val_weighted_f1, 0.8125);
    }

    #[test]
    fn tampering_is_detected() {
        let bytes = sample().to_bytes();
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let swap = |from: &str, to: &str| {
            let mut b = bytes.clone();
            let at = text.find(from).unwrap();
            b.splice(at..at + from.len(), to.bytes());
            Checkpoint::from_bytes(&b)
        };
        let shape_err = swap("head.b2 1 3", "head.b2 1 4").unwrap_err();
        assert!(matches!(shape_err, Error::CorruptCheckpoint(_)), "{shape_err}");
        let vocab_err = swap("\naim\n", "\nair\n").unwrap_err();
        assert!(vocab_err.to_string().contains("hash"), "{vocab_err}");
        let truncated = Checkpoint::from_bytes(&bytes[..bytes.len() - 2]).unwrap_err();
        assert!(matches!(truncated, Error::CorruptCheckpoint(_)));
        assert_eq!(truncated.exit_code(), 2);
    }
}
