use hsln::data::{parse_corpus_str, serialize_corpus, ReadOptions, Split};
use hsln::embeddings::EmbeddingTable;
use hsln::synthetic::{generate_text, SyntheticConfig};
use hsln::train::{initial_model, train, validate};
use hsln::{Checkpoint, Config, Corpus};

fn corpora(n: usize, seed: u64) -> (Corpus, Corpus) {
    let text = |abstracts, seed| {
        generate_text(&SyntheticConfig {
            abstracts,
            seed,
            ..SyntheticConfig::default()
        })
        .unwrap()
    };
    let train = parse_corpus_str(&text(n, seed), "train", &ReadOptions::default()).unwrap();
    let val = parse_corpus_str(
        &text(n / 4 + 1, seed + 100),
        "val",
        &ReadOptions {
            known_labels: Some(&train.label_set),
            split: Split::Validation,
            ..ReadOptions::default()
        },
    )
    .unwrap();
    (train, val)
}

fn config(epochs: usize) -> Config {
    let mut cfg = Config::tiny();
    cfg.train.epochs = epochs;
    cfg.train.seed = 3;
    cfg
}

fn embedding_checksum(m: &hsln::Hsln) -> String {
    EmbeddingTable {
        matrix: m.store.get(m.embedding).clone(),
        trainable: false,
    }
    .checksum()
}

#[test]
fn same_seed_same_log_and_checkpoint() {
    let (tr, va) = corpora(40, 1);
    let run = || {
        let cfg = config(3);
        let (model, _) = initial_model(&cfg, &tr, None).unwrap();
        train(&cfg, model, &tr, &va, &mut |_| {}).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.log, b.log);
    assert_eq!(a.best.to_bytes(), b.best.to_bytes());

    let mut other = config(3);
    other.train.seed = 4;
    let (model, _) = initial_model(&other, &tr, None).unwrap();
    let c = train(&other, model, &tr, &va, &mut |_| {}).unwrap();
    assert_ne!(a.best.to_bytes(), c.best.to_bytes());
}

#[test]
fn zero_epochs_keeps_the_initial_model() {
    let (tr, va) = corpora(10, 2);
    let cfg = config(0);
    let (model, _) = initial_model(&cfg, &tr, None).unwrap();
    let store = model.store.clone();
    let out = train(&cfg, model, &tr, &va, &mut |_| {}).unwrap();
    assert_eq!(out.best.epoch, 0);
    assert_eq!(out.history.len(), 1);
    assert_eq!(out.best.model.store, store);
}

#[test]
fn frozen_embeddings_do_not_move() {
    let (tr, va) = corpora(30, 3);
    let cfg = config(2);
    assert!(!cfg.train.trainable_embeddings);
    let (model, _) = initial_model(&cfg, &tr, None).unwrap();
    let before = embedding_checksum(&model);
    let out = train(&cfg, model, &tr, &va, &mut |_| {}).unwrap();
    assert!(out.history.len() == 3);
    assert_eq!(embedding_checksum(&out.best.model), before);

    let mut tuned = config(1);
    tuned.train.trainable_embeddings = true;
    let (model, _) = initial_model(&tuned, &tr, None).unwrap();
    let before = embedding_checksum(&model);
    let out = train(&tuned, model, &tr, &va, &mut |_| {}).unwrap();
    assert_eq!(out.best.epoch, 1);
    assert_ne!(embedding_checksum(&out.best.model), before);
}

#[test]
fn training_loss_does_not_climb_early() {
    let (tr, va) = corpora(100, 4);
    let mut cfg = config(5);
    cfg.train.patience = 10;
    let (model, _) = initial_model(&cfg, &tr, None).unwrap();
    let out = train(&cfg, model, &tr, &va, &mut |_| {}).unwrap();
    let losses: Vec<f64> = out.history.iter().skip(1).map(|r| r.loss).collect();
    assert_eq!(losses.len(), 5);
    for w in losses.windows(2) {
        assert!(w[1] <= w[0] * 1.05, "{losses:?}");
    }
    assert!(losses[4] < losses[0]);
}

#[test]
fn best_epoch_is_the_logged_maximum() {
    let (tr, va) = corpora(60, 5);
    let cfg = config(4);
    let (model, _) = initial_model(&cfg, &tr, None).unwrap();
    let out = train(&cfg, model, &tr, &va, &mut |_| {}).unwrap();
    let best = out
        .history
        .iter()
        .fold(&out.history[0], |b, r| if r.val_weighted_f1 > b.val_weighted_f1 { r } else { b });
    assert_eq!(out.best.epoch, best.epoch);
    assert_eq!(out.best.val_weighted_f1, best.val_weighted_f1);
    assert_eq!(validate(&out.best.model, &va).unwrap(), best.val_weighted_f1);
    assert!(out.log.last().unwrap().starts_with(&format!("selected epoch={}", best.epoch)));
}

#[test]
fn reloaded_checkpoint_predicts_identically() {
    let (tr, va) = corpora(30, 6);
    let cfg = config(2);
    let (model, _) = initial_model(&cfg, &tr, None).unwrap();
    let out = train(&cfg, model, &tr, &va, &mut |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    out.best.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.to_bytes(), std::fs::read(&path).unwrap());
    for a in &va.abstracts {
        let x = out.best.model.predict_abstract(a).unwrap();
        let y = back.model.predict_abstract(a).unwrap();
        assert_eq!(x, y);
        let ex = out.best.model.emission_values(&out.best.model.encode(a)).unwrap();
        let ey = back.model.emission_values(&back.model.encode(a)).unwrap();
        assert_eq!(ex, ey);
    }
}

#[test]
fn corpus_text_round_trips() {
    let (tr, _) = corpora(20, 7);
    let text = serialize_corpus(&tr.abstracts, &tr.label_set);
    let again = parse_corpus_str(&text, "again", &ReadOptions::default()).unwrap();
    assert_eq!(again.abstracts, tr.abstracts);
    assert_eq!(serialize_corpus(&again.abstracts, &again.label_set), text);
}
