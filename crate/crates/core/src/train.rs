//! Optimization: Adam, the per-epoch learning-rate schedule, the
//! expectation-linear dropout penalty and the epoch loop with
//! best-validation model selection.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{Config, TrainConfig};
use crate::data::{make_batches, Corpus};
use crate::embeddings::{build_vocab, load_pretrained, Coverage, EmbeddingTable};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{Encoded, Hsln};
use crate::tensor::{Graph, ParamStore, Scalar, Var};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates for every parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F = f32> {
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
    pub step: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        let zeros: Vec<Vec<F>> = store
            .iter()
            .map(|(_, _, t)| vec![F::zero(); t.numel()])
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update from the gradients stored on each tensor.
/// Frozen parameters are skipped.
pub fn adam_step<F: Scalar>(store: &mut ParamStore<F>, state: &mut AdamState<F>, lr: f64) -> Result<()> {
    for (_, name, t) in store.iter() {
        if t.grad().is_some_and(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let (b1, b2, eps) = (F::of(ADAM_BETA1), F::of(ADAM_BETA2), F::of(ADAM_EPS));
    let step_size = F::of(lr / c1);
    let c2_sqrt = F::of(c2.sqrt());
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let i = id.index();
        let tensor = store.get_mut(id);
        if !tensor.requires_grad() {
            continue;
        }
        let Some(grad) = tensor.grad().map(<[F]>::to_vec) else {
            continue;
        };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (k, x) in tensor.data_mut().iter_mut().enumerate() {
            let g = grad[k];
            m[k] = b1 * m[k] + (F::one() - b1) * g;
            v[k] = b2 * v[k] + (F::one() - b2) * g * g;
            *x = *x - step_size * m[k] / (v[k].sqrt() / c2_sqrt + eps);
        }
    }
    Ok(())
}

/// `lr0 · decay^epoch`, epochs counted from zero.
pub fn epoch_lr(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_decay.powi(epoch as i32)
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients<F: Scalar>(store: &mut ParamStore<F>, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .filter_map(|(_, _, t)| t.grad())
        .flatten()
        .map(|g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = F::of(max_norm / norm);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let t = store.get_mut(id);
            if let Some(g) = t.grad().map(|g| g.iter().map(|&x| x * scale).collect::<Vec<_>>()) {
                t.zero_grad();
                let _ = t.accumulate_grad(&g);
            }
        }
    }
    norm
}

/// `Σ_i ‖r_i − target_i‖²` with the targets held constant.
pub fn squared_gap<F: Scalar>(g: &mut Graph<'_, F>, emissions: &[Var], targets: &[Vec<F>]) -> Result<Var> {
    if emissions.len() != targets.len() {
        return Err(Error::Contract("one target per emission vector".into()));
    }
    let mut terms = Vec::with_capacity(emissions.len());
    for (&r, t) in emissions.iter().zip(targets) {
        let c = g.constant(&[t.len()], t.clone())?;
        let d = g.sub(r, c)?;
        let sq = g.mul(d, d)?;
        terms.push(g.sum(sq));
    }
    g.add_n(&terms)
}

/// Mean over the batch's sentences of the squared distance between
/// dropout-sampled and deterministic emissions, evaluated without gradients.
pub fn el_penalty<F: Scalar>(model: &Hsln<F>, batch: &[Encoded], mask_seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
    let mut total = 0.0;
    let mut sentences = 0;
    for doc in batch {
        let target = model.emission_values(doc)?;
        let mut g = Graph::with_params(&model.store);
        let r = model.emissions(&mut g, doc, Some(&mut rng))?;
        let gap = squared_gap(&mut g, &r, &target)?;
        total += g.scalar(gap).as_f64();
        sentences += doc.len();
    }
    Ok(if sentences == 0 { 0.0 } else { total / sentences as f64 })
}

/// Builds the training objective of one abstract inside `g`:
/// `nll / batch_docs + β · gap / batch_sentences`. Summed over a batch this
/// gives the mean NLL per abstract plus β times the mean per-sentence gap.
pub fn abstract_objective<F: Scalar>(
    model: &Hsln<F>,
    g: &mut Graph<'_, F>,
    doc: &[Vec<usize>],
    gold: &[usize],
    beta: f64,
    batch_docs: usize,
    batch_sentences: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, Var)> {
    let target = if beta > 0.0 && model.config.dropout > 0.0 {
        Some(model.emission_values(doc)?)
    } else {
        None
    };
    let r = model.emissions(g, doc, Some(rng))?;
    let nll = model.sequence_loss(g, &r, gold)?;
    let scaled = g.scale(nll, 1.0 / batch_docs as f64);
    let total = match target {
        Some(t) => {
            let gap = squared_gap(g, &r, &t)?;
            let gap = g.scale(gap, beta / batch_sentences as f64);
            g.add(scaled, gap)?
        }
        None => scaled,
    };
    Ok((total, nll))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training NLL per abstract.
    pub loss: f64,
    pub val_weighted_f1: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub log: Vec<String>,
}

fn gold_paths(corpus: &Corpus) -> Result<Vec<Vec<usize>>> {
    corpus
        .abstracts
        .iter()
        .map(|a| {
            a.gold()
                .ok_or_else(|| Error::LabelMismatch(format!("abstract {} has unlabeled sentences", a.id)))
        })
        .collect()
}

/// Weighted F1 of the model on a labeled corpus.
pub fn validate<F: Scalar>(model: &Hsln<F>, corpus: &Corpus) -> Result<f64> {
    let gold = gold_paths(corpus)?;
    let pred = corpus
        .abstracts
        .iter()
        .map(|a| model.predict_abstract(a))
        .collect::<Result<Vec<_>>>()?;
    Ok(metrics::evaluate(&pred, &gold, &model.labels)?.weighted_f1)
}

/// Vocabulary from `train`, embeddings from `emb` when given (seeded random
/// vectors otherwise) and freshly initialized layers.
pub fn initial_model(cfg: &Config, train: &Corpus, emb: Option<&Path>) -> Result<(Hsln, Option<Coverage>)> {
    cfg.validate()?;
    let vocab = build_vocab(train, cfg.train.min_count)?;
    let seed = cfg.train.seed;
    let (mut table, coverage) = match emb {
        Some(path) => {
            let (t, c) = load_pretrained(path, &vocab, cfg.model.d_w, seed)?;
            (t, Some(c))
        }
        None => (EmbeddingTable::random(&vocab, cfg.model.d_w, seed), None),
    };
    table.trainable = cfg.train.trainable_embeddings;
    let model = Hsln::init(&cfg.model, train.label_set.clone(), vocab, table, seed)?;
    Ok((model, coverage))
}

/// Runs the epoch loop. Epoch 0 is the untrained model; each later epoch is
/// one pass over `train`. The returned checkpoint holds the parameters of the
/// epoch with the best validation weighted F1 (earliest on ties). `log`
/// receives every log line as it is produced.
pub fn train(
    cfg: &Config,
    mut model: Hsln,
    train: &Corpus,
    val: &Corpus,
    log: &mut dyn FnMut(&str),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.label_set != model.labels || val.label_set != model.labels {
        return Err(Error::LabelMismatch(
            "training, validation and model label sets differ".into(),
        ));
    }
    if train.abstracts.is_empty() {
        return Err(Error::EmptyCorpus("training corpus".into()));
    }
    let tc = &cfg.train;
    let beta = tc.effective_beta();
    let gold = gold_paths(train)?;
    let docs: Vec<Encoded> = train.abstracts.iter().map(|a| model.encode(a)).collect();

    let mut lines = Vec::new();
    let mut emit = |line: String, lines: &mut Vec<String>| {
        log(&line);
        lines.push(line);
    };
    let ablations: Vec<&str> = cfg.ablations().iter().map(|a| a.name()).collect();
    emit(
        format!(
            "header seed={} ablations={} labels={} params={} train_abstracts={} val_abstracts={} beta={} dropout={}",
            tc.seed,
            if ablations.is_empty() { "none".into() } else { ablations.join(",") },
            model.labels.names().join(","),
            model.param_count(),
            train.abstracts.len(),
            val.abstracts.len(),
            beta,
            model.config.dropout,
        ),
        &mut lines,
    );

    let f1 = validate(&model, val)?;
    emit(format!("epoch=0 lr=0 loss=nan val_weighted_f1={:.4}", 100.0 * f1), &mut lines);
    let mut history = vec![EpochRecord {
        epoch: 0,
        lr: 0.0,
        loss: f64::NAN,
        val_weighted_f1: f1,
    }];
    let mut best = (0usize, f1, model.store.clone());
    let mut state = AdamState::new(&model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed_d409);
    let mut stale = 0;

    for epoch in 1..=tc.epochs {
        let lr = epoch_lr(epoch - 1, tc);
        let batches = make_batches(train, tc.batch_size, tc.seed.wrapping_add(epoch as u64));
        let mut loss_sum = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let batch_sentences: usize = batch.iter().map(|&i| docs[i].len()).sum();
            model.store.zero_grads();
            for &i in batch {
                let grads = {
                    let mut g = Graph::with_params(&model.store);
                    let (objective, nll) = abstract_objective(
                        &model,
                        &mut g,
                        &docs[i],
                        &gold[i],
                        beta,
                        batch.len(),
                        batch_sentences,
                        &mut rng,
                    )?;
                    let value = g.scalar(objective);
                    if !value.is_finite() {
                        return Err(Error::NonFinite(format!(
                            "loss at epoch {epoch}, batch {b}, abstract {}",
                            train.abstracts[i].id
                        )));
                    }
                    loss_sum += g.scalar(nll).as_f64();
                    g.backward(objective)?
                };
                model.store.accumulate(&grads)?;
            }
            if let Some(c) = tc.clip_norm {
                clip_gradients(&mut model.store, c);
            }
            adam_step(&mut model.store, &mut state, lr).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("{m} at epoch {epoch}, batch {b}")),
                e => e,
            })?;
        }
        model.store.zero_grads();
        let loss = loss_sum / docs.len() as f64;
        let f1 = validate(&model, val)?;
        let improved = f1 > best.1;
        if improved {
            best = (epoch, f1, model.store.clone());
            stale = 0;
        } else {
            stale += 1;
        }
        emit(
            format!(
                "epoch={epoch} lr={lr:.6} loss={loss:.6} val_weighted_f1={:.4}{}",
                100.0 * f1,
                if improved { " best" } else { "" }
            ),
            &mut lines,
        );
        history.push(EpochRecord {
            epoch,
            lr,
            loss,
            val_weighted_f1: f1,
        });
        if stale >= tc.patience {
            emit(format!("early_stop epoch={epoch}"), &mut lines);
            break;
        }
    }
    emit(
        format!("selected epoch={} val_weighted_f1={:.4}", best.0, 100.0 * best.1),
        &mut lines,
    );
    model.store = best.2;
    Ok(TrainOutcome {
        best: Checkpoint {
            config: cfg.clone(),
            model,
            epoch: best.0,
            val_weighted_f1: best.1,
        },
        history,
        log: lines,
    })
}
