//! Finite-difference check of the full training objective.
//!
//! The model is cast to `f64`. The dropout masks are regenerated from the
//! same seed for every evaluation and the deterministic emissions used by the
//! expectation-linear penalty are computed once at the unperturbed point, so
//! the objective is a fixed smooth function of the parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{CellKind, ContextConfig, EncoderConfig, EncoderKind, ModelConfig, Pooling};
use crate::data::LabelSet;
use crate::embeddings::{EmbeddingTable, Vocabulary};
use crate::error::Result;
use crate::model::Hsln;
use crate::tensor::{Graph, ParamStore};
use crate::train::squared_gap;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    pub beta: f64,
    pub labels: usize,
    pub seed: u64,
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            model: ModelConfig {
                d_w: 8,
                encoder: EncoderConfig {
                    kind: EncoderKind::Rnn,
                    cell: CellKind::Lstm,
                    d_hs: 6,
                    windows: vec![2, 3],
                    d_c: 4,
                    d_a: 4,
                    r: 2,
                    pooling: Pooling::Attention,
                },
                context: ContextConfig {
                    d_hd: 6,
                    ffn_hidden: 6,
                    use_context: true,
                    emission_softmax: false,
                },
                use_crf: true,
                crf_boundary: false,
                dropout: 0.3,
            },
            beta: 0.1,
            labels: 3,
            seed: 11,
            step: 1e-5,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub parameters: usize,
    pub scalars: usize,
    pub max_rel_error: f64,
    /// Parameter holding the worst entry.
    pub worst: String,
    pub objective: f64,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks every scalar of every parameter, embeddings included, on one
/// two-sentence abstract.
pub fn run(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let names: Vec<String> = (0..cfg.labels).map(|i| format!("L{i}")).collect();
    let labels = LabelSet::new(names)?;
    let tokens: Vec<String> = ["<pad>", "<unk>", "we", "measured", "outcomes", "in", "mice"]
        .map(String::from)
        .to_vec();
    let vocab = Vocabulary::from_tokens(tokens)?;
    let mut table = EmbeddingTable::random(&vocab, cfg.model.d_w, cfg.seed);
    table.trainable = true;
    let mut model = Hsln::init(&cfg.model, labels, vocab, table, cfg.seed)?.cast::<f64>();

    // Nonzero transitions and biases so every term has a generic gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xabc);
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let t = model.store.get_mut(id);
        if t.data().iter().all(|&x| x == 0.0) {
            for x in t.data_mut() {
                *x = rand::Rng::random_range(&mut rng, -0.5..0.5);
            }
        }
    }

    let doc = vec![vec![2, 3, 4], vec![5, 6, 1, 2]];
    let gold = vec![1, cfg.labels - 1];
    let target = model.emission_values(&doc)?;
    let mask_seed = cfg.seed.wrapping_mul(31);

    let (value, analytic) = with_gradients(&model, &doc, &gold, &target, cfg, mask_seed)?;
    let mut worst = (0.0f64, String::new());
    let mut scalars = 0;
    let ids: Vec<_> = model.store.ids().collect();
    let mut store = model.store.clone();
    for (p, id) in ids.iter().enumerate() {
        for k in 0..store.get(*id).numel() {
            let orig = store.get(*id).data()[k];
            store.get_mut(*id).data_mut()[k] = orig + cfg.step;
            let plus = eval(&store, &model, &doc, &gold, &target, cfg, mask_seed)?;
            store.get_mut(*id).data_mut()[k] = orig - cfg.step;
            let minus = eval(&store, &model, &doc, &gold, &target, cfg, mask_seed)?;
            store.get_mut(*id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let err = relative_error(analytic[p][k], numeric, cfg.floor);
            if err > worst.0 {
                worst = (err, format!("{}[{k}]", model.store.name(*id)));
            }
            scalars += 1;
        }
    }
    Ok(GradCheckReport {
        parameters: ids.len(),
        scalars,
        max_rel_error: worst.0,
        worst: worst.1,
        objective: value,
    })
}

fn objective(
    g: &mut Graph<'_, f64>,
    model: &Hsln<f64>,
    doc: &[Vec<usize>],
    gold: &[usize],
    target: &[Vec<f64>],
    cfg: &GradCheckConfig,
    mask_seed: u64,
) -> Result<crate::tensor::Var> {
    let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
    let r = model.emissions(g, doc, Some(&mut mask_rng))?;
    let nll = model.sequence_loss(g, &r, gold)?;
    let gap = squared_gap(g, &r, target)?;
    let gap = g.scale(gap, cfg.beta / doc.len() as f64);
    g.add(nll, gap)
}

fn eval(
    store: &ParamStore<f64>,
    model: &Hsln<f64>,
    doc: &[Vec<usize>],
    gold: &[usize],
    target: &[Vec<f64>],
    cfg: &GradCheckConfig,
    mask_seed: u64,
) -> Result<f64> {
    let mut g = Graph::with_params(store);
    let total = objective(&mut g, model, doc, gold, target, cfg, mask_seed)?;
    Ok(g.scalar(total))
}

fn with_gradients(
    model: &Hsln<f64>,
    doc: &[Vec<usize>],
    gold: &[usize],
    target: &[Vec<f64>],
    cfg: &GradCheckConfig,
    mask_seed: u64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let store = &model.store;
    let mut g = Graph::with_params(store);
    let total = objective(&mut g, model, doc, gold, target, cfg, mask_seed)?;
    let grads = g.backward(total)?;
    let per_param = store
        .ids()
        .map(|id| {
            grads
                .param(id)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; store.get(id).numel()])
        })
        .collect();
    Ok((g.scalar(total), per_param))
}
