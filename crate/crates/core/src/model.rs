//! The assembled network: embeddings, sentence encoder, context layer,
//! emission head and CRF.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::context::{ContextLayer, EmissionHead};
use crate::crf::{self, CrfParams};
use crate::data::{Abstract, LabelSet};
use crate::embeddings::{EmbeddingTable, Vocabulary};
use crate::encoder::SentenceEncoder;
use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Var};

pub const EMBEDDING_PARAM: &str = "embed.words";

/// Token indices of one abstract, one inner vector per sentence.
pub type Encoded = Vec<Vec<usize>>;

#[derive(Clone, Debug)]
pub struct Hsln<F: Scalar = f32> {
    pub config: ModelConfig,
    pub labels: LabelSet,
    pub vocab: Vocabulary,
    pub store: ParamStore<F>,
    pub embedding: ParamId,
    pub encoder: SentenceEncoder,
    pub context: ContextLayer,
    pub head: EmissionHead,
    pub crf: Option<CrfParams>,
}

impl Hsln<f32> {
    /// Builds a model around an embedding table. Parameters are drawn from a
    /// generator seeded with `seed`, in declaration order.
    pub fn init(
        config: &ModelConfig,
        labels: LabelSet,
        vocab: Vocabulary,
        table: EmbeddingTable,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if table.dim() != config.d_w || table.vocab_size() != vocab.len() {
            return Err(Error::dim(
                "embedding table",
                table.matrix.shape(),
                &[config.d_w, vocab.len()],
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let trainable = table.trainable;
        let embedding = store.insert(EMBEDDING_PARAM, table.matrix.with_requires_grad(trainable));
        let encoder = SentenceEncoder::init(&mut store, &config.encoder, config.d_w, &mut rng);
        let sent_dim = config.encoder.sentence_dim();
        let context = ContextLayer::init(&mut store, &config.context, sent_dim, &mut rng);
        let head = EmissionHead::init(
            &mut store,
            &config.context,
            config.head_input_dim(),
            labels.len(),
            &mut rng,
        );
        let crf = config
            .use_crf
            .then(|| CrfParams::init(&mut store, labels.len(), config.crf_boundary, &mut rng));
        Ok(Hsln {
            config: config.clone(),
            labels,
            vocab,
            store,
            embedding,
            encoder,
            context,
            head,
            crf,
        })
    }
}

impl<F: Scalar> Hsln<F> {
    pub fn cast<G: Scalar>(&self) -> Hsln<G> {
        Hsln {
            config: self.config.clone(),
            labels: self.labels.clone(),
            vocab: self.vocab.clone(),
            store: self.store.cast(),
            embedding: self.embedding,
            encoder: self.encoder.clone(),
            context: self.context.clone(),
            head: self.head.clone(),
            crf: self.crf.clone(),
        }
    }

    /// Trainable scalars outside the embedding matrix.
    pub fn param_count(&self) -> usize {
        self.store.total_count() - self.store.get(self.embedding).numel()
    }

    pub fn encode(&self, a: &Abstract) -> Encoded {
        a.sentences.iter().map(|s| self.vocab.indices(s)).collect()
    }

    /// Emission vectors for every sentence. With `rng` set, dropout is
    /// sampled on the sentence vectors and on the context outputs.
    pub fn emissions(
        &self,
        g: &mut Graph<'_, F>,
        sentences: &[Vec<usize>],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<Var>> {
        if sentences.is_empty() {
            return Err(Error::Contract("abstract has no sentences".into()));
        }
        let table = g.param(self.embedding);
        let p = self.config.dropout;
        let mut vectors = Vec::with_capacity(sentences.len());
        for tokens in sentences {
            if tokens.is_empty() {
                return Err(Error::EmptySentence);
            }
            let e = g.gather_columns(table, tokens)?;
            let s = self.encoder.encode(g, e)?;
            vectors.push(nn::dropout(g, s, p, rng.as_deref_mut())?);
        }
        let enriched = self.context.contextualize(g, &vectors)?;
        enriched
            .into_iter()
            .map(|h| {
                let h = nn::dropout(g, h, p, rng.as_deref_mut())?;
                self.head.emit(g, h)
            })
            .collect()
    }

    /// CRF negative log-likelihood, or summed cross-entropy without a CRF.
    pub fn sequence_loss(&self, g: &mut Graph<'_, F>, emissions: &[Var], gold: &[usize]) -> Result<Var> {
        match &self.crf {
            Some(params) => {
                let vars = params.bind(g);
                crf::nll_loss(g, emissions, gold, vars)
            }
            None => crf::cross_entropy(g, emissions, gold),
        }
    }

    /// Deterministic emission values for one abstract.
    pub fn emission_values(&self, sentences: &[Vec<usize>]) -> Result<Vec<Vec<F>>> {
        let mut g = Graph::with_params(&self.store);
        let r = self.emissions(&mut g, sentences, None)?;
        Ok(r.iter().map(|&v| g.value(v).to_vec()).collect())
    }

    pub fn decode(&self, emissions: &[Vec<F>]) -> Vec<usize> {
        match &self.crf {
            Some(params) => crf::viterbi_decode(
                emissions,
                self.store.get(params.transitions).data(),
                params.start.map(|p| self.store.get(p).data()),
                params.end.map(|p| self.store.get(p).data()),
            ),
            None => crf::argmax_decode(emissions),
        }
    }

    pub fn predict(&self, sentences: &[Vec<usize>]) -> Result<Vec<usize>> {
        let r = self.emission_values(sentences)?;
        if r.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("emission scores".into()));
        }
        Ok(self.decode(&r))
    }

    pub fn predict_abstract(&self, a: &Abstract) -> Result<Vec<usize>> {
        self.predict(&self.encode(a))
    }

    /// Transition matrix values, if the model has a CRF.
    pub fn transitions(&self) -> Option<&[F]> {
        self.crf.as_ref().map(|c| self.store.get(c.transitions).data())
    }
}
