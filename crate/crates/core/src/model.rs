//! The full answer-selection network: embedding, sentence encoder,
//! optional two-way attention and cosine scoring.

use crate::attention::{bind_attention, init_attention, project_question, two_way_attention_projected, AttentionOutput, AttentionParams};
use crate::embedding::{embed, init_embeddings, pad_truncate, EmbeddingTable, PaddedSequence};
use crate::encoder::{bind_encoder, encode_feature_map, init_encoder, pool_encoding, EncoderConfig, EncoderParams, FeatureMap};
use crate::error::{Error, Result};
use crate::scoring::{order_candidates, ScoredCandidate};
use crate::tensor::{ParamStore, Tape, Var};
use rand::Rng;

pub const DEFAULT_EMBED_DIM: usize = 100;
pub const DEFAULT_SEQ_LEN: usize = 100;
pub const DEFAULT_EMBED_INIT_RANGE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Including the padding and unknown ids.
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Fixed sentence length `L`.
    pub seq_len: usize,
    pub embed_init_range: f64,
    pub encoder: EncoderConfig,
    /// Without attention the representation is the plain max-pooled
    /// feature map.
    pub attention: bool,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: DEFAULT_EMBED_DIM,
            seq_len: DEFAULT_SEQ_LEN,
            embed_init_range: DEFAULT_EMBED_INIT_RANGE,
            encoder: EncoderConfig::default(),
            attention: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config("vocabulary size must be at least 2".into()));
        }
        if self.embed_dim == 0 || self.seq_len == 0 {
            return Err(Error::Config("embedding dimension and sequence length must be positive".into()));
        }
        if !(self.embed_init_range > 0.0 && self.embed_init_range.is_finite()) {
            return Err(Error::Config(format!(
                "embedding init range must be positive, got {}",
                self.embed_init_range
            )));
        }
        self.encoder.validate()
    }

    /// Length of `r_q` / `r_a`.
    pub fn representation_len(&self) -> usize {
        let c = self.encoder.total_channels();
        if self.attention {
            2 * c
        } else {
            c
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub embedding: EmbeddingTable,
    pub encoder: EncoderParams,
    pub attention: Option<AttentionParams>,
}

/// An encoded question, with `Q_f^T U` when the model has attention.
#[derive(Debug, Clone, Copy)]
pub struct QuestionSide {
    pub features: FeatureMap,
    pub projected: Option<Var>,
}

/// Forward result for one (question, answer) pair.
#[derive(Debug, Clone, Copy)]
pub struct PairForward {
    pub r_q: Var,
    pub r_a: Var,
    pub attention: Option<AttentionOutput>,
}

impl Model {
    /// Draws all parameters from `rng` in a fixed order: embeddings,
    /// convolutions, attention.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let embedding = init_embeddings(&mut params, config.vocab_size, config.embed_dim, config.embed_init_range, rng)?;
        let encoder = init_encoder(&mut params, &config.encoder, config.embed_dim, rng)?;
        let attention = if config.attention {
            Some(init_attention(&mut params, config.encoder.total_channels(), rng)?)
        } else {
            None
        };
        Ok(Self {
            config,
            params,
            embedding,
            encoder,
            attention,
        })
    }

    /// Rebuilds a model around loaded parameters. The store must hold
    /// exactly the tensors `config` calls for.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let w = params
            .id_of("embedding.W")
            .ok_or_else(|| Error::Checkpoint("missing parameter embedding.W".into()))?;
        let expected = [config.embed_dim, config.vocab_size];
        if params.get(w).shape() != expected {
            return Err(Error::Checkpoint(format!(
                "embedding.W has shape {:?}, expected {expected:?}",
                params.get(w).shape()
            )));
        }
        let embedding = EmbeddingTable {
            weights: w,
            dim: config.embed_dim,
            vocab_size: config.vocab_size,
        };
        let encoder = bind_encoder(&params, &config.encoder, config.embed_dim)?;
        let attention = if config.attention {
            Some(bind_attention(&params, config.encoder.total_channels())?)
        } else {
            None
        };
        let expected_count = 1 + 2 * encoder.layers.len() + usize::from(attention.is_some());
        if params.len() != expected_count {
            return Err(Error::Checkpoint(format!(
                "expected {expected_count} parameter tensors, found {}",
                params.len()
            )));
        }
        Ok(Self {
            config,
            params,
            embedding,
            encoder,
            attention,
        })
    }

    pub fn prepare(&self, ids: &[usize]) -> Result<PaddedSequence> {
        pad_truncate(ids, self.config.seq_len)
    }

    pub fn encode(&self, tape: &mut Tape, seq: &PaddedSequence) -> Result<FeatureMap> {
        let emb = embed(tape, &self.params, &self.embedding, seq)?;
        encode_feature_map(tape, &self.params, emb, seq.len, &self.config.encoder, &self.encoder)
    }

    pub fn encode_question(&self, tape: &mut Tape, seq: &PaddedSequence) -> Result<QuestionSide> {
        let features = self.encode(tape, seq)?;
        let projected = match &self.attention {
            Some(att) => Some(project_question(tape, &self.params, &features, att)?),
            None => None,
        };
        Ok(QuestionSide { features, projected })
    }

    pub fn represent(&self, tape: &mut Tape, q: &QuestionSide, af: &FeatureMap) -> Result<PairForward> {
        let qf = &q.features;
        match q.projected {
            Some(projected) => {
                let out = two_way_attention_projected(tape, qf, projected, af)?;
                Ok(PairForward {
                    r_q: out.r_q,
                    r_a: out.r_a,
                    attention: Some(out),
                })
            }
            None => Ok(PairForward {
                r_q: pool_encoding(tape, qf)?,
                r_a: pool_encoding(tape, af)?,
                attention: None,
            }),
        }
    }

    /// `(r_q, r_a)` for one pair, without recording gradients anywhere.
    pub fn pair_representation(&self, q: &PaddedSequence, a: &PaddedSequence) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let qf = self.encode_question(&mut tape, q)?;
        let af = self.encode(&mut tape, a)?;
        let out = self.represent(&mut tape, &qf, &af)?;
        Ok((tape.value(out.r_q).to_vec(), tape.value(out.r_a).to_vec()))
    }

    /// Cosine score of every candidate against the question.
    pub fn score_candidates(&self, q: &PaddedSequence, candidates: &[PaddedSequence]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let qf = self.encode_question(&mut tape, q)?;
        candidates
            .iter()
            .map(|a| {
                let af = self.encode(&mut tape, a)?;
                let out = self.represent(&mut tape, &qf, &af)?;
                let c = tape.cosine(out.r_q, out.r_a)?;
                Ok(tape.scalar(c))
            })
            .collect()
    }

    /// Candidates ordered best first; ids are pool positions.
    pub fn rank(&self, q: &PaddedSequence, candidates: &[PaddedSequence], labels: &[u8]) -> Result<Vec<ScoredCandidate>> {
        if labels.len() != candidates.len() {
            return Err(Error::dim("rank", &[candidates.len()], &[labels.len()]));
        }
        let scores = self.score_candidates(q, candidates)?;
        order_candidates(
            scores
                .into_iter()
                .zip(labels)
                .enumerate()
                .map(|(id, (score, &label))| ScoredCandidate { id, score, label })
                .collect(),
        )
    }
}
