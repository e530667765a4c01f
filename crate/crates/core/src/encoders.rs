//! Persona-aware news and user encoders.
//!
//! News encoder: token vectors pass through two dense layers and a
//! multi-head self-attention block to give term vectors `T`. Each persona
//! entity, projected and passed through a bilinear form against `T`, attends
//! over the terms to produce a per-entity summary; an additive attention layer
//! pools the summaries into the news vector `r`.
//!
//! User encoder: every history item is encoded with the user's persona, the
//! stack passes through self-attention to give `Z`, each entity attends over
//! `Z` with an additive scorer on `(entity ⊕ z_j)`, and a final additive
//! attention layer pools the per-entity summaries into `u`.
//!
//! Padded positions are dropped before encoding; since they are masked out
//! of every attention they contribute nothing, and the attention maps are
//! re-expanded to full length for reporting.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelDims, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::{self, AdditivePool, Dense, MultiHeadSelfAttention};
use crate::params::{ParamId, ParamSet};
use crate::persona::Persona;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::text::{TextBackend, TokenSequence};

#[derive(Clone, Debug)]
pub struct NewsEncoderParams {
    pub inner: Dense,
    pub outer: Dense,
    pub attention: MultiHeadSelfAttention,
    pub entity_proj: Dense,
    pub bilinear: ParamId,
    pub pool: AdditivePool,
}

#[derive(Clone, Debug)]
pub struct UserEncoderParams {
    pub attention: MultiHeadSelfAttention,
    pub entity_proj: Dense,
    /// Scores `(entity ⊕ news)` pairs; the weight has `2 * d_r` rows,
    /// entity half first.
    pub pair: Dense,
    pub pair_query: ParamId,
    pub pool: AdditivePool,
}

#[derive(Clone, Debug)]
pub struct ClickHeadParams {
    pub hidden: Dense,
    pub query: ParamId,
}

#[derive(Clone, Debug)]
pub struct ProjectionParams {
    pub inner: Dense,
    pub outer: Dense,
}

/// Where persona entity vectors come from.
#[derive(Clone, Debug)]
pub enum EntitySource {
    /// Entity table lookup (trainable or imported).
    Table(TextBackend),
    /// A single learned pseudo-entity replacing the persona.
    Pseudo(ParamId),
}

/// Parameter layout of the whole network. Ids index into a `ParamSet` of any
/// scalar type created by casting the model's parameters.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub dims: ModelDims,
    pub text: TextBackend,
    pub entities: EntitySource,
    pub news: NewsEncoderParams,
    pub user: UserEncoderParams,
    pub click: ClickHeadParams,
    pub projection: Option<ProjectionParams>,
    pub dropout: f64,
    pub abstract_as_title: bool,
}

/// Per-forward settings. The RNG drives dropout only when training.
pub struct Forward<'r> {
    pub training: bool,
    pub rng: &'r mut ChaCha8Rng,
}

impl Architecture {
    /// Registers every parameter for `cfg` into `params`.
    pub fn build<R: Rng>(
        cfg: &TrainConfig,
        vocab_size: usize,
        entity_vocab_size: usize,
        params: &mut ParamSet,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dims;
        let text = TextBackend::Trainable(params.insert_uniform(
            "text.embedding",
            vocab_size,
            d.d_w,
            0.1,
            rng,
        )?);
        let entities = if cfg.use_persona {
            EntitySource::Table(TextBackend::Trainable(params.insert_uniform(
                "entity.embedding",
                entity_vocab_size,
                d.d_e,
                0.1,
                rng,
            )?))
        } else {
            EntitySource::Pseudo(params.insert_uniform("entity.pseudo", 1, d.d_e, 0.1, rng)?)
        };
        let news = NewsEncoderParams {
            inner: Dense::register(params, "news.dense_inner", d.d_w, d.d_r, rng)?,
            outer: Dense::register(params, "news.dense_outer", d.d_r, d.d_r, rng)?,
            attention: MultiHeadSelfAttention::register(params, "news.mha", d.d_r, d.heads, rng)?,
            entity_proj: Dense::register(params, "news.entity_proj", d.d_e, d.d_r, rng)?,
            bilinear: params.insert_glorot("news.bilinear", d.d_r, d.d_r, rng)?,
            pool: AdditivePool::register(params, "news.pool", d.d_r, d.d_attn, rng)?,
        };
        let user = UserEncoderParams {
            attention: MultiHeadSelfAttention::register(params, "user.mha", d.d_r, d.heads, rng)?,
            entity_proj: Dense::register(params, "user.entity_proj", d.d_e, d.d_r, rng)?,
            pair: Dense::register(params, "user.pair", 2 * d.d_r, d.d_attn, rng)?,
            pair_query: params.insert_glorot("user.pair.query", d.d_attn, 1, rng)?,
            pool: AdditivePool::register(params, "user.pool", d.d_r, d.d_attn, rng)?,
        };
        let click = ClickHeadParams {
            hidden: Dense::register(params, "click.hidden", 2 * d.d_r, d.d_attn, rng)?,
            query: params.insert_glorot("click.query", d.d_attn, 1, rng)?,
        };
        let projection = if cfg.use_cl {
            Some(ProjectionParams {
                inner: Dense::register(params, "cl.proj_inner", d.d_r, d.d_r, rng)?,
                outer: Dense::register(params, "cl.proj_outer", d.d_r, d.d_p, rng)?,
            })
        } else {
            None
        };
        Ok(Architecture {
            dims: d,
            text,
            entities,
            news,
            user,
            click,
            projection,
            dropout: cfg.dropout,
            abstract_as_title: cfg.abstract_as_title,
        })
    }

    pub fn uses_persona(&self) -> bool {
        matches!(self.entities, EntitySource::Table(_))
    }

    /// Swaps the token source, e.g. for imported frozen vectors. The
    /// replacement must have the configured width.
    pub fn set_text_backend(&mut self, backend: TextBackend) -> Result<()> {
        if let TextBackend::Frozen(t) = &backend {
            if t.shape()[1] != self.dims.d_w {
                return Err(Error::Format(format!(
                    "token vectors have width {}, model expects {}",
                    t.shape()[1],
                    self.dims.d_w
                )));
            }
        }
        self.text = backend;
        Ok(())
    }

    pub fn set_entity_backend(&mut self, backend: TextBackend) -> Result<()> {
        if !self.uses_persona() {
            return Err(Error::Config("model was built without persona".into()));
        }
        if let TextBackend::Frozen(t) = &backend {
            if t.shape()[1] != self.dims.d_e {
                return Err(Error::Format(format!(
                    "entity vectors have width {}, model expects {}",
                    t.shape()[1],
                    self.dims.d_e
                )));
            }
        }
        self.entities = EntitySource::Table(backend);
        Ok(())
    }

    /// Persona rows fed to both encoders: the active entities (UNK for cold
    /// start), or the pseudo-entity when the persona path is ablated.
    pub fn persona_matrix<T: Scalar>(&self, tape: &mut Tape<'_, T>, persona: &Persona) -> Result<Var> {
        match &self.entities {
            EntitySource::Table(backend) => backend.lookup(tape, &persona.encoder_ids()),
            EntitySource::Pseudo(id) => Ok(tape.param(*id)),
        }
    }

    /// Encoder input text for a news item.
    pub fn news_text(&self, title: &TokenSequence, abstract_: &TokenSequence) -> TokenSequence {
        if self.abstract_as_title {
            title.concat(abstract_, title.len())
        } else {
            title.clone()
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NewsRepresentation {
    /// `1 x d_r`
    pub r: Var,
    /// `1 x n_e`
    pub entity_attention: Var,
    /// `n_e x n_real_terms`
    pub term_attention: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct UserRepresentation {
    /// `1 x d_r`
    pub u: Var,
    /// `1 x n_e`
    pub entity_attention: Var,
    /// `n_e x n_history`
    pub news_attention: Var,
}

pub fn encode_news<T: Scalar>(
    arch: &Architecture,
    tape: &mut Tape<'_, T>,
    text: &TokenSequence,
    persona: Var,
    fwd: &mut Forward<'_>,
) -> Result<NewsRepresentation> {
    let real: Vec<usize> = text
        .ids
        .iter()
        .zip(&text.mask)
        .filter(|(_, m)| **m)
        .map(|(i, _)| *i)
        .collect();
    if real.is_empty() {
        return Err(Error::DegenerateInput("news text has no tokens".into()));
    }
    let p = &arch.news;
    let slope = nn::slope::<T>();

    let x = arch.text.lookup(tape, &real)?;
    let x = nn::dropout(tape, x, arch.dropout, fwd.training, fwd.rng)?;
    let h = p.inner.forward(tape, x)?;
    let h = tape.leaky_relu(h, slope);
    let h = p.outer.forward(tape, h)?;
    let all = vec![true; real.len()];
    let terms = p.attention.forward(tape, h, &all)?;

    let e = p.entity_proj.forward(tape, persona)?;
    let e = tape.leaky_relu(e, slope);
    let q = tape.param(p.bilinear);
    let eq = tape.matmul(e, q)?;
    let logits = tape.matmul_t(eq, terms)?;
    let term_attention = tape.softmax(logits)?;
    let per_entity = tape.matmul(term_attention, terms)?;

    let n_e = tape.dims(per_entity).0;
    let (r, entity_attention) = p.pool.forward(tape, per_entity, &vec![true; n_e])?;
    Ok(NewsRepresentation {
        r,
        entity_attention,
        term_attention,
    })
}

pub fn encode_user<T: Scalar>(
    arch: &Architecture,
    tape: &mut Tape<'_, T>,
    history: &[TokenSequence],
    persona: Var,
    fwd: &mut Forward<'_>,
) -> Result<UserRepresentation> {
    if history.is_empty() {
        return Err(Error::ColdStart);
    }
    let mut rows = Vec::with_capacity(history.len());
    for text in history {
        rows.push(encode_news(arch, tape, text, persona, fwd)?.r);
    }
    encode_user_from_news(arch, tape, &rows, persona, fwd)
}

/// The user encoder after the per-item news encoder, given the news vectors.
pub fn encode_user_from_news<T: Scalar>(
    arch: &Architecture,
    tape: &mut Tape<'_, T>,
    news: &[Var],
    persona: Var,
    fwd: &mut Forward<'_>,
) -> Result<UserRepresentation> {
    let p = &arch.user;
    let slope = nn::slope::<T>();
    let d_r = arch.dims.d_r;
    let n = news.len();

    let z = tape.stack_rows(news)?;
    let z = nn::dropout(tape, z, arch.dropout, fwd.training, fwd.rng)?;
    let z = p.attention.forward(tape, z, &vec![true; n])?;

    let e = p.entity_proj.forward(tape, persona)?;
    let e = tape.leaky_relu(e, slope);
    let n_e = tape.dims(e).0;

    let w = tape.param(p.pair.weight);
    let w_entity = tape.slice_rows(w, 0, d_r)?;
    let w_news = tape.slice_rows(w, d_r, 2 * d_r)?;
    let a = tape.matmul(e, w_entity)?;
    let b = tape.matmul(z, w_news)?;
    let pairs = tape.pair_sum(a, b)?;
    let bias = tape.param(p.pair.bias);
    let pairs = tape.add_row(pairs, bias)?;
    let pairs = tape.leaky_relu(pairs, slope);
    let q1 = tape.param(p.pair_query);
    let scores = tape.matmul(pairs, q1)?;
    let scores = tape.reshape(scores, n_e, n)?;
    let news_attention = tape.softmax(scores)?;
    let per_entity = tape.matmul(news_attention, z)?;

    let (u, entity_attention) = p.pool.forward(tape, per_entity, &vec![true; n_e])?;
    Ok(UserRepresentation {
        u,
        entity_attention,
        news_attention,
    })
}

/// Expands per-real-token attention back to the padded `n_w` layout.
pub fn expand_term_attention(weights: &[f64], n_real: usize, mask: &[bool]) -> Vec<Vec<f64>> {
    weights
        .chunks(n_real)
        .map(|row| {
            let mut it = row.iter();
            mask.iter()
                .map(|m| if *m { *it.next().unwrap() } else { 0.0 })
                .collect()
        })
        .collect()
}

/// A frozen snapshot of parameters together with their layout.
#[derive(Clone, Debug)]
pub struct Model {
    pub arch: Architecture,
    pub params: ParamSet,
}

impl Model {
    pub fn new(
        cfg: &TrainConfig,
        vocab_size: usize,
        entity_vocab_size: usize,
        seed: u64,
    ) -> Result<Self> {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let arch = Architecture::build(cfg, vocab_size, entity_vocab_size, &mut params, &mut rng)?;
        Ok(Model { arch, params })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn param_tensor(&self, name: &str) -> Option<&Tensor> {
        self.params.by_name(name)
    }
}
