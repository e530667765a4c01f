//! Explicit user personas: the salient entities of a user's most recent reads.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamId;
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;
use crate::text::{PAD, UNK};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonaConfig {
    /// Most recent history items considered.
    pub top_g: usize,
    /// Leading entities taken from each item.
    pub top_k: usize,
    /// Persona capacity.
    pub n_e: usize,
}

impl PersonaConfig {
    pub fn new(top_g: usize, top_k: usize, n_e: usize) -> Result<Self> {
        if top_g == 0 || top_k == 0 || n_e == 0 {
            return Err(Error::Config(format!(
                "persona sizes must be positive (G={top_g}, K={top_k}, n_e={n_e})"
            )));
        }
        Ok(PersonaConfig { top_g, top_k, n_e })
    }

    /// Capacity defaults to `G * K`.
    pub fn with_default_capacity(top_g: usize, top_k: usize) -> Result<Self> {
        Self::new(top_g, top_k, top_g * top_k)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Persona {
    pub user_id: String,
    pub entity_ids: Vec<usize>,
    pub mask: Vec<bool>,
    /// For each slot, the news ids the entity was drawn from (empty for PAD).
    pub provenance: Vec<Vec<String>>,
}

impl Persona {
    pub fn len(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Entity ids of the real (mask-true) slots, in rank order.
    pub fn active_ids(&self) -> Vec<usize> {
        self.entity_ids
            .iter()
            .zip(&self.mask)
            .filter(|(_, m)| **m)
            .map(|(e, _)| *e)
            .collect()
    }

    /// Ids fed to the encoders: the active entities, or the single UNK
    /// entity for a cold-start persona.
    pub fn encoder_ids(&self) -> Vec<usize> {
        let ids = self.active_ids();
        if ids.is_empty() {
            vec![UNK]
        } else {
            ids
        }
    }
}

/// Builds a persona from a history ordered oldest to newest, where each item
/// is `(news_id, entity ids in listed order)`.
///
/// The newest `G` items contribute their first `K` entities. Entities are
/// ranked by the number of those items that contain them, ties broken by how
/// recently they first appear, and the top `n_e` are kept.
pub fn build_persona<S: AsRef<str>>(
    user_id: &str,
    history: &[(S, &[usize])],
    cfg: PersonaConfig,
) -> Persona {
    struct Slot {
        freq: usize,
        first_seen: usize,
        sources: Vec<String>,
    }
    let mut slots: HashMap<usize, Slot> = HashMap::new();
    let mut order = 0;
    for (news_id, entities) in history.iter().rev().take(cfg.top_g) {
        let mut seen_here = Vec::with_capacity(cfg.top_k);
        for &e in entities.iter().take(cfg.top_k) {
            if e == PAD || seen_here.contains(&e) {
                continue;
            }
            seen_here.push(e);
            let slot = slots.entry(e).or_insert_with(|| {
                order += 1;
                Slot {
                    freq: 0,
                    first_seen: order,
                    sources: Vec::new(),
                }
            });
            slot.freq += 1;
            slot.sources.push(news_id.as_ref().to_string());
        }
    }
    let mut ranked: Vec<(usize, Slot)> = slots.into_iter().collect();
    ranked.sort_by(|a, b| {
        b.1.freq
            .cmp(&a.1.freq)
            .then(a.1.first_seen.cmp(&b.1.first_seen))
    });
    ranked.truncate(cfg.n_e);

    let mut entity_ids = Vec::with_capacity(cfg.n_e);
    let mut mask = Vec::with_capacity(cfg.n_e);
    let mut provenance = Vec::with_capacity(cfg.n_e);
    for (e, slot) in ranked {
        entity_ids.push(e);
        mask.push(true);
        provenance.push(slot.sources);
    }
    while entity_ids.len() < cfg.n_e {
        entity_ids.push(PAD);
        mask.push(false);
        provenance.push(Vec::new());
    }
    Persona {
        user_id: user_id.to_string(),
        entity_ids,
        mask,
        provenance,
    }
}

/// `n_e x d_e` entity vectors; masked slots are zero rows.
pub fn persona_embeddings<T: Scalar>(
    tape: &mut Tape<'_, T>,
    persona: &Persona,
    entity_table: ParamId,
) -> Result<Var> {
    let emb = tape.embedding(entity_table, &persona.entity_ids)?;
    if persona.mask.iter().all(|m| *m) {
        return Ok(emb);
    }
    let d = tape.dims(emb).1;
    tape.mul_const(emb, crate::nn::row_mask(&persona.mask, d))
}

/// One line: `user<TAB>label(N1 N2),label(N3)`.
pub fn report_line(persona: &Persona, label: impl Fn(usize) -> String) -> String {
    let items: Vec<String> = persona
        .entity_ids
        .iter()
        .zip(&persona.mask)
        .zip(&persona.provenance)
        .filter(|((_, m), _)| **m)
        .map(|((e, _), src)| {
            let name = label(*e).replace([',', '(', ')', '\t'], " ");
            format!("{}({})", name.trim(), src.join(" "))
        })
        .collect();
    format!("{}\t{}", persona.user_id, items.join(","))
}
