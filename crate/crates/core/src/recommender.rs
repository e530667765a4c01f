//! Inference: scoring impressions and explaining recommendations with a
//! trained model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{Impression, NewsItem, NewsStore};
use crate::encoders::{encode_news, Architecture, encode_user_from_news, Forward, Model};
use crate::error::{Error, Result};
use crate::eval::Scorer;
use crate::objectives::click_logit;
use crate::persona::{build_persona, Persona, PersonaConfig};
use crate::tape::{Tape, Var};
use crate::text::{TokenSequence, UNK};

/// Builds a persona from history news ids, oldest first.
pub fn persona_for(
    store: &NewsStore,
    user_id: &str,
    history: &[String],
    cfg: PersonaConfig,
    title_only: bool,
) -> Persona {
    let items: Vec<(&str, &[usize])> = history
        .iter()
        .filter_map(|id| store.get(id).map(|n| (id.as_str(), n.entities(title_only))))
        .collect();
    build_persona(user_id, &items, cfg)
}

/// Encoder input for a news item; an empty title falls back to a single UNK.
pub fn news_input(arch: &Architecture, item: &NewsItem) -> TokenSequence {
    let text = arch.news_text(&item.title, &item.abstract_);
    if text.num_real() == 0 {
        TokenSequence::from_ids(&[UNK], text.len().max(1))
    } else {
        text
    }
}

/// A model bound to its news store for eval-mode scoring.
pub struct Recommender<'a> {
    pub model: &'a Model,
    pub store: &'a NewsStore,
    pub persona: PersonaConfig,
    pub title_entities_only: bool,
}

/// One persona entity's share of a candidate's representation.
#[derive(Clone, Debug, Serialize)]
pub struct EntityAttribution {
    pub entity: String,
    pub weight: f64,
    /// Candidate terms ranked by this entity's attention.
    pub terms: Vec<(String, f64)>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CandidateExplanation {
    pub news_id: String,
    pub title: String,
    pub probability: f64,
    pub entities: Vec<EntityAttribution>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Explanation {
    pub user_id: String,
    pub cold_start: bool,
    pub candidates: Vec<CandidateExplanation>,
}

impl<'a> Recommender<'a> {
    pub fn new(model: &'a Model, store: &'a NewsStore, persona: PersonaConfig, title_entities_only: bool) -> Self {
        Recommender {
            model,
            store,
            persona,
            title_entities_only,
        }
    }

    fn item(&self, id: &str) -> Result<&'a NewsItem> {
        self.store
            .get(id)
            .ok_or_else(|| Error::DegenerateInput(format!("unknown news id {id}")))
    }

    fn text(&self, item: &NewsItem) -> TokenSequence {
        news_input(&self.model.arch, item)
    }

    pub fn persona(&self, user_id: &str, history: &[String]) -> Persona {
        persona_for(self.store, user_id, history, self.persona, self.title_entities_only)
    }

    /// Records the user vector on `tape`. Cold-start users get a zero vector.
    fn user_vector(
        &self,
        tape: &mut Tape<'_, f32>,
        history: &[String],
        persona: Var,
        fwd: &mut Forward<'_>,
    ) -> Result<Var> {
        let arch = &self.model.arch;
        if history.is_empty() {
            return tape.constant(1, arch.dims.d_r, vec![0.0; arch.dims.d_r]);
        }
        let mut rows = Vec::with_capacity(history.len());
        for id in history {
            let text = self.text(self.item(id)?);
            rows.push(encode_news(arch, tape, &text, persona, fwd)?.r);
        }
        Ok(encode_user_from_news(arch, tape, &rows, persona, fwd)?.u)
    }

    /// Click logits for `candidates` given the user's history. Logits rank
    /// identically to probabilities and do not saturate in f32.
    pub fn logits(&self, user_id: &str, history: &[String], candidates: &[&str]) -> Result<Vec<f64>> {
        let arch = &self.model.arch;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut fwd = Forward {
            training: false,
            rng: &mut rng,
        };
        let mut tape = Tape::new(&self.model.params);
        let persona = self.persona(user_id, history);
        let pm = arch.persona_matrix(&mut tape, &persona)?;
        let u = self.user_vector(&mut tape, history, pm, &mut fwd)?;
        candidates
            .iter()
            .map(|id| {
                let text = self.text(self.item(id)?);
                let r = encode_news(arch, &mut tape, &text, pm, &mut fwd)?.r;
                let logit = click_logit(arch, &mut tape, u, r)?;
                Ok(tape.scalar(logit) as f64)
            })
            .collect()
    }

    /// Ranks `candidates` and explains the top `top_n` of them.
    pub fn explain(
        &self,
        user_id: &str,
        history: &[String],
        candidates: &[&str],
        top_n: usize,
        top_terms: usize,
    ) -> Result<Explanation> {
        let arch = &self.model.arch;
        let logits = self.logits(user_id, history, candidates)?;
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));

        let persona = self.persona(user_id, history);
        let labels: Vec<String> = if arch.uses_persona() {
            persona
                .encoder_ids()
                .iter()
                .map(|&e| self.store.entity_label(e))
                .collect()
        } else {
            vec!["(pseudo-entity)".to_string()]
        };

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut fwd = Forward {
            training: false,
            rng: &mut rng,
        };
        let mut out = Vec::new();
        for &c in order.iter().take(top_n) {
            let item = self.item(candidates[c])?;
            let text = self.text(item);
            let mut tape = Tape::new(&self.model.params);
            let pm = arch.persona_matrix(&mut tape, &persona)?;
            let rep = encode_news(arch, &mut tape, &text, pm, &mut fwd)?;
            let beta = tape.value(rep.entity_attention).to_vec();
            let alpha = tape.value(rep.term_attention).to_vec();
            let words: Vec<String> = text
                .ids
                .iter()
                .zip(&text.mask)
                .filter(|(_, m)| **m)
                .map(|(&id, _)| self.store.vocab.token(id).unwrap_or("[UNK]").to_string())
                .collect();
            let n_terms = words.len();
            let mut entities: Vec<EntityAttribution> = beta
                .iter()
                .enumerate()
                .map(|(e, &w)| {
                    let row = &alpha[e * n_terms..(e + 1) * n_terms];
                    let mut terms: Vec<(String, f64)> = words
                        .iter()
                        .cloned()
                        .zip(row.iter().map(|&a| a as f64))
                        .collect();
                    terms.sort_by(|a, b| b.1.total_cmp(&a.1));
                    terms.truncate(top_terms);
                    EntityAttribution {
                        entity: labels[e].clone(),
                        weight: w as f64,
                        terms,
                    }
                })
                .collect();
            entities.sort_by(|a, b| b.weight.total_cmp(&a.weight));
            out.push(CandidateExplanation {
                news_id: item.id.clone(),
                title: item.title_text.clone(),
                probability: crate::objectives::probability(logits[c]),
                entities,
            });
        }
        Ok(Explanation {
            user_id: user_id.to_string(),
            cold_start: history.is_empty(),
            candidates: out,
        })
    }
}

impl Scorer for Recommender<'_> {
    fn score(&self, imp: &Impression) -> Result<Vec<f64>> {
        let ids: Vec<&str> = imp.candidates.iter().map(|(id, _)| id.as_str()).collect();
        self.logits(&imp.user_id, &imp.history, &ids)
    }
}

impl Explanation {
    pub fn to_text(&self) -> String {
        use std::fmt::Write as _;
        let mut s = String::new();
        writeln!(s, "user {}", self.user_id).unwrap();
        if self.cold_start {
            writeln!(s, "  (no history: UNK persona fallback)").unwrap();
        }
        for c in &self.candidates {
            writeln!(s, "  {} p={:.4} {:?}", c.news_id, c.probability, c.title).unwrap();
            for e in &c.entities {
                let terms: Vec<String> = e.terms.iter().map(|(t, w)| format!("{t}:{w:.3}")).collect();
                writeln!(s, "    {:<24} {:.4}  {}", e.entity, e.weight, terms.join(" ")).unwrap();
            }
        }
        s
    }
}
