//! MIND-format news and behaviors files.
//!
//! `news.tsv`: id, category, subcategory, title, abstract, url, title
//! entities, abstract entities. Entity columns are JSON arrays of objects
//! carrying at least `"WikidataId"`.
//!
//! `behaviors.tsv`: impression id, user id, time, space-separated history,
//! space-separated `newsid-label` candidates.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::text::{EntityVocabulary, TokenSequence, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityMention {
    pub wikidata_id: String,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NewsItem {
    pub id: String,
    pub category: String,
    pub subcategory: String,
    pub title_text: String,
    pub abstract_text: String,
    pub url: String,
    pub title: TokenSequence,
    pub abstract_: TokenSequence,
    pub title_entities: Vec<EntityMention>,
    pub abstract_entities: Vec<EntityMention>,
    /// Entity ids: title entities in listed order, then abstract entities.
    pub entity_ids: Vec<usize>,
    /// Number of leading `entity_ids` that come from the title.
    pub n_title_entities: usize,
}

impl NewsItem {
    pub fn entities(&self, title_only: bool) -> &[usize] {
        if title_only {
            &self.entity_ids[..self.n_title_entities]
        } else {
            &self.entity_ids
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct NewsStore {
    items: Vec<NewsItem>,
    index: HashMap<String, usize>,
    pub vocab: Vocabulary,
    pub entity_vocab: EntityVocabulary,
    labels: HashMap<usize, String>,
    pub n_w: usize,
}

impl NewsStore {
    pub fn new(vocab: Vocabulary, entity_vocab: EntityVocabulary, n_w: usize) -> Self {
        NewsStore {
            items: Vec::new(),
            index: HashMap::new(),
            vocab,
            entity_vocab,
            labels: HashMap::new(),
            n_w,
        }
    }

    pub fn get(&self, id: &str) -> Option<&NewsItem> {
        self.index.get(id).map(|&i| &self.items[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn items(&self) -> &[NewsItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Human-readable label of an entity id, falling back to its WikiData id.
    pub fn entity_label(&self, id: usize) -> String {
        self.labels
            .get(&id)
            .cloned()
            .or_else(|| self.entity_vocab.token(id).map(str::to_string))
            .unwrap_or_else(|| format!("#{id}"))
    }

    /// Parses a news file into the store. Tokens and entities are registered
    /// while the respective vocabularies are growable and map to UNK after.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.load_str(&text, &path.display().to_string())
    }

    pub fn load_str(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 8 {
                return Err(Error::Parse {
                    path: origin.to_string(),
                    line: n + 1,
                    msg: format!("expected 8 tab-separated columns, found {}", cols.len()),
                });
            }
            let title_entities = parse_entities(cols[6], origin, n + 1);
            let abstract_entities = parse_entities(cols[7], origin, n + 1);
            let mut entity_ids = Vec::new();
            for m in title_entities.iter().chain(&abstract_entities) {
                let id = self.entity_vocab.intern(&m.wikidata_id);
                if !m.label.is_empty() {
                    self.labels.entry(id).or_insert_with(|| m.label.clone());
                }
                entity_ids.push(id);
            }
            let item = NewsItem {
                id: cols[0].to_string(),
                category: cols[1].to_string(),
                subcategory: cols[2].to_string(),
                title_text: cols[3].to_string(),
                abstract_text: cols[4].to_string(),
                url: cols[5].to_string(),
                title: TokenSequence::from_text(cols[3], &mut self.vocab, self.n_w),
                abstract_: TokenSequence::from_text(cols[4], &mut self.vocab, self.n_w),
                n_title_entities: title_entities.len(),
                title_entities,
                abstract_entities,
                entity_ids,
            };
            if item.title.num_real() == 0 {
                warn!("{origin}:{}: news {} has an empty title", n + 1, item.id);
            }
            match self.index.get(&item.id) {
                Some(&i) => self.items[i] = item,
                None => {
                    self.index.insert(item.id.clone(), self.items.len());
                    self.items.push(item);
                }
            }
        }
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for item in &self.items {
            writeln!(out, "{}", news_line(item)).unwrap();
        }
        out
    }
}

fn parse_entities(field: &str, origin: &str, line: usize) -> Vec<EntityMention> {
    let field = field.trim();
    if field.is_empty() {
        return Vec::new();
    }
    let parsed: Option<Vec<EntityMention>> = serde_json::from_str::<Value>(field)
        .ok()
        .and_then(|v| {
            v.as_array()?
                .iter()
                .map(|e| {
                    Some(EntityMention {
                        wikidata_id: e.get("WikidataId")?.as_str()?.to_string(),
                        label: e
                            .get("Label")
                            .and_then(Value::as_str)
                            .unwrap_or_default()
                            .to_string(),
                    })
                })
                .collect()
        });
    parsed.unwrap_or_else(|| {
        warn!("{origin}:{line}: malformed entity JSON, treating as empty");
        Vec::new()
    })
}

fn entities_json(ms: &[EntityMention]) -> String {
    let arr: Vec<Value> = ms
        .iter()
        .map(|m| serde_json::json!({ "Label": m.label, "WikidataId": m.wikidata_id }))
        .collect();
    Value::Array(arr).to_string()
}

pub fn news_line(item: &NewsItem) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        item.id,
        item.category,
        item.subcategory,
        item.title_text,
        item.abstract_text,
        item.url,
        entities_json(&item.title_entities),
        entities_json(&item.abstract_entities)
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Impression {
    pub id: String,
    pub user_id: String,
    pub time: String,
    /// Seconds since an arbitrary epoch, for ordering.
    pub timestamp: i64,
    /// Oldest to newest, truncated to the newest `n_u`.
    pub history: Vec<String>,
    pub candidates: Vec<(String, u8)>,
}

impl Impression {
    pub fn positives(&self) -> impl Iterator<Item = &str> {
        self.candidates
            .iter()
            .filter(|(_, l)| *l == 1)
            .map(|(n, _)| n.as_str())
    }

    pub fn negatives(&self) -> impl Iterator<Item = &str> {
        self.candidates
            .iter()
            .filter(|(_, l)| *l == 0)
            .map(|(n, _)| n.as_str())
    }

    pub fn to_line(&self) -> String {
        let cands: Vec<String> = self
            .candidates
            .iter()
            .map(|(n, l)| format!("{n}-{l}"))
            .collect();
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.id,
            self.user_id,
            self.time,
            self.history.join(" "),
            cands.join(" ")
        )
    }
}

/// Parses `M/D/YYYY h:mm:ss AM|PM` or a plain integer.
pub fn parse_time(s: &str) -> Option<i64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    let mut parts = s.split_whitespace();
    let date = parts.next()?;
    let clock = parts.next()?;
    let meridiem = parts.next();
    let d: Vec<i64> = date.split('/').map(|x| x.parse().ok()).collect::<Option<_>>()?;
    let t: Vec<i64> = clock.split(':').map(|x| x.parse().ok()).collect::<Option<_>>()?;
    let ([month, day, year], [mut hour, minute, second]) = (d.as_slice(), t.as_slice()) else {
        return None;
    };
    let (month, day, year) = (*month, *day, *year);
    if !(1..=12).contains(&month) || !(1..=31).contains(&day) || hour > 23 {
        return None;
    }
    match meridiem {
        Some("AM") if hour == 12 => hour = 0,
        Some("PM") if hour < 12 => hour += 12,
        Some("AM") | Some("PM") | None => {}
        Some(_) => return None,
    }
    // days from civil date
    let y = if month <= 2 { year - 1 } else { year };
    let era = y.div_euclid(400);
    let yoe = y - era * 400;
    let mp = (month + 9) % 12;
    let doy = (153 * mp + 2) / 5 + day - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    let days = era * 146097 + doe - 719468;
    Some(days * 86400 + hour * 3600 + minute * 60 + second)
}

pub fn parse_behaviors(path: &Path, store: &NewsStore, n_u: usize) -> Result<Vec<Impression>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_behaviors_str(&text, &path.display().to_string(), store, n_u)
}

pub fn parse_behaviors_str(
    text: &str,
    origin: &str,
    store: &NewsStore,
    n_u: usize,
) -> Result<Vec<Impression>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: origin.to_string(),
            line: n + 1,
            msg,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(err(format!(
                "expected 5 tab-separated columns, found {}",
                cols.len()
            )));
        }
        let timestamp = parse_time(cols[2]).ok_or_else(|| err(format!("bad time {:?}", cols[2])))?;
        let mut history: Vec<String> = cols[3].split_whitespace().map(str::to_string).collect();
        let mut candidates = Vec::new();
        for tok in cols[4].split_whitespace() {
            let (id, label) = match tok.rsplit_once('-') {
                Some((id, "1")) => (id, 1u8),
                Some((id, "0")) => (id, 0u8),
                _ => return Err(err(format!("candidate {tok:?} lacks a -0/-1 label"))),
            };
            candidates.push((id.to_string(), label));
        }
        if let Some(missing) = history
            .iter()
            .map(String::as_str)
            .chain(candidates.iter().map(|(id, _)| id.as_str()))
            .find(|id| !store.contains(id))
        {
            warn!("{origin}:{}: unknown news id {missing}, skipping impression", n + 1);
            continue;
        }
        if history.len() > n_u {
            history.drain(..history.len() - n_u);
        }
        out.push(Impression {
            id: cols[0].to_string(),
            user_id: cols[1].to_string(),
            time: cols[2].to_string(),
            timestamp,
            history,
            candidates,
        });
    }
    Ok(out)
}

/// One clicked candidate with sampled negatives from the same impression.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSample {
    /// Index into the impression list the samples were built from.
    pub impression: usize,
    pub user_id: String,
    pub positive: String,
    pub negatives: Vec<String>,
}

/// Draws `h` negatives without replacement, or with replacement when the
/// impression has fewer than `h`.
pub fn sample_negatives<R: Rng>(pool: &[&str], h: usize, rng: &mut R) -> Vec<String> {
    if pool.len() >= h {
        pool.choose_multiple(rng, h).map(|s| s.to_string()).collect()
    } else {
        (0..h)
            .map(|_| pool[rng.gen_range(0..pool.len())].to_string())
            .collect()
    }
}

/// Expands every clicked candidate into a sample. Impressions without
/// history or without any non-clicked candidate are skipped.
pub fn make_training_samples<R: Rng>(
    impressions: &[Impression],
    h: usize,
    rng: &mut R,
) -> Result<Vec<TrainingSample>> {
    if h == 0 {
        return Err(Error::Config("negative ratio must be at least 1".into()));
    }
    let mut out = Vec::new();
    for (i, imp) in impressions.iter().enumerate() {
        if imp.history.is_empty() {
            continue;
        }
        let pool: Vec<&str> = imp.negatives().collect();
        if pool.is_empty() {
            if imp.positives().next().is_some() {
                warn!("impression {} has no negatives, skipping", imp.id);
            }
            continue;
        }
        for pos in imp.positives() {
            out.push(TrainingSample {
                impression: i,
                user_id: imp.user_id.clone(),
                positive: pos.to_string(),
                negatives: sample_negatives(&pool, h, rng),
            });
        }
    }
    Ok(out)
}

/// Splits off the latest `fraction` of impressions by timestamp as a dev set.
/// Ties keep file order.
pub fn split_by_time(impressions: &[Impression], fraction: f64) -> (Vec<Impression>, Vec<Impression>) {
    let mut sorted: Vec<&Impression> = impressions.iter().collect();
    sorted.sort_by_key(|i| i.timestamp);
    let n_dev = ((impressions.len() as f64) * fraction).round() as usize;
    let cut = impressions.len() - n_dev.min(impressions.len());
    (
        sorted[..cut].iter().map(|i| (*i).clone()).collect(),
        sorted[cut..].iter().map(|i| (*i).clone()).collect(),
    )
}
