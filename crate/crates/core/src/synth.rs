//! Synthetic MIND-format data with a known click rule.
//!
//! Every user has a latent set of interest entities. Every news item carries
//! one to four entities whose names appear in its title and abstract. A
//! candidate is clicked with high probability when it shares an entity with
//! the user's interests and with low probability otherwise.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Impression;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub users: usize,
    pub news: usize,
    pub entities: usize,
    pub seed: u64,
    pub interests_per_user: usize,
    pub history_len: usize,
    pub impressions_per_user: usize,
    /// Candidates per impression drawn from news that overlap the interests.
    pub overlap_candidates: usize,
    /// Candidates per impression drawn from the remaining news.
    pub other_candidates: usize,
    /// Click probability for overlapping candidates.
    pub p_click_overlap: f64,
    /// Click probability for non-overlapping candidates.
    pub p_click_other: f64,
    /// Title length in words; entity names are padded with filler words.
    pub title_words: usize,
    /// Abstract length in words.
    pub abstract_words: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            users: 50,
            news: 200,
            entities: 20,
            seed: 7,
            interests_per_user: 2,
            history_len: 6,
            impressions_per_user: 30,
            overlap_candidates: 2,
            other_candidates: 6,
            p_click_overlap: 0.97,
            p_click_other: 0.01,
            title_words: 6,
            abstract_words: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthData {
    pub news_tsv: String,
    pub behaviors_tsv: String,
    /// `user<TAB>space-separated interest WikidataIds`
    pub truth_tsv: String,
    pub interests: BTreeMap<String, Vec<String>>,
    pub news_entities: HashMap<String, Vec<String>>,
}

pub const NEWS_FILE: &str = "news.tsv";
pub const BEHAVIORS_FILE: &str = "behaviors.tsv";
pub const TRUTH_FILE: &str = "interests.tsv";

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ru", "ten", "vo", "sa", "bel", "dor", "fin", "gra", "hu", "jex", "nor", "pim", "qua",
];

/// A pronounceable word unique to `(kind, index)`.
fn word(kind: u64, index: usize) -> String {
    let mut n = index as u64 * 2 + kind;
    let mut w = String::new();
    for _ in 0..3 {
        w.push_str(SYLLABLES[(n % 16) as usize]);
        n /= 16;
    }
    w
}

fn entity_id(e: usize) -> String {
    format!("Q{}", 1000 + e)
}

fn entity_name(e: usize) -> String {
    word(0, e)
}

/// MIND-style time string at `minutes` past midnight on 11/9/2019.
fn time_string(minutes: usize) -> String {
    let day = 9 + minutes / (24 * 60);
    let m = minutes % (24 * 60);
    let (h24, min) = (m / 60, m % 60);
    let (h12, ampm) = match h24 {
        0 => (12, "AM"),
        1..=11 => (h24, "AM"),
        12 => (12, "PM"),
        _ => (h24 - 12, "PM"),
    };
    format!("11/{day}/2019 {h12}:{min:02}:00 {ampm}")
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.users == 0 || self.news < 8 || self.entities < 4 {
            return Err(Error::Config(
                "synthetic data needs at least 1 user, 8 news and 4 entities".into(),
            ));
        }
        if self.interests_per_user == 0 || self.interests_per_user >= self.entities {
            return Err(Error::Config("interests_per_user must lie in [1, entities)".into()));
        }
        if self.title_words < 4 || self.abstract_words < 4 {
            return Err(Error::Config("titles and abstracts need room for four entity names".into()));
        }
        if self.overlap_candidates == 0 || self.other_candidates == 0 {
            return Err(Error::Config("both candidate pools must be non-empty".into()));
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<SynthData> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);

        // news: 1-4 entities each; every entity used at least once
        let mut news_ents: Vec<Vec<usize>> = Vec::with_capacity(self.news);
        for i in 0..self.news {
            let k = rng.gen_range(1..=4);
            let mut ents: Vec<usize> = (0..self.entities).collect::<Vec<_>>().choose_multiple(&mut rng, k).copied().collect();
            if i < self.entities && !ents.contains(&i) {
                ents[0] = i;
            }
            news_ents.push(ents);
        }

        let mut news_tsv = String::new();
        let mut news_entities = HashMap::new();
        for (i, ents) in news_ents.iter().enumerate() {
            let id = format!("N{}", i + 1);
            let mut title: Vec<String> = ents.iter().map(|&e| entity_name(e)).collect();
            while title.len() < self.title_words {
                title.push(word(1, rng.gen_range(0..60)));
            }
            title.shuffle(&mut rng);
            let mut abs: Vec<String> = ents.iter().map(|&e| entity_name(e)).collect();
            while abs.len() < self.abstract_words {
                abs.push(word(1, rng.gen_range(0..60)));
            }
            abs.shuffle(&mut rng);
            let ent_json = |es: &[usize]| {
                let v: Vec<serde_json::Value> = es
                    .iter()
                    .map(|&e| serde_json::json!({"Label": entity_name(e), "WikidataId": entity_id(e)}))
                    .collect();
                serde_json::Value::Array(v).to_string()
            };
            // title entities are those named first in the title; all go to the title column
            writeln!(
                news_tsv,
                "{id}\tsynthetic\tsynthetic\t{}\t{}\thttps://example.org/{id}\t{}\t[]",
                title.join(" "),
                abs.join(" "),
                ent_json(ents)
            )
            .unwrap();
            news_entities.insert(id, ents.iter().map(|&e| entity_id(e)).collect());
        }

        let all_entities: Vec<usize> = (0..self.entities).collect();
        let mut interests = BTreeMap::new();
        let mut truth_tsv = String::new();
        let mut user_pools = Vec::with_capacity(self.users);
        for u in 0..self.users {
            let uid = format!("U{}", u + 1);
            let mut ints: Vec<usize> = all_entities
                .choose_multiple(&mut rng, self.interests_per_user)
                .copied()
                .collect();
            ints.sort_unstable();
            let (overlap, other): (Vec<usize>, Vec<usize>) =
                (0..self.news).partition(|&n| news_ents[n].iter().any(|e| ints.contains(e)));
            if overlap.len() < 2 || other.is_empty() {
                // rare with sensible sizes; widen the pool deterministically
                return Err(Error::Config(format!(
                    "user {uid} has too few overlapping news; increase news or entities"
                )));
            }
            let ids: Vec<String> = ints.iter().map(|&e| entity_id(e)).collect();
            writeln!(truth_tsv, "{uid}\t{}", ids.join(" ")).unwrap();
            interests.insert(uid.clone(), ids);
            let history: Vec<usize> = overlap
                .choose_multiple(&mut rng, self.history_len.min(overlap.len() - 1))
                .copied()
                .collect();
            user_pools.push((uid, history, overlap, other));
        }

        let mut behaviors_tsv = String::new();
        let mut imp_id = 0;
        for round in 0..self.impressions_per_user {
            for (u, (uid, history, overlap, other)) in user_pools.iter().enumerate() {
                let fresh: Vec<usize> = overlap.iter().copied().filter(|n| !history.contains(n)).collect();
                let pool = if fresh.is_empty() { overlap } else { &fresh };
                let cands = loop {
                    let mut c: Vec<(usize, u8)> = Vec::new();
                    for &n in pool.choose_multiple(&mut rng, self.overlap_candidates) {
                        c.push((n, rng.gen_bool(self.p_click_overlap) as u8));
                    }
                    for &n in other.choose_multiple(&mut rng, self.other_candidates) {
                        c.push((n, rng.gen_bool(self.p_click_other) as u8));
                    }
                    if c.iter().any(|x| x.1 == 1) && c.iter().any(|x| x.1 == 0) {
                        c.shuffle(&mut rng);
                        break c;
                    }
                };
                imp_id += 1;
                let hist: Vec<String> = history.iter().map(|n| format!("N{}", n + 1)).collect();
                let cs: Vec<String> = cands.iter().map(|(n, l)| format!("N{}-{l}", n + 1)).collect();
                writeln!(
                    behaviors_tsv,
                    "{imp_id}\t{uid}\t{}\t{}\t{}",
                    time_string(round * self.users + u),
                    hist.join(" "),
                    cs.join(" ")
                )
                .unwrap();
            }
        }

        Ok(SynthData {
            news_tsv,
            behaviors_tsv,
            truth_tsv,
            interests,
            news_entities,
        })
    }
}

impl SynthData {
    /// Writes the three files into `dir` and returns their paths.
    pub fn write(&self, dir: &Path) -> Result<[PathBuf; 3]> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths = [dir.join(NEWS_FILE), dir.join(BEHAVIORS_FILE), dir.join(TRUTH_FILE)];
        for (p, body) in paths.iter().zip([&self.news_tsv, &self.behaviors_tsv, &self.truth_tsv]) {
            fs::write(p, body).map_err(|e| Error::io(p, e))?;
        }
        Ok(paths)
    }

    /// Scores candidates by the number of entities shared with the user's
    /// latent interests. This is the generator's own rule.
    pub fn truth_score(&self, imp: &Impression) -> Result<Vec<f64>> {
        let ints = self
            .interests
            .get(&imp.user_id)
            .ok_or_else(|| Error::UnknownUser(imp.user_id.clone()))?;
        Ok(imp
            .candidates
            .iter()
            .map(|(id, _)| {
                self.news_entities
                    .get(id)
                    .map_or(0, |es| es.iter().filter(|e| ints.contains(e)).count()) as f64
            })
            .collect())
    }
}

/// Parses a ground-truth file back into `user -> interest ids`.
pub fn parse_truth(text: &str) -> BTreeMap<String, Vec<String>> {
    text.lines()
        .filter_map(|l| l.split_once('\t'))
        .map(|(u, ids)| (u.to_string(), ids.split_whitespace().map(str::to_string).collect()))
        .collect()
}
