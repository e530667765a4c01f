#![allow(dead_code)]

pub mod oracle;
pub mod probe;

use std::path::PathBuf;

use perconet::eval::ScoredImpression;
use perconet::config::{ModelDims, TrainConfig, Variant};
use perconet::data::{parse_behaviors_str, Impression, NewsStore};
use perconet::synth::{SynthConfig, SynthData};
use perconet::text::Vocabulary;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn fixture_store() -> NewsStore {
    let mut store = NewsStore::new(Vocabulary::new(), Vocabulary::new(), 20);
    store.load(&fixture("news10.tsv")).unwrap();
    store
}

pub struct Synth {
    pub data: SynthData,
    pub store: NewsStore,
    pub impressions: Vec<Impression>,
}

/// Generated data parsed with titles of `n_w` tokens and histories of `n_u`.
pub fn synth(cfg: &SynthConfig, n_w: usize, n_u: usize) -> Synth {
    let data = cfg.generate().unwrap();
    let mut store = NewsStore::new(Vocabulary::new(), Vocabulary::new(), n_w);
    store.load_str(&data.news_tsv, "synthetic news").unwrap();
    let impressions = parse_behaviors_str(&data.behaviors_tsv, "synthetic behaviors", &store, n_u).unwrap();
    Synth {
        data,
        store,
        impressions,
    }
}

pub fn dims(w: usize, attn: usize, heads: usize) -> ModelDims {
    ModelDims {
        d_w: w,
        d_e: w,
        d_r: w,
        d_attn: attn,
        d_p: w,
        heads,
    }
}

/// Small configuration for the synthetic corpus.
pub fn synth_config(variant: Variant, seed: u64) -> TrainConfig {
    TrainConfig {
        dims: dims(16, 32, 2),
        n_w: 8,
        n_u: 8,
        n_e: Some(4),
        batch_size: 16,
        lr: 3e-3,
        epochs: 1,
        seed,
        ..TrainConfig::default()
    }
    .with_variant(variant)
}

/// Impressions of 2 to 20 candidates with coarse scores so ties are common.
pub fn random_impressions(n: usize, seed: u64) -> Vec<ScoredImpression> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = rng.gen_range(2..=20);
            let scores = (0..len).map(|_| rng.gen_range(0..8) as f64 / 7.0).collect();
            let labels = (0..len).map(|_| rng.gen_bool(0.3) as u8).collect();
            ScoredImpression::new(i.to_string(), scores, labels)
        })
        .collect()
}
