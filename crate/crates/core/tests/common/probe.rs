//! Small f64 models and forward helpers shared by the encoder tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use perconet::config::{TrainConfig, Variant};
use perconet::encoders::{encode_news, encode_user, Forward, Model};
use perconet::params::ParamSet;
use perconet::persona::Persona;
use perconet::tape::Tape;
use perconet::text::TokenSequence;

pub const VOCAB: usize = 30;
pub const ENTITIES: usize = 12;
pub const HEADS: usize = 2;

pub fn config(variant: Variant) -> TrainConfig {
    TrainConfig {
        dims: super::dims(6, 5, HEADS),
        n_w: 7,
        dropout: 0.0,
        ..TrainConfig::default()
    }
    .with_variant(variant)
}

/// Model parameters in f64, perturbed so that no layer sits near its
/// initialisation symmetry.
pub fn model64(variant: Variant, seed: u64) -> (Model, ParamSet<f64>) {
    let model = Model::new(&config(variant), VOCAB, ENTITIES, seed).unwrap();
    let mut p = model.params.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let ids: Vec<_> = p.ids().collect();
    for id in ids {
        for x in p.get_mut(id).data_mut() {
            *x += rng.gen_range(-0.3..0.3);
        }
    }
    (model, p)
}

pub fn persona(ids: &[usize]) -> Persona {
    Persona {
        user_id: "u".into(),
        entity_ids: ids.to_vec(),
        mask: vec![true; ids.len()],
        provenance: vec![vec![]; ids.len()],
    }
}

pub fn seq(ids: &[usize]) -> TokenSequence {
    TokenSequence::from_ids(ids, 7)
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn rows_sum_to_one(v: &[f64], cols: usize) -> bool {
    v.chunks(cols).all(|r| (r.iter().sum::<f64>() - 1.0).abs() <= 1e-9)
}

pub struct UserOut {
    pub u: Vec<f64>,
    pub entity: Vec<f64>,
    pub news: Vec<f64>,
    pub news_vecs: Vec<Vec<f64>>,
}

pub fn run_user(model: &Model, p: &ParamSet<f64>, history: &[Vec<usize>], ents: &[usize]) -> UserOut {
    let arch = &model.arch;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut fwd = Forward { training: false, rng: &mut rng };
    let mut t = Tape::new(p);
    let pm = arch.persona_matrix(&mut t, &persona(ents)).unwrap();
    let texts: Vec<TokenSequence> = history.iter().map(|h| seq(h)).collect();
    let mut news_vecs = Vec::new();
    for text in &texts {
        let r = encode_news(arch, &mut t, text, pm, &mut fwd).unwrap().r;
        news_vecs.push(t.value(r).to_vec());
    }
    let rep = encode_user(arch, &mut t, &texts, pm, &mut fwd).unwrap();
    UserOut {
        u: t.value(rep.u).to_vec(),
        entity: t.value(rep.entity_attention).to_vec(),
        news: t.value(rep.news_attention).to_vec(),
        news_vecs,
    }
}
