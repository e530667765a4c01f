mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use perconet::checks::{small_config, variant_loss};
use perconet::config::{TrainConfig, Variant};
use perconet::encoders::{encode_news, Forward, Model};
use perconet::objectives::click_logit;
use perconet::tape::Tape;

use common::oracle::{Oracle, M};
use common::probe::{max_diff, model64, persona, rows_sum_to_one, run_user, seq, ENTITIES, HEADS, VOCAB};

#[test]
fn news_encoder_matches_oracle() {
    let (model, p) = model64(Variant::Full, 1);
    let oracle = Oracle { p: &p };
    let cases: [(&[usize], &[usize]); 3] = [(&[3, 4, 5, 6], &[2, 5, 7]), (&[9], &[4]), (&[2, 8, 8, 11, 20, 1, 29], &[1, 3])];
    for (tokens, ents) in cases {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut fwd = Forward { training: false, rng: &mut rng };
        let mut t = Tape::new(&p);
        let pm = model.arch.persona_matrix(&mut t, &persona(ents)).unwrap();
        let rep = encode_news(&model.arch, &mut t, &seq(tokens), pm, &mut fwd).unwrap();
        let want = oracle.news(tokens, &oracle.persona(ents), HEADS);
        assert!(max_diff(t.value(rep.r), &want.out) < 1e-6, "news vector for {tokens:?}");
        assert!(max_diff(t.value(rep.entity_attention), &want.entity_attention) < 1e-6);
        assert!(max_diff(t.value(rep.term_attention), &want.inner_attention.v) < 1e-6);
    }
}

#[test]
fn user_encoder_and_click_head_match_oracle() {
    let (model, p) = model64(Variant::Full, 2);
    let oracle = Oracle { p: &p };
    let history = vec![vec![3, 4, 5], vec![7, 8], vec![10, 11, 12, 13], vec![2]];
    let ents = [6, 2, 9];
    let out = run_user(&model, &p, &history, &ents);
    let pm = oracle.persona(&ents);
    for (h, got) in history.iter().zip(&out.news_vecs) {
        assert!(max_diff(got, &oracle.news(h, &pm, HEADS).out) < 1e-6);
    }
    let want = oracle.user(&out.news_vecs, &pm, HEADS);
    assert!(max_diff(&out.u, &want.out) < 1e-6);
    assert!(max_diff(&out.entity, &want.entity_attention) < 1e-6);
    assert!(max_diff(&out.news, &want.inner_attention.v) < 1e-6);

    let mut t = Tape::new(&p);
    let u = t.input(1, 6, out.u.clone()).unwrap();
    let r = t.input(1, 6, out.news_vecs[1].clone()).unwrap();
    let logit = click_logit(&model.arch, &mut t, u, r).unwrap();
    assert!((t.scalar(logit) - oracle.click_logit(&out.u, &out.news_vecs[1])).abs() < 1e-7);
}

#[test]
fn no_persona_variant_ignores_the_persona() {
    let (model, p) = model64(Variant::NoPersona, 3);
    let oracle = Oracle { p: &p };
    let history = vec![vec![3, 4], vec![9, 10, 11]];
    let a = run_user(&model, &p, &history, &[1, 2, 3]);
    let b = run_user(&model, &p, &history, &[7]);
    assert_eq!(a.u, b.u);
    assert_eq!(a.entity, vec![1.0]);

    let pseudo: M = oracle.w("entity.pseudo");
    let want = oracle.user(&a.news_vecs, &pseudo, HEADS);
    assert!(max_diff(&a.u, &want.out) < 1e-6);
    assert!(max_diff(&a.news_vecs[1], &oracle.news(&history[1], &pseudo, HEADS).out) < 1e-6);
}

#[test]
fn single_entity_persona_gets_all_the_weight() {
    let (model, p) = model64(Variant::Full, 4);
    let out = run_user(&model, &p, &[vec![3, 4, 5], vec![6]], &[5]);
    assert!((out.entity[0] - 1.0).abs() <= 1e-12);
}

#[test]
fn user_vector_is_invariant_to_history_and_persona_order() {
    let (model, p) = model64(Variant::Full, 5);
    let history = vec![vec![3, 4, 5], vec![7, 8], vec![10, 11, 12, 13], vec![2], vec![14, 15]];
    let ents = [6, 2, 9, 11];
    let base = run_user(&model, &p, &history, &ents);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let mut h = history.clone();
        let mut e = ents.to_vec();
        rand::seq::SliceRandom::shuffle(h.as_mut_slice(), &mut rng);
        rand::seq::SliceRandom::shuffle(e.as_mut_slice(), &mut rng);
        let out = run_user(&model, &p, &h, &ents);
        assert!(max_diff(&out.u, &base.u) < 1e-6, "history order");
        let out = run_user(&model, &p, &history, &e);
        assert!(max_diff(&out.u, &base.u) < 1e-6, "persona order");
    }
}

fn linear_combination_holds(variant: Variant) {
    let model = Model::new(&small_config(variant), 12, 8, 3).unwrap();
    let p = model.params.cast::<f64>();
    let grads = |lambda: f64| {
        let cfg = TrainConfig {
            lambda,
            ..small_config(variant)
        };
        let mut t = Tape::new(&p);
        let loss = variant_loss(&model, &cfg, &mut t).unwrap();
        let value = t.scalar(loss);
        let g = t.backward(loss).unwrap();
        let flat: Vec<f64> = p.ids().flat_map(|id| g.dense(id, p.get(id).len())).collect();
        (value, flat)
    };
    let (l0, g0) = grads(0.0);
    let (l1, g1) = grads(1.0);
    let (l3, g3) = grads(3.0);
    // joint = rec + λ·cl, so both value and gradient are affine in λ
    assert!((l3 - l0 - 3.0 * (l1 - l0)).abs() < 1e-9);
    for i in 0..g0.len() {
        assert!((g3[i] - g0[i] - 3.0 * (g1[i] - g0[i])).abs() < 1e-9, "coordinate {i}");
    }
}

#[test]
fn joint_loss_is_affine_in_lambda() {
    linear_combination_holds(Variant::Full);
    linear_combination_holds(Variant::NoPersona);
}

#[test]
fn evaluation_is_bit_identical_across_runs() {
    let s = common::synth(&perconet::synth::SynthConfig::default(), 8, 8);
    let cfg = common::synth_config(Variant::Full, 11);
    let trainer = perconet::trainer::Trainer::new(cfg, &s.store).unwrap();
    let a = trainer.evaluate(&s.impressions[..60]).unwrap();
    let b = trainer.evaluate(&s.impressions[..60]).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.auc().to_bits(), b.auc().to_bits());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn attention_maps_are_distributions(
        seed in 0u64..4,
        history in prop::collection::vec(prop::collection::vec(1usize..VOCAB, 1..=7), 1..6),
        ents in prop::collection::vec(1usize..ENTITIES, 1..6),
    ) {
        let (model, p) = model64(Variant::Full, seed);
        let out = run_user(&model, &p, &history, &ents);
        prop_assert!(rows_sum_to_one(&out.entity, ents.len()));
        prop_assert!(rows_sum_to_one(&out.news, history.len()));

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut fwd = Forward { training: false, rng: &mut rng };
        let mut t = Tape::new(&p);
        let pm = model.arch.persona_matrix(&mut t, &persona(&ents)).unwrap();
        let rep = encode_news(&model.arch, &mut t, &seq(&history[0]), pm, &mut fwd).unwrap();
        prop_assert!(rows_sum_to_one(t.value(rep.entity_attention), ents.len()));
        prop_assert!(rows_sum_to_one(t.value(rep.term_attention), history[0].len()));
    }
}
