mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use perconet::checkpoint;
use perconet::config::{TrainConfig, Variant};
use perconet::data::{make_training_samples, split_by_time};
use perconet::encoders::Model;
use perconet::eval::evaluate;
use perconet::recommender::Recommender;
use perconet::synth::{parse_truth, SynthConfig};
use perconet::text::{import_frozen_vectors, TextBackend};
use perconet::trainer::{train_with_dev, Trainer, NDCG_KS};

use common::{synth, synth_config, Synth};

fn small_synth() -> Synth {
    synth(
        &SynthConfig {
            users: 16,
            impressions_per_user: 4,
            ..SynthConfig::default()
        },
        8,
        8,
    )
}

fn recommender<'a>(model: &'a Model, cfg: &TrainConfig, s: &'a Synth) -> Recommender<'a> {
    Recommender::new(model, &s.store, cfg.persona().unwrap(), cfg.title_entities_only)
}

#[test]
fn zero_lambda_matches_the_no_cl_variant() {
    let s = small_synth();
    let (train, dev) = split_by_time(&s.impressions, 0.1);
    let full = TrainConfig {
        lambda: 0.0,
        epochs: 2,
        ..synth_config(Variant::Full, 4)
    };
    let no_cl = TrainConfig {
        epochs: 2,
        ..synth_config(Variant::NoCl, 4)
    };
    let a = train_with_dev(&full, &s.store, &train, &dev).unwrap();
    let b = train_with_dev(&no_cl, &s.store, &train, &dev).unwrap();
    for (ra, rb) in a.log.iter().zip(&b.log) {
        assert_eq!(ra.rec_loss, rb.rec_loss);
        assert_eq!(ra.dev_auc, rb.dev_auc);
    }
    for (name, t) in b.model.params.iter() {
        assert_eq!(a.model.param_tensor(name).unwrap().data(), t.data(), "{name}");
    }
    assert!(a.model.param_tensor("cl.proj_inner.weight").is_some());
}

#[test]
fn same_seed_runs_are_bit_identical() {
    let s = small_synth();
    let (train, dev) = split_by_time(&s.impressions, 0.1);
    let cfg = TrainConfig {
        epochs: 2,
        ..synth_config(Variant::Full, 5)
    };
    let a = train_with_dev(&cfg, &s.store, &train, &dev).unwrap();
    let b = train_with_dev(&cfg, &s.store, &train, &dev).unwrap();
    let lines = |log: &[perconet::trainer::EpochRecord]| log.iter().map(|r| r.to_json_line()).collect::<Vec<_>>();
    assert_eq!(lines(&a.log), lines(&b.log));
    assert_eq!(checkpoint::encode(&a.model.params), checkpoint::encode(&b.model.params));

    let seq = TrainConfig {
        parallel: false,
        ..cfg.clone()
    };
    let c = train_with_dev(&seq, &s.store, &train, &dev).unwrap();
    assert_eq!(lines(&a.log), lines(&c.log));
}

#[test]
fn checkpoint_round_trip_preserves_metrics() {
    let s = small_synth();
    let (train, dev) = split_by_time(&s.impressions, 0.2);
    let cfg = synth_config(Variant::Full, 6);
    let out = train_with_dev(&cfg, &s.store, &train, &dev).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&out.model.params, &path).unwrap();

    let mut fresh = Model::new(&cfg, s.store.vocab.len(), s.store.entity_vocab.len(), 999).unwrap();
    checkpoint::load_into(&mut fresh.params, &path).unwrap();
    let before = evaluate(&recommender(&out.model, &cfg, &s), &dev, &NDCG_KS, true).unwrap();
    let after = evaluate(&recommender(&fresh, &cfg, &s), &dev, &NDCG_KS, true).unwrap();
    assert_eq!(before, after);
    assert_eq!(before.auc().to_bits(), after.auc().to_bits());
}

#[test]
fn step_footprint_grows_linearly_with_batch() {
    let s = small_synth();
    let cfg = synth_config(Variant::Full, 7);
    let samples = make_training_samples(&s.impressions, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let scalars = |n: usize| {
        let mut t = Trainer::new(cfg.clone(), &s.store).unwrap();
        t.step(&s.impressions, &samples[..n]).unwrap().scalars
    };
    let (s8, s16, s32) = (scalars(8), scalars(16), scalars(32));
    let r1 = s16 as f64 / s8 as f64;
    let r2 = s32 as f64 / s16 as f64;
    assert!((1.6..=2.4).contains(&r1) && (1.6..=2.4).contains(&r2), "{s8} {s16} {s32}");
}

#[test]
fn small_corpus_can_be_overfit() {
    let s = synth(
        &SynthConfig {
            users: 20,
            impressions_per_user: 10,
            ..SynthConfig::default()
        },
        8,
        8,
    );
    let cfg = TrainConfig {
        dims: common::dims(32, 64, 4),
        batch_size: 8,
        dropout: 0.0,
        cl_dropout: 0.0,
        ..synth_config(Variant::Full, 3)
    };
    // loss of the untrained model over every batch of the first epoch
    let samples = make_training_samples(&s.impressions, cfg.neg_ratio, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let fresh = Trainer::new(cfg.clone(), &s.store).unwrap();
    let mut initial = 0.0;
    let batches: Vec<_> = samples.chunks(cfg.batch_size).collect();
    for b in &batches {
        let mut t = Trainer::with_model(cfg.clone(), &s.store, fresh.model.clone());
        initial += t.step(&s.impressions, b).unwrap().joint_loss;
    }
    initial /= batches.len() as f64;

    let mut t = Trainer::new(cfg.clone(), &s.store).unwrap();
    let mut last = f64::INFINITY;
    for _ in 0..50 {
        last = t.run_epoch(&s.impressions, &[]).unwrap().joint_loss;
        if last < 0.2 * initial {
            break;
        }
    }
    assert!(last < 0.2 * initial, "joint loss {last} vs initial {initial}");
}

#[test]
fn ablations_drop_parameters() {
    let cfg = synth_config(Variant::Full, 1);
    let full = Model::new(&cfg, 50, 20, 1).unwrap();
    let none = Model::new(&synth_config(Variant::NoBoth, 1), 50, 20, 1).unwrap();
    let no_cl = Model::new(&synth_config(Variant::NoCl, 1), 50, 20, 1).unwrap();
    assert!(none.num_parameters() < no_cl.num_parameters());
    assert!(no_cl.num_parameters() < full.num_parameters());
    assert!(none.param_tensor("entity.pseudo").is_some());
    assert!(none.param_tensor("entity.embedding").is_none());
}

#[test]
fn frozen_vectors_stay_fixed_during_training() {
    let s = small_synth();
    let cfg = synth_config(Variant::Full, 8);
    let d = cfg.dims.d_w;
    let vocab = &s.store.vocab;
    let body: String = (2..vocab.len())
        .map(|i| {
            let v: Vec<String> = (0..d).map(|j| format!("{}", ((i + j) % 7) as f32 * 0.1)).collect();
            format!("{} {}\n", vocab.token(i).unwrap(), v.join(" "))
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vectors.txt");
    std::fs::write(&path, format!("{} {d}\n{body}", vocab.len() - 2)).unwrap();

    let mut model = Model::new(&cfg, s.store.vocab.len(), s.store.entity_vocab.len(), cfg.seed).unwrap();
    let backend = import_frozen_vectors(&path, &s.store.vocab, d).unwrap();
    model.arch.set_text_backend(backend.clone()).unwrap();
    let mut t = Trainer::with_model(cfg.clone(), &s.store, model);
    t.run_epoch(&s.impressions, &[]).unwrap();
    match (&t.model.arch.text, &backend) {
        (TextBackend::Frozen(after), TextBackend::Frozen(before)) => assert_eq!(after, before),
        _ => panic!("text backend is no longer frozen"),
    }
    let TextBackend::Frozen(table) = &backend else { unreachable!() };
    for i in [2, vocab.len() - 1] {
        let want: Vec<f32> = (0..d).map(|j| ((i + j) % 7) as f32 * 0.1).collect();
        assert_eq!(table.row(i), &want[..]);
    }
}

#[test]
fn explanation_weights_are_distributions() {
    let s = small_synth();
    let cfg = synth_config(Variant::Full, 9);
    let out = train_with_dev(&cfg, &s.store, &s.impressions, &[]).unwrap();
    let rec = recommender(&out.model, &cfg, &s);
    let imp = s.impressions.iter().find(|i| !i.history.is_empty()).unwrap();
    let ids: Vec<&str> = imp.candidates.iter().map(|(id, _)| id.as_str()).collect();
    let ex = rec.explain(&imp.user_id, &imp.history, &ids, 3, 4).unwrap();
    assert_eq!(ex.candidates.len(), 3);
    for c in &ex.candidates {
        let total: f64 = c.entities.iter().map(|e| e.weight).sum();
        assert!((total - 1.0).abs() <= 1e-6, "{total}");
        assert!(c.entities.windows(2).all(|w| w[0].weight >= w[1].weight));
    }

    let single = TrainConfig {
        top_k: 1,
        top_g: 1,
        n_e: None,
        ..cfg.clone()
    };
    let model = Model::new(&single, s.store.vocab.len(), s.store.entity_vocab.len(), 1).unwrap();
    let rec = recommender(&model, &single, &s);
    let ex = rec.explain(&imp.user_id, &imp.history, &ids, 2, 2).unwrap();
    for c in &ex.candidates {
        assert_eq!(c.entities.len(), 1);
        assert!((c.entities[0].weight - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn generator_truth_is_learnable_and_round_trips() {
    let s = synth(&SynthConfig::default(), 8, 8);
    let truth = |imp: &perconet::data::Impression| s.data.truth_score(imp);
    let report = evaluate(&truth, &s.impressions, &NDCG_KS, true).unwrap();
    assert!(report.auc() > 0.95, "truth auc {}", report.auc());
    assert_eq!(parse_truth(&s.data.truth_tsv), s.data.interests);

    let dir = tempfile::tempdir().unwrap();
    let [news, behaviors, _] = s.data.write(dir.path()).unwrap();
    assert_eq!(std::fs::read_to_string(news).unwrap(), s.data.news_tsv);
    assert_eq!(std::fs::read_to_string(behaviors).unwrap(), s.data.behaviors_tsv);
    let lines: Vec<String> = s.impressions.iter().map(|i| i.to_line()).collect();
    assert_eq!(lines, s.data.behaviors_tsv.lines().collect::<Vec<_>>());
}

#[test]
#[ignore = "entity pooling weights stay near uniform across persona entities; see the decisions ledger"]
fn explanation_ranks_the_clicked_entity_first() {
    let s = synth(
        &SynthConfig {
            users: 12,
            interests_per_user: 1,
            impressions_per_user: 10,
            seed: 3,
            ..SynthConfig::default()
        },
        8,
        8,
    );
    let cfg = TrainConfig {
        batch_size: 8,
        dropout: 0.0,
        cl_dropout: 0.0,
        epochs: 30,
        ..synth_config(Variant::Full, 1)
    };
    let out = train_with_dev(&cfg, &s.store, &s.impressions, &[]).unwrap();
    let rec = recommender(&out.model, &cfg, &s);
    let (mut hits, mut total) = (0, 0);
    for imp in s.impressions.iter().filter(|i| !i.history.is_empty()) {
        let x = &s.data.interests[&imp.user_id][0];
        let label = s.store.entity_label(s.store.entity_vocab.get(x));
        let ids: Vec<&str> = imp
            .candidates
            .iter()
            .map(|(id, _)| id.as_str())
            .filter(|id| s.data.news_entities[*id].contains(x))
            .collect();
        if ids.is_empty() {
            continue;
        }
        let ex = rec.explain(&imp.user_id, &imp.history, &ids, ids.len(), 1).unwrap();
        for c in &ex.candidates {
            total += 1;
            hits += (c.entities[0].entity == label) as usize;
        }
    }
    assert!(hits as f64 >= 0.9 * total as f64, "{hits}/{total}");
}
