mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use perconet::config::Variant;
use perconet::encoders::{EntitySource, Model};
use perconet::gradcheck::GradCheck;
use perconet::nn::{self, MultiHeadSelfAttention};
use perconet::objectives::{contrastive_loss, rec_loss_term};
use perconet::params::ParamSet;
use perconet::persona::{build_persona, PersonaConfig};
use perconet::tape::Tape;
use perconet::tensor::Tensor;
use perconet::text::{import_frozen_vectors, TextBackend, PAD};

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn matmul_sum_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = [random(3, 3, &mut rng), random(3, 3, &mut rng)];
    let report = GradCheck::new(1e-6)
        .run("sum(AB)", &ParamSet::new(), &inputs, |t, v| {
            let p = t.matmul(v[0], v[1])?;
            Ok(t.sum(p))
        })
        .unwrap();
    assert!(report.passed, "{report}");
}

#[test]
fn elementwise_gradients_match_away_from_kinks() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x: Vec<f64> = (0..12)
        .map(|_| {
            let m = rng.gen_range(0.1..2.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    let inputs = [Tensor::matrix(3, 4, x).unwrap()];
    let weights: Vec<f64> = (0..12).map(|i| 0.3 + 0.1 * i as f64).collect();
    let check = GradCheck::new(1e-6);
    for name in ["leaky_relu", "tanh", "sigmoid", "log_sigmoid"] {
        let report = check
            .run(name, &ParamSet::new(), &inputs, |t, v| {
                let y = match name {
                    "leaky_relu" => t.leaky_relu(v[0], nn::slope()),
                    "tanh" => t.tanh(v[0]),
                    "sigmoid" => t.sigmoid(v[0]),
                    _ => t.log_sigmoid(v[0]),
                };
                let y = t.mul_const(y, weights.clone())?;
                Ok(t.sum(y))
            })
            .unwrap();
        assert!(report.passed, "{report}");
    }
}

#[test]
fn self_attention_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut params = ParamSet::new();
    let mha = MultiHeadSelfAttention::register(&mut params, "mha", 8, 2, &mut rng).unwrap();
    let params = params.cast::<f64>();
    let inputs = [random(3, 8, &mut rng)];
    let report = GradCheck::new(1e-4)
        .run("mha", &params, &inputs, |t, v| {
            let y = mha.forward(t, v[0], &[true; 3])?;
            Ok(t.sum(y))
        })
        .unwrap();
    assert!(report.passed, "{report}");
}

/// Selection rule written out directly: score every candidate entity by
/// how many of the newest G items list it among their first K, break ties
/// by the newest item (then position) where it first occurs.
fn brute_force_persona(history: &[Vec<usize>], g: usize, k: usize, n_e: usize) -> Vec<usize> {
    let recent: Vec<Vec<usize>> = history
        .iter()
        .rev()
        .take(g)
        .map(|item| {
            let mut seen = Vec::new();
            for &e in item.iter().take(k) {
                if e != PAD && !seen.contains(&e) {
                    seen.push(e);
                }
            }
            seen
        })
        .collect();
    let mut candidates: Vec<(usize, usize, usize, usize)> = Vec::new();
    for e in 1..1000 {
        let freq = recent.iter().filter(|item| item.contains(&e)).count();
        if freq == 0 {
            continue;
        }
        let (item, pos) = recent
            .iter()
            .enumerate()
            .find_map(|(i, item)| item.iter().position(|&x| x == e).map(|p| (i, p)))
            .unwrap();
        candidates.push((freq, item, pos, e));
    }
    candidates.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    candidates.into_iter().take(n_e).map(|c| c.3).collect()
}

#[test]
fn persona_matches_brute_force_selector() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..50 {
        let history: Vec<Vec<usize>> = (0..30)
            .map(|_| (0..rng.gen_range(0..7)).map(|_| rng.gen_range(2..25)).collect())
            .collect();
        let ids: Vec<String> = (0..30).map(|i| format!("N{i}")).collect();
        let items: Vec<(&str, &[usize])> = ids.iter().map(|s| s.as_str()).zip(history.iter().map(|h| h.as_slice())).collect();
        let (g, k) = if trial == 0 { (20, 4) } else { (rng.gen_range(1..25), rng.gen_range(1..6)) };
        let n_e = rng.gen_range(1..30);
        let p = build_persona("u", &items, PersonaConfig::new(g, k, n_e).unwrap());
        let want = brute_force_persona(&history, g, k, n_e);
        assert_eq!(p.active_ids(), want, "G={g} K={k} n_e={n_e}");
        assert_eq!(p.entity_ids.len(), n_e);
        for (slot, e) in want.iter().enumerate() {
            let sources: Vec<String> = history
                .iter()
                .enumerate()
                .rev()
                .take(g)
                .filter(|(_, item)| item.iter().take(k).any(|x| x == e))
                .map(|(i, _)| format!("N{i}"))
                .collect();
            assert_eq!(p.provenance[slot], sources);
        }
    }
}

#[test]
fn imported_entity_vectors_reproduce_file_rows() {
    let store = common::fixture_store();
    let cfg = common::synth_config(Variant::Full, 1);
    let d = cfg.dims.d_e;
    let ev = &store.entity_vocab;
    let row = |i: usize| -> Vec<f32> { (0..d).map(|j| (i * 31 + j) as f32 / 64.0).collect() };
    let body: String = (2..ev.len())
        .map(|i| {
            let v: Vec<String> = row(i).iter().map(|x| x.to_string()).collect();
            format!("{} {}\n", ev.token(i).unwrap(), v.join(" "))
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("entities.txt");
    std::fs::write(&path, format!("{} {d}\n{body}", ev.len() - 2)).unwrap();

    let mut model = Model::new(&cfg, store.vocab.len(), ev.len(), 1).unwrap();
    model.arch.set_entity_backend(import_frozen_vectors(&path, ev, d).unwrap()).unwrap();
    let EntitySource::Table(TextBackend::Frozen(table)) = &model.arch.entities else {
        panic!("entity table was not replaced")
    };
    for i in 2..ev.len() {
        assert_eq!(table.row(i), &row(i)[..], "{}", ev.token(i).unwrap());
    }
    assert!(table.row(PAD).iter().all(|x| *x == 0.0));
}

#[test]
fn recommendation_loss_matches_direct_formula() {
    // hand-set click probabilities for three samples with H = 2
    let probs = [(0.9, [0.2, 0.4]), (0.3, [0.6, 0.1]), (0.55, [0.5, 0.45])];
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let params = ParamSet::<f64>::new();
    let mut t = Tape::new(&params);
    let mut total = 0.0;
    let mut want = 0.0;
    for (pos, negs) in probs {
        let p = t.input(1, 1, vec![logit(pos)]).unwrap();
        let n: Vec<_> = negs.iter().map(|&q| t.input(1, 1, vec![logit(q)]).unwrap()).collect();
        let l = rec_loss_term(&mut t, p, &n).unwrap();
        total += t.scalar(l);
        want += -(pos / (pos + negs[0] + negs[1])).ln();
    }
    assert!((total / 3.0 - want / 3.0).abs() < 1e-10, "{} vs {}", total / 3.0, want / 3.0);
}

#[test]
fn contrastive_loss_matches_direct_formula() {
    let anchors = [[0.3, -0.2, 0.5], [0.1, 0.4, -0.3], [-0.5, 0.2, 0.2], [0.05, 0.05, 0.6]];
    let positives = [[0.2, -0.1, 0.4], [0.0, 0.5, -0.1], [-0.3, 0.3, 0.1], [0.2, -0.2, 0.5]];
    let tau = 0.05;
    let mut want = 0.0;
    for i in 0..4 {
        let s: Vec<f64> = positives
            .iter()
            .map(|p| anchors[i].iter().zip(p).map(|(a, b)| a * b).sum::<f64>() / tau)
            .collect();
        let denom: f64 = s.iter().map(|x| x.exp()).sum();
        want += -(s[i].exp() / denom).ln();
    }
    want /= 4.0;

    let params = ParamSet::<f64>::new();
    let mut t = Tape::new(&params);
    let a = t.input(4, 3, anchors.concat()).unwrap();
    let p = t.input(4, 3, positives.concat()).unwrap();
    let l = contrastive_loss(&mut t, a, p, tau).unwrap();
    assert!((t.scalar(l) - want).abs() < 1e-10, "{} vs {want}", t.scalar(l));
}
