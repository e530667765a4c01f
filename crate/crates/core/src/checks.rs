//! The finite-difference suite: every tape primitive, the layers, both
//! encoders, the click head, both losses, and every model variant, at small
//! shapes in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelDims, TrainConfig, Variant};
use crate::encoders::{encode_news, encode_user, Forward, Model};
use crate::error::Result;
use crate::gradcheck::{CheckReport, GradCheck};
use crate::nn::{self, AdditivePool, Dense, MultiHeadSelfAttention};
use crate::objectives::{
    click_logit, click_probability, contrastive_loss, cross_view_views, joint_loss_var, project,
    rec_loss_term,
};
use crate::params::ParamSet;
use crate::persona::{build_persona, Persona};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::text::TokenSequence;

pub const DEFAULT_TOL: f64 = 1e-4;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).expect("valid dims")
}

/// Reduces `v` to a scalar through fixed pseudo-random weights so that every
/// output coordinate gets a distinct upstream gradient.
fn probe(t: &mut Tape<'_, f64>, v: Var) -> Result<Var> {
    let (r, c) = t.dims(v);
    let w = (0..r * c).map(|i| ((i as f64 + 1.0) * 0.618).sin()).collect();
    let y = t.mul_const(v, w)?;
    Ok(t.sum(y))
}

/// Perturbs every parameter so zero-initialised biases do not sit at a
/// special point.
fn jitter(mut p: ParamSet<f64>, rng: &mut ChaCha8Rng) -> ParamSet<f64> {
    let ids: Vec<_> = p.ids().collect();
    for id in ids {
        for x in p.get_mut(id).data_mut() {
            *x += rng.gen_range(-0.2..0.2);
        }
    }
    p
}

/// Small model dimensions shared by the model-level checks.
pub fn small_config(variant: Variant) -> TrainConfig {
    TrainConfig {
        dims: ModelDims {
            d_w: 4,
            d_e: 3,
            d_r: 4,
            d_attn: 3,
            d_p: 3,
            heads: 2,
        },
        n_w: 4,
        top_k: 2,
        top_g: 3,
        dropout: 0.0,
        cl_dropout: 0.3,
        ..TrainConfig::default()
    }
    .with_variant(variant)
}

struct Fixture {
    histories: Vec<Vec<TokenSequence>>,
    abstracts: Vec<Vec<TokenSequence>>,
    candidates: Vec<TokenSequence>,
    personas: Vec<Persona>,
}

fn fixture(cfg: &TrainConfig) -> Fixture {
    let seq = |ids: &[usize]| TokenSequence::from_ids(ids, cfg.n_w);
    let histories = vec![
        vec![seq(&[2, 3, 4]), seq(&[5, 6])],
        vec![seq(&[7, 2]), seq(&[8, 9, 10]), seq(&[3])],
        vec![seq(&[11, 4, 6])],
    ];
    let abstracts = vec![
        vec![seq(&[4, 5, 9]), seq(&[])],
        vec![seq(&[2, 2]), seq(&[6, 7]), seq(&[10, 11])],
        vec![seq(&[3, 8])],
    ];
    let candidates = vec![seq(&[7, 3]), seq(&[8, 9, 10]), seq(&[11])];
    let pc = cfg.persona().expect("valid persona config");
    let ents: [&[usize]; 4] = [&[2, 3], &[4], &[5, 2, 6], &[7]];
    let personas = vec![
        build_persona("a", &[("x", ents[0]), ("y", ents[1])], pc),
        build_persona("b", &[("x", ents[2]), ("y", ents[0]), ("z", ents[3])], pc),
        build_persona("c", &[("x", ents[3])], pc),
    ];
    Fixture {
        histories,
        abstracts,
        candidates,
        personas,
    }
}

fn primitive_checks(check: &GradCheck, out: &mut Vec<CheckReport>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let empty = ParamSet::<f64>::new();
    let a23 = random(2, 3, &mut rng);
    let b23 = random(2, 3, &mut rng);
    let b34 = random(3, 4, &mut rng);
    let row3 = random(1, 3, &mut rng);
    let sq3 = random(3, 3, &mut rng);
    let c22 = random(2, 2, &mut rng);
    let konst: Vec<f64> = (0..6).map(|i| 0.5 + i as f64 * 0.25).collect();

    type Case<'a> = (&'a str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var> + 'a>);
    let cases: Vec<Case<'_>> = vec![
        ("matmul", vec![a23.clone(), b34.clone()], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("matmul_t", vec![a23.clone(), b23.clone()], Box::new(|t, v| t.matmul_t(v[0], v[1]))),
        ("transpose", vec![a23.clone()], Box::new(|t, v| Ok(t.transpose(v[0])))),
        ("add", vec![a23.clone(), b23.clone()], Box::new(|t, v| t.add(v[0], v[1]))),
        ("add_row", vec![a23.clone(), row3.clone()], Box::new(|t, v| t.add_row(v[0], v[1]))),
        ("mul", vec![a23.clone(), b23.clone()], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("mul_const", vec![a23.clone()], Box::new(|t, v| t.mul_const(v[0], konst.clone()))),
        ("scale", vec![a23.clone()], Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
        ("leaky_relu", vec![a23.clone()], Box::new(|t, v| Ok(t.leaky_relu(v[0], nn::slope())))),
        ("tanh", vec![a23.clone()], Box::new(|t, v| Ok(t.tanh(v[0])))),
        ("sigmoid", vec![a23.clone()], Box::new(|t, v| Ok(t.sigmoid(v[0])))),
        ("log_sigmoid", vec![a23.clone()], Box::new(|t, v| Ok(t.log_sigmoid(v[0])))),
        ("softmax", vec![sq3.clone()], Box::new(|t, v| t.softmax(v[0]))),
        (
            "softmax_masked",
            vec![sq3.clone()],
            Box::new(|t, v| t.softmax_masked(v[0], &[true, false, true])),
        ),
        ("concat_cols", vec![a23.clone(), c22.clone()], Box::new(|t, v| t.concat_cols(&[v[0], v[1]]))),
        ("slice_cols", vec![a23.clone()], Box::new(|t, v| t.slice_cols(v[0], 1, 3))),
        ("slice_rows", vec![sq3.clone()], Box::new(|t, v| t.slice_rows(v[0], 1, 3))),
        ("stack_rows", vec![row3.clone(), a23.clone()], Box::new(|t, v| t.stack_rows(&[v[0], v[1]]))),
        ("pair_sum", vec![a23.clone(), sq3.clone()], Box::new(|t, v| t.pair_sum(v[0], v[1]))),
        ("reshape", vec![a23.clone()], Box::new(|t, v| t.reshape(v[0], 3, 2))),
        ("sum", vec![a23.clone()], Box::new(|t, v| Ok(t.sum(v[0])))),
        ("mean", vec![a23.clone()], Box::new(|t, v| Ok(t.mean(v[0])))),
        ("log_sum_exp", vec![a23.clone()], Box::new(|t, v| Ok(t.log_sum_exp(v[0])))),
    ];
    for (name, inputs, f) in cases {
        out.push(check.run(&format!("primitive/{name}"), &empty, &inputs, |t, v| {
            let y = f(t, v)?;
            probe(t, y)
        })?);
    }

    let mut p = ParamSet::<f32>::new();
    let table = p.insert_uniform("table", 6, 3, 0.5, &mut rng)?;
    let dense = Dense::register(&mut p, "dense", 3, 4, &mut rng)?;
    let pool = AdditivePool::register(&mut p, "pool", 3, 2, &mut rng)?;
    let mha = MultiHeadSelfAttention::register(&mut p, "mha", 4, 2, &mut rng)?;
    let p64 = jitter(p.cast::<f64>(), &mut rng);
    let x34 = random(3, 4, &mut rng);
    out.push(check.run("primitive/embedding", &p64, &[], |t, _| {
        let e = t.embedding(table, &[1, 4, 1, 0])?;
        probe(t, e)
    })?);
    out.push(check.run("layer/dense", &p64, std::slice::from_ref(&a23), |t, v| {
        let y = dense.forward(t, v[0])?;
        probe(t, y)
    })?);
    out.push(check.run("layer/additive_pool", &p64, std::slice::from_ref(&sq3), |t, v| {
        let (y, _) = pool.forward(t, v[0], &[true, true, false])?;
        probe(t, y)
    })?);
    out.push(check.run("layer/multi_head_attention", &p64, std::slice::from_ref(&x34), |t, v| {
        let y = mha.forward(t, v[0], &[true, false, true])?;
        probe(t, y)
    })?);
    out.push(check.run("layer/dropout", &p64, std::slice::from_ref(&a23), |t, v| {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let y = nn::dropout(t, v[0], 0.4, true, &mut r)?;
        probe(t, y)
    })?);
    Ok(())
}

fn model_checks(check: &GradCheck, out: &mut Vec<CheckReport>) -> Result<()> {
    let cfg = small_config(Variant::Full);
    let model = Model::new(&cfg, 12, 8, 3)?;
    let p64 = jitter(model.params.cast::<f64>(), &mut ChaCha8Rng::seed_from_u64(4));
    let arch = &model.arch;
    let fx = fixture(&cfg);
    let fwd_rng = || ChaCha8Rng::seed_from_u64(0);

    out.push(check.run("encoder/news", &p64, &[], |t, _| {
        let mut r = fwd_rng();
        let mut fwd = Forward { training: false, rng: &mut r };
        let pm = arch.persona_matrix(t, &fx.personas[1])?;
        let rep = encode_news(arch, t, &fx.candidates[1], pm, &mut fwd)?;
        probe(t, rep.r)
    })?);
    out.push(check.run("encoder/user", &p64, &[], |t, _| {
        let mut r = fwd_rng();
        let mut fwd = Forward { training: false, rng: &mut r };
        let pm = arch.persona_matrix(t, &fx.personas[1])?;
        let rep = encode_user(arch, t, &fx.histories[1], pm, &mut fwd)?;
        probe(t, rep.u)
    })?);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let u = random(1, cfg.dims.d_r, &mut rng);
    let rv = random(1, cfg.dims.d_r, &mut rng);
    out.push(check.run("head/click_probability", &p64, &[u.clone(), rv.clone()], |t, v| {
        click_probability(arch, t, v[0], v[1])
    })?);
    let logits = random(5, 1, &mut rng);
    out.push(check.run("loss/recommendation", &p64, &[logits], |t, v| {
        let parts = (0..5)
            .map(|i| t.slice_rows(v[0], i, i + 1))
            .collect::<Result<Vec<_>>>()?;
        rec_loss_term(t, parts[0], &parts[1..])
    })?);
    let anchors = random(4, 3, &mut rng);
    let positives = random(4, 3, &mut rng);
    out.push(check.run("loss/contrastive", &p64, &[anchors, positives], |t, v| {
        contrastive_loss(t, v[0], v[1], cfg.tau)
    })?);
    let users = random(3, cfg.dims.d_r, &mut rng);
    out.push(check.run("head/projection", &p64, &[users], |t, v| {
        let z = project(arch, t, v[0])?;
        probe(t, z)
    })?);
    Ok(())
}

/// Joint objective of a three-user batch for `variant`.
pub fn variant_loss(
    model: &Model,
    cfg: &TrainConfig,
    t: &mut Tape<'_, f64>,
) -> Result<Var> {
    let arch = &model.arch;
    let fx = fixture(cfg);
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let mut fwd = Forward { training: false, rng: &mut r };
    let mut recs = Vec::new();
    let mut anchors = Vec::new();
    let mut positives = Vec::new();
    for (k, persona) in fx.personas.iter().enumerate() {
        let pm = arch.persona_matrix(t, persona)?;
        let u = encode_user(arch, t, &fx.histories[k], pm, &mut fwd)?.u;
        let mut logits = Vec::new();
        for c in &fx.candidates {
            let r = encode_news(arch, t, c, pm, &mut fwd)?.r;
            logits.push(click_logit(arch, t, u, r)?);
        }
        logits.rotate_left(k);
        recs.push(rec_loss_term(t, logits[0], &logits[1..])?);
        if cfg.use_cl {
            if let Some((a, p)) = cross_view_views(
                arch,
                t,
                &fx.histories[k],
                &fx.abstracts[k],
                pm,
                cfg.cl_dropout,
                &mut fwd,
            )? {
                anchors.push(a);
                positives.push(p);
            }
        }
    }
    let rec = t.stack_rows(&recs)?;
    let rec = t.mean(rec);
    if !cfg.use_cl {
        return Ok(rec);
    }
    let a = t.stack_rows(&anchors)?;
    let p = t.stack_rows(&positives)?;
    let cl = contrastive_loss(t, a, p, cfg.tau)?;
    joint_loss_var(t, rec, cl, cfg.lambda)
}

fn variant_checks(check: &GradCheck, out: &mut Vec<CheckReport>) -> Result<()> {
    for v in Variant::ALL {
        let cfg = small_config(v);
        let model = Model::new(&cfg, 12, 8, 3)?;
        let p64 = jitter(model.params.cast::<f64>(), &mut ChaCha8Rng::seed_from_u64(4));
        out.push(check.run(&format!("variant/{}", v.name()), &p64, &[], |t, _| {
            variant_loss(&model, &cfg, t)
        })?);
    }
    Ok(())
}

/// Runs every check at `tol` and returns the reports in a fixed order.
pub fn run_suite(tol: f64) -> Result<Vec<CheckReport>> {
    let check = GradCheck::new(tol);
    let mut out = Vec::new();
    primitive_checks(&check, &mut out)?;
    model_checks(&check, &mut out)?;
    variant_checks(&check, &mut out)?;
    Ok(out)
}
