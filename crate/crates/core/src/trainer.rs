//! Joint optimisation of the recommendation and contrastive objectives.
//!
//! Each training sample is forwarded and backpropagated on its own tape, so
//! samples can run on worker threads. The contrastive term couples users, so
//! it runs in two stages: per-user tapes produce projected views, a small
//! batch tape computes the loss over those views as constants, and its
//! gradients seed the backward pass of each per-user tape. Per-sample
//! gradients are summed in sample order, which keeps every run bit-identical
//! regardless of thread count.

use std::collections::HashSet;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{make_training_samples, split_by_time, Impression, NewsStore, TrainingSample};
use crate::encoders::{encode_news, encode_user_from_news, Forward, Model};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricReport};
use crate::objectives::{click_logit, contrastive_loss, cross_view_views, rec_loss_term};
use crate::optim::AdamState;
use crate::params::{Gradients, ParamSet};
use crate::parallel;
use crate::recommender::{news_input, persona_for, Recommender};
use crate::tape::{Tape, Var};
use crate::text::TokenSequence;

/// Cutoffs reported for nDCG during training.
pub const NDCG_KS: [usize; 2] = [5, 10];

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub rec_loss: f64,
    pub cl_loss: f64,
    pub joint_loss: f64,
    pub dev_auc: Option<f64>,
    pub dev_mrr: Option<f64>,
    pub dev_ndcg5: Option<f64>,
    pub dev_ndcg10: Option<f64>,
    /// Largest number of scalars held by tapes and per-sample gradients in
    /// any single step.
    pub peak_step_scalars: usize,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serialises")
    }
}

/// Losses of one optimisation step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub rec_loss: f64,
    pub cl_loss: f64,
    pub joint_loss: f64,
    pub scalars: usize,
}

/// Independent RNG for one (epoch, step, item, stream) slot.
fn slot_rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    // splitmix64 folding
    let mut h = seed;
    for &p in parts {
        h = h.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    ChaCha8Rng::seed_from_u64(h)
}

const STREAM_REC: u64 = 0;
const STREAM_CL: u64 = 1;

fn scalars_of(g: &Gradients, params: &ParamSet) -> usize {
    params
        .ids()
        .filter_map(|id| g.get(id))
        .map(|g| match g {
            crate::params::ParamGrad::Dense(v) => v.len(),
            crate::params::ParamGrad::Rows { cols, rows } => cols * rows.len(),
        })
        .sum()
}

pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: AdamState,
    store: &'a NewsStore,
    epoch: usize,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, store: &'a NewsStore) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config, store.vocab.len(), store.entity_vocab.len(), config.seed)?;
        Ok(Self::with_model(config, store, model))
    }

    /// Resumes from an existing model, e.g. one with imported vectors.
    pub fn with_model(config: TrainConfig, store: &'a NewsStore, model: Model) -> Self {
        let adam = AdamState::new(&model.params, config.adam());
        Trainer {
            config,
            model,
            adam,
            store,
            epoch: 0,
            step: 0,
        }
    }

    pub fn recommender(&self) -> Result<Recommender<'_>> {
        Ok(Recommender::new(
            &self.model,
            self.store,
            self.config.persona()?,
            self.config.title_entities_only,
        ))
    }

    fn titles(&self, history: &[String]) -> Result<Vec<TokenSequence>> {
        history
            .iter()
            .map(|id| Ok(news_input(&self.model.arch, self.item(id)?)))
            .collect()
    }

    fn item(&self, id: &str) -> Result<&'a crate::data::NewsItem> {
        self.store
            .get(id)
            .ok_or_else(|| Error::DegenerateInput(format!("unknown news id {id}")))
    }

    /// Forward and backward of one sample's recommendation term, scaled by
    /// `1 / batch`. Returns the unscaled loss.
    fn sample_gradients(
        &self,
        sample: &TrainingSample,
        history: &[String],
        batch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, Gradients, usize)> {
        let arch = &self.model.arch;
        let cfg = self.config.persona()?;
        let persona = persona_for(self.store, &sample.user_id, history, cfg, self.config.title_entities_only);
        let mut fwd = Forward { training: true, rng };
        let mut tape = Tape::new(&self.model.params);
        let pm = arch.persona_matrix(&mut tape, &persona)?;
        let mut rows = Vec::with_capacity(history.len());
        for text in self.titles(history)? {
            rows.push(encode_news(arch, &mut tape, &text, pm, &mut fwd)?.r);
        }
        let u = encode_user_from_news(arch, &mut tape, &rows, pm, &mut fwd)?.u;
        let logit = |tape: &mut Tape<'_, f32>, id: &str, fwd: &mut Forward<'_>| -> Result<Var> {
            let text = news_input(arch, self.item(id)?);
            let r = encode_news(arch, tape, &text, pm, fwd)?.r;
            click_logit(arch, tape, u, r)
        };
        let pos = logit(&mut tape, &sample.positive, &mut fwd)?;
        let negs = sample
            .negatives
            .iter()
            .map(|n| logit(&mut tape, n, &mut fwd))
            .collect::<Result<Vec<_>>>()?;
        let loss = rec_loss_term(&mut tape, pos, &negs)?;
        let value = tape.scalar(loss) as f64;
        let grads = tape.backward_seeded(&[(loss, vec![1.0 / batch as f32])])?;
        let scalars = tape.footprint() + scalars_of(&grads, &self.model.params);
        Ok((value, grads, scalars))
    }

    /// One optimisation step over a batch of samples drawn from `impressions`.
    pub fn step(
        &mut self,
        impressions: &[Impression],
        samples: &[TrainingSample],
    ) -> Result<StepStats> {
        let cfg = self.config.clone();
        let b = samples.len();
        if b == 0 {
            return Err(Error::DegenerateInput("empty batch".into()));
        }
        let (epoch, step) = (self.epoch as u64, self.step as u64);
        let indexed: Vec<(usize, &TrainingSample)> = samples.iter().enumerate().collect();

        let rec = parallel::map(&indexed, cfg.parallel, |(k, s)| {
            let mut rng = slot_rng(cfg.seed, &[epoch, step, *k as u64, STREAM_REC]);
            self.sample_gradients(s, &impressions[s.impression].history, b, &mut rng)
        });
        let mut total = Gradients::zeros(self.model.params.len());
        let mut rec_loss = 0.0;
        let mut scalars = 0;
        for r in rec {
            let (loss, g, n) = r?;
            rec_loss += loss;
            scalars += n;
            total.merge(&g);
        }
        rec_loss /= b as f64;
        if !rec_loss.is_finite() {
            return Err(Error::Divergence {
                step: self.step,
                component: "rec_loss".into(),
            });
        }

        let mut cl_loss = 0.0;
        if cfg.use_cl {
            let (loss, grads, n) = self.contrastive_gradients(impressions, samples)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step: self.step,
                    component: "cl_loss".into(),
                });
            }
            cl_loss = loss;
            scalars += n;
            for g in &grads {
                total.merge(g);
            }
        }

        self.adam.step(&mut self.model.params, &total).map_err(|e| match e {
            Error::Divergence { .. } => Error::Divergence {
                step: self.step,
                component: "gradient".into(),
            },
            e => e,
        })?;
        self.step += 1;
        Ok(StepStats {
            rec_loss,
            cl_loss,
            joint_loss: rec_loss + cfg.lambda * cl_loss,
            scalars,
        })
    }

    /// Contrastive loss over the batch's distinct users and the per-user
    /// gradients it induces, scaled by lambda.
    fn contrastive_gradients(
        &self,
        impressions: &[Impression],
        samples: &[TrainingSample],
    ) -> Result<(f64, Vec<Gradients>, usize)> {
        let cfg = &self.config;
        let arch = &self.model.arch;
        let pcfg = cfg.persona()?;
        let mut seen = HashSet::new();
        let users: Vec<(usize, &TrainingSample)> = samples
            .iter()
            .filter(|s| seen.insert(s.user_id.as_str()))
            .enumerate()
            .collect();
        let (epoch, step) = (self.epoch as u64, self.step as u64);

        struct View<'p> {
            tape: Tape<'p, f32>,
            anchor: Var,
            positive: Var,
        }
        let views = parallel::map(&users, cfg.parallel, |(k, s)| -> Result<Option<View<'_>>> {
            let mut rng = slot_rng(cfg.seed, &[epoch, step, *k as u64, STREAM_CL]);
            let history = &impressions[s.impression].history;
            let persona = persona_for(self.store, &s.user_id, history, pcfg, cfg.title_entities_only);
            let mut tape = Tape::new(&self.model.params);
            let pm = arch.persona_matrix(&mut tape, &persona)?;
            let titles = self.titles(history)?;
            let abstracts = history
                .iter()
                .map(|id| Ok(self.item(id)?.abstract_.clone()))
                .collect::<Result<Vec<_>>>()?;
            let mut fwd = Forward {
                training: true,
                rng: &mut rng,
            };
            let v = cross_view_views(arch, &mut tape, &titles, &abstracts, pm, cfg.cl_dropout, &mut fwd)?;
            Ok(v.map(|(anchor, positive)| View {
                tape,
                anchor,
                positive,
            }))
        });
        let mut views: Vec<View<'_>> = views
            .into_iter()
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        let n = views.len();
        if n < 2 {
            return Ok((0.0, Vec::new(), 0));
        }

        let d_p = arch.dims.d_p;
        let gather = |pick: fn(&View<'_>) -> Var| -> Vec<f32> {
            views.iter().flat_map(|v| v.tape.value(pick(v)).to_vec()).collect()
        };
        let a_vals = gather(|v| v.anchor);
        let p_vals = gather(|v| v.positive);
        let empty = ParamSet::new();
        let mut batch = Tape::new(&empty);
        let a = batch.input(n, d_p, a_vals)?;
        let p = batch.input(n, d_p, p_vals)?;
        let loss = contrastive_loss(&mut batch, a, p, cfg.tau)?;
        let value = batch.scalar(loss) as f64;
        batch.backward(loss)?;
        let lambda = cfg.lambda as f32;
        let scaled = |g: &[f32], i: usize| -> Vec<f32> {
            g[i * d_p..(i + 1) * d_p].iter().map(|x| x * lambda).collect()
        };
        let ga = batch.grad(a).expect("anchor gradient").to_vec();
        let gp = batch.grad(p).expect("positive gradient").to_vec();
        let mut scalars = batch.footprint();
        let mut out = Vec::with_capacity(n);
        for (i, v) in views.iter_mut().enumerate() {
            let g = v.tape.backward_seeded(&[(v.anchor, scaled(&ga, i)), (v.positive, scaled(&gp, i))])?;
            scalars += v.tape.footprint() + scalars_of(&g, &self.model.params);
            out.push(g);
        }
        Ok((value, out, scalars))
    }

    /// One pass over freshly sampled training data, then a dev evaluation.
    pub fn run_epoch(&mut self, train: &[Impression], dev: &[Impression]) -> Result<EpochRecord> {
        let cfg = self.config.clone();
        let mut rng = slot_rng(cfg.seed, &[self.epoch as u64, u64::MAX]);
        let mut samples = make_training_samples(train, cfg.neg_ratio, &mut rng)?;
        if samples.is_empty() {
            return Err(Error::DegenerateInput("no training samples".into()));
        }
        samples.shuffle(&mut rng);
        self.step = 0;
        let (mut rec, mut cl, mut joint, mut peak) = (0.0, 0.0, 0.0, 0);
        let batches: Vec<&[TrainingSample]> = samples.chunks(cfg.batch_size).collect();
        for batch in &batches {
            let s = self.step(train, batch)?;
            rec += s.rec_loss;
            cl += s.cl_loss;
            joint += s.joint_loss;
            peak = peak.max(s.scalars);
        }
        let steps = batches.len();
        let nb = steps as f64;
        let mut record = EpochRecord {
            epoch: self.epoch + 1,
            steps,
            rec_loss: rec / nb,
            cl_loss: cl / nb,
            joint_loss: joint / nb,
            dev_auc: None,
            dev_mrr: None,
            dev_ndcg5: None,
            dev_ndcg10: None,
            peak_step_scalars: peak,
        };
        if !dev.is_empty() {
            let r = self.evaluate(dev)?;
            record.dev_auc = Some(r.auc());
            record.dev_mrr = Some(r.get("mrr"));
            record.dev_ndcg5 = Some(r.get("ndcg@5"));
            record.dev_ndcg10 = Some(r.get("ndcg@10"));
        }
        info!(
            "epoch {} rec={:.4} cl={:.4} joint={:.4} dev_auc={}",
            record.epoch,
            record.rec_loss,
            record.cl_loss,
            record.joint_loss,
            record.dev_auc.map_or("-".into(), |a| format!("{a:.4}"))
        );
        self.epoch += 1;
        Ok(record)
    }

    pub fn evaluate(&self, impressions: &[Impression]) -> Result<MetricReport> {
        evaluate(&self.recommender()?, impressions, &NDCG_KS, self.config.parallel)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }
}

/// Result of a full training run.
pub struct TrainOutput {
    pub model: Model,
    pub log: Vec<EpochRecord>,
}

/// Trains for `config.epochs`, holding out the latest `dev_fraction` of
/// impressions for per-epoch evaluation.
pub fn train(config: &TrainConfig, store: &NewsStore, impressions: &[Impression]) -> Result<TrainOutput> {
    let (train, dev) = split_by_time(impressions, config.dev_fraction);
    train_with_dev(config, store, &train, &dev)
}

pub fn train_with_dev(
    config: &TrainConfig,
    store: &NewsStore,
    train: &[Impression],
    dev: &[Impression],
) -> Result<TrainOutput> {
    let mut trainer = Trainer::new(config.clone(), store)?;
    let mut log = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        log.push(trainer.run_epoch(train, dev)?);
    }
    Ok(TrainOutput {
        model: trainer.model,
        log,
    })
}
