//! Click head, recommendation loss, cross-view contrastive loss, joint loss.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::encoders::{encode_user, Architecture, Forward};
use crate::error::{Error, Result};
use crate::nn;
use crate::tape::{log_sum_exp, sigmoid, Tape, Var};
use crate::tensor::Scalar;
use crate::text::TokenSequence;

/// Pre-sigmoid click score for user vector `u` and candidate vector `r`.
pub fn click_logit<T: Scalar>(
    arch: &Architecture,
    tape: &mut Tape<'_, T>,
    u: Var,
    r: Var,
) -> Result<Var> {
    let x = tape.concat_cols(&[u, r])?;
    let h = arch.click.hidden.forward(tape, x)?;
    let h = tape.leaky_relu(h, nn::slope());
    let q = tape.param(arch.click.query);
    tape.matmul(h, q)
}

/// Click probability in (0, 1).
pub fn click_probability<T: Scalar>(
    arch: &Architecture,
    tape: &mut Tape<'_, T>,
    u: Var,
    r: Var,
) -> Result<Var> {
    let logit = click_logit(arch, tape, u, r)?;
    Ok(tape.sigmoid(logit))
}

/// `-ln(ŷ⁺ / (ŷ⁺ + Σ ŷ⁻))` for one positive and its negatives, from logits,
/// where each `ŷ` is the sigmoid of its logit.
pub fn rec_loss_term<T: Scalar>(
    tape: &mut Tape<'_, T>,
    positive: Var,
    negatives: &[Var],
) -> Result<Var> {
    let mut all = Vec::with_capacity(negatives.len() + 1);
    all.push(positive);
    all.extend_from_slice(negatives);
    let logits = tape.stack_rows(&all)?;
    let log_y = tape.log_sigmoid(logits);
    let lse = tape.log_sum_exp(log_y);
    let log_pos = tape.slice_rows(log_y, 0, 1)?;
    let neg_log_pos = tape.scale(log_pos, -T::one());
    tape.add(lse, neg_log_pos)
}

/// Reference evaluation of the per-sample recommendation loss from probabilities.
pub fn rec_loss_from_probs(positive: f64, negatives: &[f64]) -> f64 {
    -(positive / (positive + negatives.iter().sum::<f64>())).ln()
}

/// Batch mean of per-sample recommendation losses given click logits.
pub fn rec_loss_from_logits(samples: &[(f64, Vec<f64>)]) -> f64 {
    let total: f64 = samples
        .iter()
        .map(|(pos, negs)| {
            let logs: Vec<f64> = std::iter::once(*pos)
                .chain(negs.iter().copied())
                .map(crate::tape::log_sigmoid)
                .collect();
            log_sum_exp(&logs) - logs[0]
        })
        .sum();
    total / samples.len() as f64
}

/// InfoNCE over in-batch negatives on the tape.
///
/// `anchors` and `positives` are `B x d_p`; row `i` of `anchors` is scored
/// against every row of `positives` by raw dot product divided by `tau`,
/// with row `i` as the positive and the others as negatives. Returns the
/// batch mean.
pub fn contrastive_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    anchors: Var,
    positives: Var,
    tau: f64,
) -> Result<Var> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let (b, d) = tape.dims(anchors);
    if tape.dims(positives) != (b, d) {
        let (pb, pd) = tape.dims(positives);
        return Err(Error::dim("contrastive_loss", &[b, d], &[pb, pd]));
    }
    if b < 2 {
        return Err(Error::DegenerateInput(
            "contrastive batch needs at least two users".into(),
        ));
    }
    let sims = tape.matmul_t(anchors, positives)?;
    let sims = tape.scale(sims, T::from_f64_lossy(1.0 / tau));
    let mut lses = Vec::with_capacity(b);
    for i in 0..b {
        let row = tape.slice_rows(sims, i, i + 1)?;
        lses.push(tape.log_sum_exp(row));
    }
    let lse = tape.stack_rows(&lses)?;
    let lse_total = tape.sum(lse);
    let eye = (0..b * b)
        .map(|k| if k / b == k % b { T::one() } else { T::zero() })
        .collect();
    let diag = tape.mul_const(sims, eye)?;
    let diag_total = tape.sum(diag);
    let neg_diag = tape.scale(diag_total, -T::one());
    let total = tape.add(lse_total, neg_diag)?;
    Ok(tape.scale(total, T::one() / T::from_usize(b).unwrap()))
}

/// Reference InfoNCE on plain vectors, used by tests and diagnostics.
pub fn contrastive_loss_direct(anchors: &[Vec<f64>], positives: &[Vec<f64>], tau: f64) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let b = anchors.len();
    let mut total = 0.0;
    for i in 0..b {
        let s: Vec<f64> = positives.iter().map(|p| dot(&anchors[i], p) / tau).collect();
        total += log_sum_exp(&s) - s[i];
    }
    total / b as f64
}

pub fn joint_loss(rec: f64, cl: f64, lambda: f64) -> f64 {
    rec + lambda * cl
}

pub fn joint_loss_var<T: Scalar>(tape: &mut Tape<'_, T>, rec: Var, cl: Var, lambda: f64) -> Result<Var> {
    let weighted = tape.scale(cl, T::from_f64_lossy(lambda));
    tape.add(rec, weighted)
}

/// Shared two-layer projection head.
pub fn project<T: Scalar>(arch: &Architecture, tape: &mut Tape<'_, T>, u: Var) -> Result<Var> {
    let p = arch
        .projection
        .as_ref()
        .ok_or_else(|| Error::Config("model was built without contrastive learning".into()))?;
    let h = p.inner.forward(tape, u)?;
    let h = tape.leaky_relu(h, nn::slope());
    let h = p.outer.forward(tape, h)?;
    Ok(tape.leaky_relu(h, nn::slope()))
}

/// Drops each title with probability `rate`, keeps at least one, and shuffles.
pub fn title_subset<R: Rng>(titles: &[TokenSequence], rate: f64, rng: &mut R) -> Vec<TokenSequence> {
    let mut kept: Vec<TokenSequence> = titles
        .iter()
        .filter(|_| rate == 0.0 || rng.gen::<f64>() >= rate)
        .cloned()
        .collect();
    if kept.is_empty() && !titles.is_empty() {
        kept.push(titles[rng.gen_range(0..titles.len())].clone());
    }
    kept.shuffle(rng);
    kept
}

/// The two projected views of one user: `(abstract view, title view)`.
/// Returns `None` when no history item has a non-empty abstract.
pub fn cross_view_views<T: Scalar>(
    arch: &Architecture,
    tape: &mut Tape<'_, T>,
    titles: &[TokenSequence],
    abstracts: &[TokenSequence],
    persona: Var,
    title_dropout: f64,
    fwd: &mut Forward<'_>,
) -> Result<Option<(Var, Var)>> {
    let abstracts: Vec<TokenSequence> = abstracts
        .iter()
        .filter(|a| a.num_real() > 0)
        .cloned()
        .collect();
    if abstracts.is_empty() || titles.is_empty() {
        return Ok(None);
    }
    let subset = title_subset(titles, title_dropout, fwd.rng);
    let ua = encode_user(arch, tape, &abstracts, persona, fwd)?;
    let ut = encode_user(arch, tape, &subset, persona, fwd)?;
    let anchor = project(arch, tape, ua.u)?;
    let positive = project(arch, tape, ut.u)?;
    Ok(Some((anchor, positive)))
}

/// Sigmoid on plain values, for reporting.
pub fn probability(logit: f64) -> f64 {
    sigmoid(logit)
}
