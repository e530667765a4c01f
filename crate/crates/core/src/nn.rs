//! Layers composed from tape primitives.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

pub const LEAKY_SLOPE: f64 = 0.01;

pub fn slope<T: Scalar>() -> T {
    T::from_f64_lossy(LEAKY_SLOPE)
}

/// `x W + b` applied to every row of `x`.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn register<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Dense {
            weight: params.insert_glorot(&format!("{name}.weight"), d_in, d_out, rng)?,
            bias: params.insert_zeros(&format!("{name}.bias"), 1, d_out)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

/// Additive attention pooling: `softmax(tanh(X W + b) q)` over the rows of `X`,
/// then the weighted sum of rows. Returns `(pooled [1 x d], weights [1 x n])`.
#[derive(Clone, Copy, Debug)]
pub struct AdditivePool {
    pub proj: Dense,
    pub query: ParamId,
}

impl AdditivePool {
    pub fn register<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        d_in: usize,
        d_attn: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(AdditivePool {
            proj: Dense::register(params, &format!("{name}.proj"), d_in, d_attn, rng)?,
            query: params.insert_glorot(&format!("{name}.query"), d_attn, 1, rng)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        mask: &[bool],
    ) -> Result<(Var, Var)> {
        let h = self.proj.forward(tape, x)?;
        let h = tape.tanh(h);
        let q = tape.param(self.query);
        let scores = tape.matmul(h, q)?;
        let scores = tape.transpose(scores);
        let weights = tape.softmax_masked(scores, mask)?;
        let pooled = tape.matmul(weights, x)?;
        Ok((pooled, weights))
    }
}

/// Multi-head scaled dot-product self-attention without positional encoding.
#[derive(Clone, Debug)]
pub struct MultiHeadSelfAttention {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadSelfAttention {
    pub fn register<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model dimension {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadSelfAttention {
            query: params.insert_glorot(&format!("{name}.query"), dim, dim, rng)?,
            key: params.insert_glorot(&format!("{name}.key"), dim, dim, rng)?,
            value: params.insert_glorot(&format!("{name}.value"), dim, dim, rng)?,
            output: params.insert_glorot(&format!("{name}.output"), dim, dim, rng)?,
            heads,
            dim,
        })
    }

    /// `x` is `n x dim`; `mask[i]` marks real rows. Masked output rows are zero.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, mask: &[bool]) -> Result<Var> {
        let (n, d) = tape.dims(x);
        if d != self.dim {
            return Err(Error::dim("multi_head_self_attention", &[n, d], &[n, self.dim]));
        }
        if mask.len() != n {
            return Err(Error::dim("attention mask", &[n], &[mask.len()]));
        }
        let wq = tape.param(self.query);
        let wk = tape.param(self.key);
        let wv = tape.param(self.value);
        let wo = tape.param(self.output);
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let dh = d / self.heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (s, e) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, s, e)?,
                    tape.slice_cols(k, s, e)?,
                    tape.slice_cols(v, s, e)?,
                )
            };
            let scores = tape.matmul_t(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_masked(scores, mask)?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        let out = tape.matmul(cat, wo)?;
        if mask.iter().all(|m| *m) {
            Ok(out)
        } else {
            tape.mul_const(out, row_mask(mask, d))
        }
    }
}

/// Expands a per-row mask to a per-element 0/1 multiplier.
pub fn row_mask<T: Scalar>(mask: &[bool], cols: usize) -> Vec<T> {
    mask.iter()
        .flat_map(|&m| std::iter::repeat_n(if m { T::one() } else { T::zero() }, cols))
        .collect()
}

/// Inverted dropout. Identity when not training or when `rate` is zero.
pub fn dropout<T: Scalar, R: Rng>(
    tape: &mut Tape<'_, T>,
    x: Var,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
    let n = tape.value(x).len();
    let k = (0..n)
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect();
    tape.mul_const(x, k)
}
