//! Central finite-difference verification of tape gradients, in f64.

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub coordinates: usize,
    pub passed: bool,
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<6} {:<40} max_rel_err={:.3e} tol={:.1e} coords={}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_err,
            self.tol,
            self.coordinates
        )
    }
}

/// Denominator floor of the per-coordinate error `|a - n| / max(|a|, |n|, floor)`.
/// A unit floor mirrors the step size `1e-5 * max(1, |x|)`.
///
/// The reported error is the larger of that per-coordinate error and the
/// normwise error `max|a - n| / max(max|a|, max|n|)`, so a uniformly
/// mis-scaled backward pass is caught even when every gradient is small.
pub const DEFAULT_FLOOR: f64 = 1.0;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub tol: f64,
    pub floor: f64,
    backward_scale: f64,
}

impl GradCheck {
    pub fn new(tol: f64) -> Self {
        GradCheck {
            tol,
            floor: DEFAULT_FLOOR,
            backward_scale: 1.0,
        }
    }

    /// Multiplies analytic gradients before comparison. Only useful as a
    /// negative control for the harness itself.
    pub fn with_backward_scale(mut self, scale: f64) -> Self {
        self.backward_scale = scale;
        self
    }

    /// Checks d f / d(every parameter scalar and every input scalar).
    ///
    /// `f` records a scalar-valued computation on the tape from the given
    /// input variables; it must be deterministic.
    pub fn run<F>(
        &self,
        name: &str,
        params: &ParamSet<f64>,
        inputs: &[Tensor<f64>],
        f: F,
    ) -> Result<CheckReport>
    where
        F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
    {
        let eval = |p: &ParamSet<f64>, xs: &[Tensor<f64>]| -> Result<f64> {
            let mut tape = Tape::new(p);
            let vars = xs
                .iter()
                .map(|x| {
                    let (r, c) = x.as_matrix_dims()?;
                    tape.constant(r, c, x.data().to_vec())
                })
                .collect::<Result<Vec<_>>>()?;
            let out = f(&mut tape, &vars)?;
            let v = tape.scalar(out);
            if !v.is_finite() {
                return Err(Error::CheckInapplicable(format!("{name}: non-finite output")));
            }
            Ok(v)
        };

        // analytic
        let mut tape = Tape::new(params);
        let vars = inputs
            .iter()
            .map(|x| {
                let (r, c) = x.as_matrix_dims()?;
                tape.input(r, c, x.data().to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        let (r, c) = tape.dims(out);
        if r * c != 1 {
            return Err(Error::CheckInapplicable(format!(
                "{name}: output is {r}x{c}, expected a scalar"
            )));
        }
        if !tape.scalar(out).is_finite() {
            return Err(Error::CheckInapplicable(format!("{name}: non-finite output")));
        }
        let grads = tape.backward(out)?;
        let input_grads: Vec<Vec<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(v, x)| {
                tape.grad(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; x.len()])
            })
            .collect();

        let mut max_err = 0.0f64;
        let mut max_abs_diff = 0.0f64;
        let mut max_mag = 0.0f64;
        let mut coordinates = 0;
        let mut compare = |analytic: f64, numeric: f64| {
            let a = analytic * self.backward_scale;
            let denom = a.abs().max(numeric.abs()).max(self.floor);
            max_err = max_err.max((a - numeric).abs() / denom);
            max_abs_diff = max_abs_diff.max((a - numeric).abs());
            max_mag = max_mag.max(a.abs()).max(numeric.abs());
            coordinates += 1;
        };

        let mut work = params.clone();
        for id in params.ids() {
            let analytic = grads.dense(id, params.get(id).len());
            for (i, a) in analytic.iter().enumerate() {
                let x0 = params.get(id).data()[i];
                let h = 1e-5 * x0.abs().max(1.0);
                work.get_mut(id).data_mut()[i] = x0 + h;
                let fp = eval(&work, inputs)?;
                work.get_mut(id).data_mut()[i] = x0 - h;
                let fm = eval(&work, inputs)?;
                work.get_mut(id).data_mut()[i] = x0;
                compare(*a, (fp - fm) / (2.0 * h));
            }
        }

        let mut xs = inputs.to_vec();
        for (k, analytic) in input_grads.iter().enumerate() {
            for (i, a) in analytic.iter().enumerate() {
                let x0 = inputs[k].data()[i];
                let h = 1e-5 * x0.abs().max(1.0);
                xs[k].data_mut()[i] = x0 + h;
                let fp = eval(params, &xs)?;
                xs[k].data_mut()[i] = x0 - h;
                let fm = eval(params, &xs)?;
                xs[k].data_mut()[i] = x0;
                compare(*a, (fp - fm) / (2.0 * h));
            }
        }

        if max_mag > 0.0 {
            max_err = max_err.max(max_abs_diff / max_mag);
        }
        Ok(CheckReport {
            name: name.to_string(),
            max_rel_err: max_err,
            tol: self.tol,
            coordinates,
            passed: max_err < self.tol,
        })
    }
}
