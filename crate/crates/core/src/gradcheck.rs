//! Central finite-difference checks of tape gradients.
//!
//! The harness only evaluates forward values for the numeric side, so it is
//! independent of every backward rule it checks.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::{Tape, Tensor, Var};

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-6;

/// Denominator floor for the relative error. Below this gradient magnitude the
/// comparison becomes an absolute-error test (|a - n| < tolerance * floor).
pub const REL_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Worst coordinate found for one checked input.
#[derive(Clone, Debug)]
pub struct InputReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Aggregate over all inputs of one check.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub label: String,
    pub inputs: Vec<InputReport>,
}

impl CheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&InputReport> {
        self.inputs.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.inputs.iter().all(|r| r.max_rel_err < tol && r.max_rel_err.is_finite())
    }
}

/// Named differentiable input.
pub struct Input {
    pub name: String,
    pub value: Tensor,
}

impl Input {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Input { name: name.into(), value }
    }
}

/// Compares the tape gradient of `f` against central differences.
///
/// `f` must build a scalar from the given leaves and be deterministic (any
/// randomness inside it must come from a generator it seeds itself). At most
/// `max_coords` coordinates per input are checked, chosen with `rng`.
pub fn check<F, R>(label: &str, inputs: &[Input], f: F, max_coords: usize, rng: &mut R) -> Result<CheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    R: Rng + ?Sized,
{
    let tape = Tape::new();
    let leaves: Vec<Var<'_>> = inputs.iter().map(|i| tape.leaf(i.value.clone())).collect();
    let loss = f(&tape, &leaves)?;
    let grads = tape.backward(loss)?;

    let eval = |values: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = values.iter().map(|v| tape.constant(v.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut reports = Vec::with_capacity(inputs.len());
    let mut values: Vec<Tensor> = inputs.iter().map(|i| i.value.clone()).collect();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(leaves[k]);
        let n = input.value.numel();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(rng, n, max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let mut report = InputReport {
            name: input.name.clone(),
            checked: coords.len(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &c in &coords {
            let orig = values[k].data()[c];
            values[k].data_mut()[c] = orig + FD_STEP;
            let plus = eval(&values)?;
            values[k].data_mut()[c] = orig - FD_STEP;
            let minus = eval(&values)?;
            values[k].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.data()[c];
            let err = relative_error(a, numeric);
            if err > report.max_rel_err || err.is_nan() {
                report.max_rel_err = err;
                report.worst_index = c;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        reports.push(report);
    }
    Ok(CheckReport { label: label.to_string(), inputs: reports })
}
