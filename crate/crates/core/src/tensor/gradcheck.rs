//! Central finite-difference checks against tape gradients.

use super::array::Tensor;
use super::tape::{Tape, Var};
use crate::error::Result;

/// Relative error used throughout: `|a - b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(auto: f64, numeric: f64) -> f64 {
    (auto - numeric).abs() / (auto.abs() + numeric.abs()).max(1e-8)
}

/// Per-coordinate comparison over several input tensors.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `errors[t][i]` is the relative error for coordinate `i` of input `t`.
    pub errors: Vec<Vec<f64>>,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.errors.iter().flatten().copied().fold(0.0, f64::max)
    }

    /// Fraction of coordinates whose relative error is below `tol`.
    pub fn fraction_below(&self, tol: f64) -> f64 {
        let total: usize = self.errors.iter().map(Vec::len).sum();
        if total == 0 {
            return 1.0;
        }
        let ok = self.errors.iter().flatten().filter(|&&e| e < tol).count();
        ok as f64 / total as f64
    }

    pub fn coordinates(&self) -> usize {
        self.errors.iter().map(Vec::len).sum()
    }
}

/// Checks the tape gradient of a scalar function of several tensors.
///
/// `f` receives a fresh tape and one leaf per input, and must return a
/// scalar node on that tape.
pub fn gradient_check_many<F>(f: F, inputs: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| grads.get(v).cloned().expect("leaf gradient"))
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    let mut errors = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut fd = Tensor::zeros(inputs[t].shape());
        let mut errs = Vec::with_capacity(inputs[t].len());
        for i in 0..inputs[t].len() {
            let orig = inputs[t].data()[i];
            work[t].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[t].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[t].data_mut()[i] = orig;
            let g = (plus - minus) / (2.0 * step);
            fd.data_mut()[i] = g;
            errs.push(relative_error(analytic[t].data()[i], g));
        }
        numeric.push(fd);
        errors.push(errs);
    }
    Ok(GradCheckReport {
        errors,
        analytic,
        numeric,
    })
}

/// Maximum relative error between the tape gradient of `f` at `x` and a
/// central difference with the given step.
pub fn gradient_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let report = gradient_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step)?;
    Ok(report.max_error())
}
