//! Central finite-difference gradient checks.
//!
//! Only the forward closure is evaluated, so the comparison is independent of
//! the tape's backward rules.

use super::{ParamStore, Tape, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Gradient norms below this are compared in absolute terms; at `h = 1e-5`
/// central differences carry roughly `1e-11` of round-off per entry.
pub const NORM_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||, NORM_FLOOR)`.
    pub rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub params: Vec<ParamCheck>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.params.iter().all(|p| p.rel_error < tol)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Compares tape gradients of the scalar built by `build` against central
/// differences with step `h`, for every parameter in `store`.
pub fn check<F>(store: &ParamStore, h: f64, build: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut analytic = store.clone();
    analytic.zero_grad();
    let mut tape = Tape::new();
    let root = build(&mut tape, &analytic)?;
    tape.backward(root, &mut analytic)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let root = build(&mut tape, s)?;
        Ok(tape.value(root).item())
    };

    let mut probe = store.clone();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut params = Vec::with_capacity(names.len());
    for name in names {
        let base = store.value(&name)?.clone();
        let mut numeric = vec![0.0; base.numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut plus = base.clone();
            plus.data_mut()[i] += h;
            probe.set(&name, plus)?;
            let fp = eval(&probe)?;
            let mut minus = base.clone();
            minus.data_mut()[i] -= h;
            probe.set(&name, minus)?;
            let fm = eval(&probe)?;
            *slot = (fp - fm) / (2.0 * h);
        }
        probe.set(&name, base)?;

        let a = analytic.grad(&name)?.data();
        let diff: f64 = a
            .iter()
            .zip(&numeric)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = na.max(nn);
        let rel_error = diff / scale.max(NORM_FLOOR);
        let max_abs_error = a
            .iter()
            .zip(&numeric)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        params.push(ParamCheck {
            name,
            rel_error,
            max_abs_error,
        });
    }
    Ok(GradReport { params })
}
