//! Central finite-difference checks of tape gradients.

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    /// Floor below which a discrepancy is treated as numerical noise; only
    /// matters for gradients that are analytically zero.
    pub abs_tol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_tol: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares the tape gradient of `f` with respect to every element of
/// every input against `(f(x+h) - f(x-h)) / 2h`.
///
/// `f` must build its scalar loss from the given leaves on a fresh tape and
/// be deterministic.
pub fn check<F>(inputs: &[Tensor], f: F, config: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &leaves)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut tape = Tape::new();
    let mut store = ParamStore::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &leaves)?;
    tape.backward(loss, &mut store)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
        failures: Vec::new(),
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, &leaf) in leaves.iter().enumerate() {
        let analytic: Vec<f64> = tape
            .grad(leaf)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for i in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[i];
            probe[k].data_mut()[i] = x0 + config.step;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] = x0 - config.step;
            let minus = eval(&probe)?;
            probe[k].data_mut()[i] = x0;
            let numeric = (plus - minus) / (2.0 * config.step);
            let a = analytic[i];
            let abs = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            let rel = if scale > 0.0 { abs / scale } else { 0.0 };
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if abs > config.abs_tol {
                report.max_rel_error = report.max_rel_error.max(rel);
            }
            if abs > config.abs_tol && rel > config.rel_tol {
                report.failures.push(format!(
                    "input {k}[{i}]: analytic {a:e} vs numeric {numeric:e} (rel {rel:e})"
                ));
            }
        }
    }
    Ok(report)
}
