//! Central finite-difference gradient checks.
//!
//! Only forward evaluations are used to build the numerical estimate, so the
//! check stays independent of the backward rules it is testing.

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Denominator floor for relative errors of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, element index, analytic, numeric) of the worst element.
    pub worst: (usize, usize, f64, f64),
    pub checked: usize,
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences with step `h`, for every element of every input.
///
/// `f` receives the inputs already recorded on the tape, in order.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let root = f(&mut tape, &vars)?;
        tape.value(root).item()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0, 0.0, 0.0),
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ei in 0..input.len() {
            let orig = input.data()[ei];
            work[ti].data_mut()[ei] = orig + h;
            let plus = eval(&work)?;
            work[ti].data_mut()[ei] = orig - h;
            let minus = eval(&work)?;
            work[ti].data_mut()[ei] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[ti].data()[ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (ti, ei, a, numeric);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
