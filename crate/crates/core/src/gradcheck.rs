//! Central finite-difference checks for anything built on a [`Tape`].
//!
//! The numerical side only ever evaluates forward values, so it stays
//! independent of the backward rules it checks.

use crate::autograd::{Tape, Var};
use crate::tensor::Matrix;

/// Worst discrepancy found by [`check_tape_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input index, flat entry index)` of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_error < rel_tol
    }
}

/// Compares analytic gradients of `f` with central differences of step `eps`
/// for every entry of every input.
///
/// The relative error of an entry is `|a − n| / max(|a|, |n|, floor)` where
/// `floor` is `1e-3` times the largest analytic gradient magnitude of that
/// input (and at least `1e-12`), so entries whose true gradient is zero are
/// judged against the tensor's own scale instead of round-off. Entries where
/// both values sit below the round-off level of the central difference,
/// `1e3 · ε · max(|f|, 1) / eps`, are counted but not scored.
pub fn check_tape_gradients<F>(inputs: &[Matrix<f64>], eps: f64, f: &F) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let evaluate = |values: &[Matrix<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|m| tape.constant(m.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out);
    let noise = 1e3 * f64::EPSILON * tape.value(out).item().abs().max(1.0) / eps;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    let mut work: Vec<Matrix<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(inputs[i].rows(), inputs[i].cols()));
        let scale = analytic
            .as_slice()
            .iter()
            .fold(0.0f64, |m, &g| m.max(g.abs()));
        let floor = (1e-3 * scale).max(1e-12);
        for j in 0..inputs[i].len() {
            let orig = inputs[i].as_slice()[j];
            work[i].as_mut_slice()[j] = orig + eps;
            let plus = evaluate(&work);
            work[i].as_mut_slice()[j] = orig - eps;
            let minus = evaluate(&work);
            work[i].as_mut_slice()[j] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.as_slice()[j];
            let abs = (a - numeric).abs();
            let rel = if a.abs().max(numeric.abs()) < noise {
                0.0
            } else {
                abs / a.abs().max(numeric.abs()).max(floor)
            };
            report.entries_checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
                report.worst = Some((i, j));
            }
        }
    }
    report
}
