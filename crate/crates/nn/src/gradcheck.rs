//! Central finite-difference verification of backpropagated gradients.
//!
//! The numeric side only ever evaluates the forward pass, so it is
//! independent of every backward rule it checks.

use crate::autograd::{no_grad, record_activation_signs, Var};
use crate::params::{ParamId, ParamStore, Params};

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    /// Scalars compared.
    pub checked: usize,
    /// Scalars whose perturbation moved a leaky-ReLU input across zero even
    /// at the refined step.
    pub skipped_kinks: usize,
    /// Scalars that crossed a kink at the nominal step and were re-measured
    /// at the refined step.
    pub refined: usize,
    pub max_rel_err: f64,
    pub failures: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self, max_skip_fraction: f64) -> bool {
        let total = (self.checked + self.skipped_kinks).max(1);
        self.failures.is_empty()
            && self.checked > 0
            && (self.skipped_kinks as f64) <= max_skip_fraction * total as f64
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Denominator floor for [`relative_error`] in [`check_params`].
pub const REL_FLOOR: f64 = 1e-6;

/// Step shrink factor for scalars whose difference straddled a kink.
pub const KINK_REFINE: f64 = 1e-3;

/// Compare backprop gradients of the scalar `objective` against central
/// differences `(f(θ+h) − f(θ−h)) / 2h` for every scalar of the listed
/// parameters (all parameters when `ids` is `None`).
pub fn check_params(
    store: &mut ParamStore<f64>,
    ids: Option<&[ParamId]>,
    step: f64,
    tol: f64,
    objective: impl Fn(&Params<f64>) -> Var<f64>,
) -> GradCheckReport {
    let ids: Vec<ParamId> = match ids {
        Some(ids) => ids.to_vec(),
        None => store.ids().collect(),
    };
    let params = store.vars();
    let (loss, base_signs) = record_activation_signs(|| objective(&params));
    assert_eq!(loss.value().numel(), 1, "objective must be scalar");
    let grads = loss.backward();
    let analytic: Vec<_> = ids.iter().map(|&id| grads.get_or_zeros(params.get(id))).collect();
    drop((loss, params));

    let eval = |store: &ParamStore<f64>| {
        let _guard = no_grad();
        let params = store.vars();
        let (out, signs) = record_activation_signs(|| objective(&params));
        (out.value().data()[0], signs)
    };

    // Central difference at `h`, and whether either side crossed a kink.
    let difference = |store: &mut ParamStore<f64>, id: ParamId, j: usize, h: f64| {
        let orig = store.get(id).data()[j];
        store.get_mut(id).data_mut()[j] = orig + h;
        let (plus, plus_signs) = eval(store);
        store.get_mut(id).data_mut()[j] = orig - h;
        let (minus, minus_signs) = eval(store);
        store.get_mut(id).data_mut()[j] = orig;
        ((plus - minus) / (2.0 * h), plus_signs != base_signs || minus_signs != base_signs)
    };

    let mut report = GradCheckReport::default();
    for (&id, grad) in ids.iter().zip(&analytic) {
        for j in 0..store.get(id).numel() {
            let a = grad.data()[j];
            let (mut numeric, crossed) = difference(store, id, j, step);
            let mut rel = relative_error(a, numeric, REL_FLOOR);
            if crossed {
                // A difference spanning a kink is no oracle; retry on a
                // much finer step before giving up on this scalar.
                let (fine, still) = difference(store, id, j, step * KINK_REFINE);
                if still {
                    report.skipped_kinks += 1;
                    continue;
                }
                report.refined += 1;
                numeric = fine;
                rel = relative_error(a, numeric, REL_FLOOR);
            }
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(rel);
            if !(rel < tol) {
                report.failures.push(Mismatch {
                    param: store.name(id).to_string(),
                    index: j,
                    analytic: a,
                    numeric,
                    rel_err: rel,
                });
            }
        }
    }
    report
}
