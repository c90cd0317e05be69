//! Central-difference verification of tape gradients.
//!
//! The check treats the model as a black box `f(params) -> scalar loss`:
//! one taped backward pass produces the analytic gradient, then every
//! parameter element is wiggled by ±h and the secant slope is compared
//! against it. `f` must be deterministic in the parameter values (run
//! stochastic layers in eval mode or with a fixed seed per call).

use std::collections::BTreeMap;

use crate::error::Result;
use crate::tape::{ParamStore, Tape, Var};

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error per parameter role, in role order.
    pub per_role: BTreeMap<String, f64>,
    /// Worst relative error over every element of every parameter.
    pub max_rel_err: f64,
    /// Name of the parameter holding the worst element.
    pub worst_param: String,
    /// Total number of elements compared.
    pub elements: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error between an analytic and a numeric derivative. The floor
/// in the denominator absorbs secant roundoff — about ε·|f|/h in absolute
/// terms, ~1e-11 for unit-scale losses at h = 1e-5 — which would otherwise
/// dominate the ratio wherever the true derivative is near zero. A genuinely
/// wrong gradient errs on the scale of the derivative itself, far above
/// that noise, so the floor cannot hide one.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + 1e-5)
}

/// Compares the tape gradient of `f` against central differences of step
/// `h` for every element of every parameter in `store`.
///
/// `f` is called once per probe on a fresh tape and must return the loss
/// node; parameter values are restored exactly after each probe.
pub fn finite_diff_check<F>(store: &mut ParamStore, h: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var>,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = f(store, &mut tape)?;
    tape.backward(loss, store)?;
    let analytic: Vec<(String, String, Vec<f64>)> = store
        .iter()
        .map(|p| (p.name.clone(), p.role.clone(), p.grad.data().to_vec()))
        .collect();

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(store, &mut tape)?;
        tape.value(loss).scalar_value()
    };

    let mut per_role: BTreeMap<String, f64> = BTreeMap::new();
    let mut max_rel_err = 0.0;
    let mut worst_param = String::new();
    let mut elements = 0;

    let ids: Vec<_> = store.ids().collect();
    for (idx, id) in ids.iter().enumerate() {
        let n = store.value(*id).len();
        for e in 0..n {
            let orig = store.value(*id).data()[e];
            store.get_mut(*id).value.data_mut()[e] = orig + h;
            let fp = eval(store)?;
            store.get_mut(*id).value.data_mut()[e] = orig - h;
            let fm = eval(store)?;
            store.get_mut(*id).value.data_mut()[e] = orig;

            let numeric = (fp - fm) / (2.0 * h);
            let (name, role, grads) = &analytic[idx];
            let err = rel_err(grads[e], numeric);
            let slot = per_role.entry(role.clone()).or_insert(0.0);
            *slot = slot.max(err);
            if err > max_rel_err {
                max_rel_err = err;
                worst_param = name.clone();
            }
            elements += 1;
        }
    }

    Ok(GradCheckReport {
        per_role,
        max_rel_err,
        worst_param,
        elements,
    })
}
