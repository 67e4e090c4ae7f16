//! Finite-difference verification of analytic gradients.
//!
//! Central differences over every scalar in the chosen parameter set.
//! Intended for f64 models on tiny inputs; the closure recomputes the full
//! loss after each perturbation.

use std::collections::BTreeMap;

use super::store::{ParamId, ParamStore};
use crate::scalar::Scalar;

/// Snapshot the current gradients of `ids` keyed by parameter name.
pub fn grads_by_name<T: Scalar>(
    store: &ParamStore<T>,
    ids: &[ParamId],
) -> BTreeMap<String, Vec<f64>> {
    ids.iter()
        .map(|&id| {
            (
                store.name(id).to_string(),
                store.grad(id).iter().map(|g| g.to_f64_lossy()).collect(),
            )
        })
        .collect()
}

/// Central finite differences of `loss` with respect to every scalar in
/// `ids`. Parameter values are restored exactly after each probe.
pub fn finite_diff_grads<T: Scalar>(
    store: &mut ParamStore<T>,
    ids: &[ParamId],
    eps: f64,
    mut loss: impl FnMut(&ParamStore<T>) -> f64,
) -> BTreeMap<String, Vec<f64>> {
    let mut out = BTreeMap::new();
    for &id in ids {
        let n = store.value(id).len();
        let mut grads = Vec::with_capacity(n);
        for i in 0..n {
            let orig = store.value(id)[i];
            store.value_mut(id)[i] = orig + T::from_f64_lossy(eps);
            let up = loss(store);
            store.value_mut(id)[i] = orig - T::from_f64_lossy(eps);
            let down = loss(store);
            store.value_mut(id)[i] = orig;
            grads.push((up - down) / (2.0 * eps));
        }
        out.insert(store.name(id).to_string(), grads);
    }
    out
}

/// One gradient entry that exceeded tolerance.
#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Comparison outcome across all checked scalars.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub mismatches: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Compare analytic vs numeric gradients entry-by-entry. An entry passes
/// when `|a - n| <= atol + rtol * max(|a|, |n|)`.
pub fn compare_grads(
    analytic: &BTreeMap<String, Vec<f64>>,
    numeric: &BTreeMap<String, Vec<f64>>,
    rtol: f64,
    atol: f64,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        checked: 0,
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        mismatches: Vec::new(),
    };
    for (name, nums) in numeric {
        let ans = analytic
            .get(name)
            .unwrap_or_else(|| panic!("no analytic gradient for `{name}`"));
        assert_eq!(ans.len(), nums.len(), "length mismatch for `{name}`");
        for (i, (&a, &n)) in ans.iter().zip(nums).enumerate() {
            report.checked += 1;
            let abs = (a - n).abs();
            let scale = a.abs().max(n.abs());
            report.max_abs_err = report.max_abs_err.max(abs);
            if scale > 0.0 {
                report.max_rel_err = report.max_rel_err.max(abs / scale);
            }
            if abs > atol + rtol * scale {
                report.mismatches.push(GradMismatch {
                    name: name.clone(),
                    index: i,
                    analytic: a,
                    numeric: n,
                });
            }
        }
    }
    report
}
