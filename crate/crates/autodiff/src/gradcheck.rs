//! Finite-difference gradient checks against a [`ParamStore`].

use crate::{GradStore, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`
    Central { h: f64 },
    /// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`
    FivePoint { h: f64 },
}

impl Default for Stencil {
    fn default() -> Self {
        Stencil::Central { h: 1e-4 }
    }
}

/// `|g - fd| / (|fd| + 1e-8)`
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + 1e-8)
}

/// Numerical derivative of `f` with respect to one scalar of one parameter.
pub fn numeric_partial(store: &mut ParamStore, id: ParamId, index: usize, stencil: Stencil, f: &dyn Fn(&ParamStore) -> f64) -> f64 {
    let orig = store.value(id).data()[index];
    let mut eval = |delta: f64| {
        store.value_mut(id).data_mut()[index] = orig + delta;
        f(store)
    };
    let d = match stencil {
        Stencil::Central { h } => (eval(h) - eval(-h)) / (2.0 * h),
        Stencil::FivePoint { h } => (-eval(2.0 * h) + 8.0 * eval(h) - 8.0 * eval(-h) + eval(-2.0 * h)) / (12.0 * h),
    };
    store.value_mut(id).data_mut()[index] = orig;
    d
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Compares `analytic` with finite differences of `f` for every scalar of every
/// parameter. Scalars whose `stencil` error exceeds `tol` are re-measured with
/// `fallback` when given, and the smaller error is kept.
pub fn check_store(
    store: &ParamStore,
    analytic: &GradStore,
    f: &dyn Fn(&ParamStore) -> f64,
    stencil: Stencil,
    fallback: Option<Stencil>,
    tol: f64,
) -> Vec<ParamCheck> {
    let mut work = store.clone();
    let ids: Vec<ParamId> = store.ids().collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.value(id).len();
        let mut report = ParamCheck {
            name: store.get(id).name.clone(),
            checked: n,
            max_rel_error: 0.0,
            worst_index: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for i in 0..n {
            let g = analytic.get(id).map_or(0.0, |g| g.data()[i]);
            let mut fd = numeric_partial(&mut work, id, i, stencil, f);
            let mut err = rel_error(g, fd);
            if err > tol {
                if let Some(fb) = fallback {
                    let fd2 = numeric_partial(&mut work, id, i, fb, f);
                    let err2 = rel_error(g, fd2);
                    if err2 < err {
                        fd = fd2;
                        err = err2;
                    }
                }
            }
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_index = i;
                report.worst_analytic = g;
                report.worst_numeric = fd;
            }
        }
        out.push(report);
    }
    out
}
