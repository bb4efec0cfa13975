//! Central finite-difference verification of tape gradients.

use crate::error::Result;
use crate::params::{ParamId, ParameterStore};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(1e-8, |numeric|)` over all entries.
    pub max_rel_error: f64,
    /// Parameter and flat entry index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric gradient at the worst entry.
    pub worst_values: Option<(f64, f64)>,
    pub entries: usize,
    /// `(analytic, numeric)` for every checked entry, in store order.
    pub pairs: Vec<(f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }

    /// Maximum relative error recomputed with a larger denominator floor.
    pub fn max_rel_error_with_floor(&self, floor: f64) -> f64 {
        self.pairs
            .iter()
            .map(|&(a, c)| (a - c).abs() / c.abs().max(floor))
            .fold(0.0, |m, e| if m.is_nan() || e.is_nan() { f64::NAN } else { m.max(e) })
    }
}

/// Compares the tape gradient of `f` against central differences with step `h`
/// for every entry of every parameter in `store`. A NaN anywhere makes the
/// reported error NaN, which fails any tolerance.
///
/// The store's gradients are overwritten with the analytic gradient.
pub fn finite_diff_check<F>(store: &mut ParameterStore, h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&ParameterStore, &mut Tape) -> Result<Var>,
{
    let ids: Vec<ParamId> = store.ids().collect();
    finite_diff_check_subset(store, &ids, h, f)
}

/// As [`finite_diff_check`], restricted to the listed parameters.
pub fn finite_diff_check_subset<F>(
    store: &mut ParameterStore,
    ids: &[ParamId],
    h: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParameterStore, &mut Tape) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(store, &mut tape)?;
    tape.backward(loss, store)?;

    let eval = |s: &ParameterStore| -> Result<f64> {
        let mut t = Tape::new();
        let v = f(s, &mut t)?;
        Ok(t.value(v).values()[0])
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: None,
        entries: 0,
        pairs: Vec::new(),
    };
    #[allow(clippy::needless_range_loop)]
    for &id in ids {
        let analytic = store.get(id).grad().map(<[f64]>::to_vec).unwrap_or_default();
        for k in 0..store.get(id).len() {
            let orig = store.get(id).values()[k];
            store.get_mut(id).values_mut()[k] = orig + h;
            let plus = eval(store)?;
            store.get_mut(id).values_mut()[k] = orig - h;
            let minus = eval(store)?;
            store.get_mut(id).values_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let err = (analytic[k] - numeric).abs() / numeric.abs().max(1e-8);
            report.entries += 1;
            report.pairs.push((analytic[k], numeric));
            // once NaN, stays NaN
            if !report.max_rel_error.is_nan() && (err.is_nan() || err > report.max_rel_error) {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), k));
                report.worst_values = Some((analytic[k], numeric));
            }
        }
    }
    Ok(report)
}
