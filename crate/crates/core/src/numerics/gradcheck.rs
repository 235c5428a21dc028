//! Central-difference verification of tape gradients.

use super::params::ParameterStore;
use super::tape::{Tape, Var};
use crate::error::Result;

/// Per-element comparison of analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `(parameter, flat index, analytic, numeric, relative error)`.
    pub entries: Vec<(String, usize, f64, f64, f64)>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }

    pub fn worst(&self) -> Option<&(String, usize, f64, f64, f64)> {
        self.entries
            .iter()
            .max_by(|a, b| a.4.total_cmp(&b.4))
    }
}

/// Options for [`grad_check`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so that gradients near
    /// zero are compared absolutely instead of amplifying rounding noise.
    pub denom_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            denom_floor: 1e-6,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks every scalar of every parameter in `store`. `f` must build a
/// scalar loss on the given tape from the parameters and be deterministic.
pub fn grad_check<F>(store: &ParameterStore, opts: GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &ParameterStore) -> Result<Var<'t>>,
{
    let names: Vec<String> = store.names().map(str::to_string).collect();
    grad_check_subset(store, &names, opts, f)
}

/// As [`grad_check`], restricted to the named parameters.
pub fn grad_check_subset<F>(
    store: &ParameterStore,
    names: &[String],
    opts: GradCheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &ParameterStore) -> Result<Var<'t>>,
{
    let mut analytic_store = store.clone();
    {
        let tape = Tape::new();
        let loss = f(&tape, store)?;
        tape.backward(loss, &mut analytic_store)?;
    }
    let eval = |s: &ParameterStore| -> Result<f64> {
        let tape = Tape::new();
        Ok(f(&tape, s)?.item())
    };
    let mut probe = store.clone();
    let mut entries = Vec::new();
    let mut max_rel_err: f64 = 0.0;
    for name in names {
        let n = store.get(name).map_or(0, |t| t.numel());
        let grad = analytic_store.grad(name).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        for i in 0..n {
            let orig = store.get(name).expect("name from store").data()[i];
            probe.get_mut(name).expect("name from store").data_mut()[i] = orig + opts.step;
            let plus = eval(&probe)?;
            probe.get_mut(name).expect("name from store").data_mut()[i] = orig - opts.step;
            let minus = eval(&probe)?;
            probe.get_mut(name).expect("name from store").data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let rel = relative_error(grad[i], numeric, opts.denom_floor);
            max_rel_err = max_rel_err.max(rel);
            entries.push((name.clone(), i, grad[i], numeric, rel));
        }
    }
    Ok(GradCheckReport {
        entries,
        max_rel_err,
        tol: opts.tol,
    })
}
