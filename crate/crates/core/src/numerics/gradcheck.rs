//! Central finite-difference checks against tape gradients.

use super::graph::{Gradients, ParamStore};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub entries_checked: usize,
    /// Per parameter: (name, max relative error, max |analytic gradient|).
    pub per_param: Vec<(String, f64, f64)>,
}

/// Options for [`check_gradients`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Denominator floor: errors are `|a − n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Check at most this many evenly strided entries per parameter.
    pub max_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
            max_per_param: None,
        }
    }
}

/// Compares `analytic` with central differences of `loss` around `store`.
pub fn check_gradients(
    store: &ParamStore<f64>,
    analytic: &Gradients<f64>,
    opts: GradCheckOptions,
    mut loss: impl FnMut(&ParamStore<f64>) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        entries_checked: 0,
        per_param: Vec::new(),
    };
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let numel = store.get(&name)?.numel();
        let stride = match opts.max_per_param {
            Some(k) if k > 0 && numel > k => numel.div_ceil(k),
            _ => 1,
        };
        let grad = analytic.get(&name)?;
        let mut worst = 0.0f64;
        let mut biggest = 0.0f64;
        for i in (0..numel).step_by(stride) {
            let orig = store.get(&name)?.data()[i];
            work.get_mut(&name)?.data_mut()[i] = orig + opts.step;
            let up = loss(&work)?;
            work.get_mut(&name)?.data_mut()[i] = orig - opts.step;
            let down = loss(&work)?;
            work.get_mut(&name)?.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            biggest = biggest.max(a.abs());
            worst = worst.max(rel);
            report.entries_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
        report.per_param.push((name, worst, biggest));
    }
    Ok(report)
}
