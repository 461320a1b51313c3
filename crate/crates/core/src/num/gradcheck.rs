//! Central finite-difference check of reverse-mode gradients.

use super::{Bound, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use alloc::string::String;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)
    pub max_rel_error: f64,
    /// Path and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

const REL_FLOOR: f64 = 1e-8;

/// Compares the tape gradient of `f` at `params` against
/// `(f(p + h) - f(p - h)) / 2h`, element by element over every parameter.
///
/// The perturbed evaluations replay the stop-gradient values of the
/// unperturbed tape, so both sides differentiate the same function.
pub fn grad_check<F>(f: F, params: &ParamStore, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    grad_check_paths(f, params, h, |_| true)
}

/// [`grad_check`] restricted to the parameters selected by `check`. Useful
/// when a parameter's true gradient is identically zero, so that both sides
/// are pure rounding noise and the relative error carries no information.
pub fn grad_check_paths<F>(f: F, params: &ParamStore, h: f64, check: impl Fn(&str) -> bool) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = g.bind(params, |_| true);
    let loss = f(&mut g, &bound)?;
    let grads = g.backward(loss);
    let analytic = bound.gradients(&g, &grads);

    let stops = g.stop_values();

    let eval = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::replaying(stops.clone());
        let bound = g.bind(p, |_| false);
        let v = f(&mut g, &bound)?;
        let out = g.value(v).item();
        if out.is_finite() {
            Ok(out)
        } else {
            Err(Error::NonFiniteInput)
        }
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0 };
    let mut probe = params.clone();
    for (path, t) in params.iter().filter(|(p, _)| check(p)) {
        let ad = analytic.get(path).expect("gradient for every bound path");
        for i in 0..t.numel() {
            let g_ad = ad.data()[i];
            if !g_ad.is_finite() {
                return Err(Error::GradientBlowUp { path: String::from(path) });
            }
            let orig = t.data()[i];
            probe.get_mut(path).unwrap().data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe.get_mut(path).unwrap().data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe.get_mut(path).unwrap().data_mut()[i] = orig;
            let g_fd = (plus - minus) / (2.0 * h);
            let rel = (g_ad - g_fd).abs() / REL_FLOOR.max(g_ad.abs() + g_fd.abs());
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((String::from(path), i));
            }
        }
    }
    Ok(report)
}
