use super::{Float, Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor: the error for a coordinate is
    /// `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
    /// Check at most this many coordinates per tensor, spread evenly.
    pub max_coords_per_tensor: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-6, floor: 1e-6, max_coords_per_tensor: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(tensor index, flat coordinate)` where the worst error occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

fn coords(len: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(n) if n < len => {
            // evenly spaced, always including both ends
            let n = n.max(2);
            let mut v: Vec<usize> = (0..n).map(|i| i * (len - 1) / (n - 1)).collect();
            v.dedup();
            v
        }
        _ => (0..len).collect(),
    }
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences `(f(θ+h) − f(θ−h)) / 2h`, coordinate by coordinate.
pub fn grad_check<F, L>(loss: L, params: &[Tensor<F>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Float,
    L: for<'g> Fn(&'g Graph<F>, &[Var<'g, F>]) -> Result<Var<'g, F>>,
{
    let analytic: Vec<Tensor<F>> = {
        let g = Graph::new();
        let vars: Vec<Var<'_, F>> = params.iter().map(|p| g.param(p.clone())).collect();
        let out = loss(&g, &vars)?;
        let grads = g.backward(out)?;
        vars.iter().map(|v| grads.get_or_zeros(*v)).collect()
    };
    let eval = |ps: &[Tensor<F>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var<'_, F>> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let out = loss(&g, &vars)?;
        let v = out.value().item().as_f64();
        Ok(v)
    };
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0, checked: 0 };
    let mut work = params.to_vec();
    for (ti, p) in params.iter().enumerate() {
        for ci in coords(p.len(), opts.max_coords_per_tensor) {
            let x = p.data()[ci];
            work[ti] = p.with_value(ci, x + F::from_f64(opts.step));
            let plus = eval(&work)?;
            work[ti] = p.with_value(ci, x - F::from_f64(opts.step));
            let minus = eval(&work)?;
            work[ti] = p.clone();
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[ti].data()[ci].as_f64();
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite(format!(
                    "tensor {ti} coordinate {ci}: analytic {a}, numeric {numeric}"
                )));
            }
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if err > report.max_rel_err || report.checked == 1 {
                report.max_rel_err = err;
                report.worst = (ti, ci);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
