//! Central finite-difference gradient checking.
//!
//! Numerical derivatives are obtained purely from forward evaluations, so
//! they are independent of every backward rule on the tape.

use crate::error::Result;
use crate::param::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, REL_ERROR_FLOOR)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor index, element index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

impl GradCheckReport {
    fn record(&mut self, tensor: usize, elem: usize, analytic: f64, numeric: f64) {
        let e = rel_error(analytic, numeric);
        self.checked += 1;
        if self.worst.is_none() || e > self.max_rel_error {
            self.max_rel_error = e;
            self.worst = Some((tensor, elem, analytic, numeric));
        }
    }
}

/// Evenly spaced element indices, at most `limit` of them.
fn sample_indices(numel: usize, limit: usize) -> Vec<usize> {
    if numel <= limit {
        return (0..numel).collect();
    }
    (0..limit).map(|i| i * numel / limit).collect()
}

/// Checks gradients of `f` with respect to every element of `inputs`.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out, None)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for ti in 0..inputs.len() {
        for ei in 0..inputs[ti].numel() {
            let orig = work[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + h;
            let plus = eval(&work)?;
            work[ti].data_mut()[ei] = orig - h;
            let minus = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            report.record(ti, ei, analytic[ti][ei], (plus - minus) / (2.0 * h));
        }
    }
    Ok(report)
}

/// Checks parameter gradients of a scalar function of `store`, probing at
/// most `per_param` evenly spaced elements of each parameter.
pub fn check_params<F>(store: &ParamStore<f64>, h: f64, per_param: usize, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut base = store.clone();
    base.zero_grad();
    let mut tape = Tape::new();
    let out = f(&mut tape, &base)?;
    tape.backward(out, Some(&mut base))?;

    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    for (pi, p) in base.iter().enumerate() {
        let zeros;
        let analytic = match p.tensor.grad() {
            Some(g) => g,
            None => {
                zeros = vec![0.0; p.tensor.numel()];
                &zeros
            }
        };
        let id = crate::param::ParamId(pi);
        for ei in sample_indices(p.tensor.numel(), per_param) {
            let orig = work.get(id).tensor.data()[ei];
            work.get_mut(id).tensor.data_mut()[ei] = orig + h;
            let mut t = Tape::new();
            let o = f(&mut t, &work)?;
            let plus = t.value(o).item();
            work.get_mut(id).tensor.data_mut()[ei] = orig - h;
            let mut t = Tape::new();
            let o = f(&mut t, &work)?;
            let minus = t.value(o).item();
            work.get_mut(id).tensor.data_mut()[ei] = orig;
            report.record(pi, ei, analytic[ei], (plus - minus) / (2.0 * h));
        }
    }
    Ok(report)
}
