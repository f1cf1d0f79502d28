use rand::seq::index;

use super::{AutodiffError, ParamSet, Tape, Tensor, Var};
use crate::seed;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// Label of the worst coordinate.
    pub worst: String,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_pair: (f64, f64),
}

impl GradCheckReport {
    fn new() -> Self {
        Self { max_rel_err: 0.0, coords_checked: 0, worst: String::new(), worst_pair: (0.0, 0.0) }
    }

    fn merge(&mut self, analytic: f64, numeric: f64, label: &str) {
        let rel = rel_err(analytic, numeric);
        self.coords_checked += 1;
        if rel > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = self.max_rel_err.max(rel);
            self.worst = label.to_string();
            self.worst_pair = (analytic, numeric);
        }
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn finite(v: f64, what: &str) -> Result<f64, AutodiffError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(AutodiffError::Numeric(format!("{what} evaluated to {v}")))
    }
}

/// Coordinates to probe: all of them, or `limit` distinct ones chosen by `seed`.
fn coords(numel: usize, limit: Option<usize>, seed: u64) -> Vec<usize> {
    match limit {
        Some(k) if k < numel => {
            let mut v = index::sample(&mut seed::rng(seed), numel, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..numel).collect(),
    }
}

/// Compares the gradient of scalar `f` at `x` against central differences
/// with step `h`. `limit` caps the number of probed coordinates.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64, limit: Option<usize>, seed: u64) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&Tape<f64>, Var) -> Result<Var, AutodiffError>,
{
    let eval = |t: &Tensor<f64>| -> Result<f64, AutodiffError> {
        let tape = Tape::new();
        let xv = tape.input(t.clone());
        let y = f(&tape, xv)?;
        finite(tape.scalar(y), "objective")
    };
    let tape = Tape::new();
    let xv = tape.input(x.clone());
    let y = f(&tape, xv)?;
    finite(tape.scalar(y), "objective")?;
    let grads = tape.backward(y)?;
    let analytic = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let mut report = GradCheckReport::new();
    let mut probe = x.clone();
    for i in coords(x.numel(), limit, seed) {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        report.merge(finite(analytic.data()[i], "gradient")?, numeric, &format!("x[{i}]"));
    }
    Ok(report)
}

/// Objective of [`finite_diff_params`]: the scalar `loss` is differentiated
/// by the tape, while the numeric derivative differences `terms`, whose
/// elements must sum to the loss. Differencing each small term before
/// summing avoids rounding the whole objective to a single `f64`, which
/// would otherwise floor the numeric derivative at about `ulp(loss) / h`.
pub struct Probe {
    pub loss: Var,
    pub terms: Vec<Var>,
}

impl Probe {
    /// The loss is its own single term.
    pub fn scalar(loss: Var) -> Self {
        Self { loss, terms: vec![loss] }
    }
}

fn term_values(tape: &Tape<f64>, probe: &Probe) -> Result<Vec<f64>, AutodiffError> {
    let mut out = Vec::new();
    for &t in &probe.terms {
        out.extend_from_slice(tape.value(t).data());
    }
    for &v in &out {
        finite(v, "objective term")?;
    }
    Ok(out)
}

/// Same comparison for every tensor of a parameter set. `f` must build its
/// graph from `tape.param(params, id)` leaves.
pub fn finite_diff_params<F>(
    f: F,
    params: &mut ParamSet<f64>,
    h: f64,
    limit_per_param: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&Tape<f64>, &ParamSet<f64>) -> Result<Probe, AutodiffError>,
{
    let eval = |p: &ParamSet<f64>| -> Result<Vec<f64>, AutodiffError> {
        let tape = Tape::new();
        let probe = f(&tape, p)?;
        term_values(&tape, &probe)
    };
    let tape = Tape::new();
    let probe = f(&tape, params)?;
    finite(tape.scalar(probe.loss), "objective")?;
    let grads = tape.backward(probe.loss)?;
    let mut analytic: Vec<Option<Tensor<f64>>> = vec![None; params.len()];
    for (id, g) in grads.params() {
        analytic[id.0] = Some(g.clone());
    }
    drop(tape);
    let mut report = GradCheckReport::new();
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let numel = params.value(id).numel();
        let name = params.name(id).to_string();
        for i in coords(numel, limit_per_param, seed::derive(seed, id.0 as u64)) {
            let orig = params.value(id).data()[i];
            params.value_mut(id).data_mut()[i] = orig + h;
            let fp = eval(params)?;
            params.value_mut(id).data_mut()[i] = orig - h;
            let fm = eval(params)?;
            params.value_mut(id).data_mut()[i] = orig;
            let diff: f64 = fp.iter().zip(&fm).map(|(a, b)| a - b).sum();
            let numeric = diff / (2.0 * h);
            let a = analytic[id.0].as_ref().map_or(0.0, |g| g.data()[i]);
            report.merge(finite(a, "gradient")?, numeric, &format!("{name}[{i}]"));
        }
    }
    Ok(report)
}
