//! Greedy bijection MSE set loss, and a Hungarian assignment for comparison.
//!
//! The greedy procedure walks predictions in index order, matches each to
//! the most similar remaining ground truth (ties to the smallest index),
//! accumulates that MSE and divides the total by the set size.

use crate::autodiff::{AutodiffError, Real, Tape, Tensor, Var};
use crate::dsp::Spectrogram;

#[derive(Debug, thiserror::Error)]
pub enum BijectionError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Square matrix with `sim[i][j] = MSE(pred_i, truth_j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimMatrix {
    s: usize,
    values: Vec<f64>,
}

impl SimMatrix {
    /// Row-major `s × s` values; every entry must be finite and ≥ 0.
    pub fn new(s: usize, values: Vec<f64>) -> Result<Self, BijectionError> {
        if values.len() != s * s {
            return Err(BijectionError::Contract(format!("{} entries for a {s}×{s} matrix", values.len())));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(BijectionError::Contract(format!("entry {v} is not a finite non-negative cost")));
        }
        Ok(Self { s, values })
    }

    pub fn size(&self) -> usize {
        self.s
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.s + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mean cost of an assignment `pred i → truth assignment[i]`.
    pub fn cost(&self, assignment: &[usize]) -> f64 {
        assignment.iter().enumerate().map(|(i, &j)| self.get(i, j)).sum::<f64>() / self.s as f64
    }
}

fn mse_slices<T: Real>(a: &[T], b: &[T]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2)).sum();
    s / a.len() as f64
}

/// Pairwise MSE between two equally sized sets of equally shaped arrays.
pub fn pairwise_mse_slices<T: Real>(preds: &[&[T]], truths: &[&[T]]) -> Result<SimMatrix, BijectionError> {
    let s = preds.len();
    if truths.len() != s {
        return Err(BijectionError::Contract(format!("{s} predictions for {} ground truths", truths.len())));
    }
    if s == 0 {
        return Err(BijectionError::Contract("empty source set".into()));
    }
    let n = preds[0].len();
    if n == 0 || preds.iter().chain(truths).any(|x| x.len() != n) {
        return Err(BijectionError::Shape("all sources must share one non-empty shape".into()));
    }
    let mut values = Vec::with_capacity(s * s);
    for p in preds {
        for t in truths {
            values.push(mse_slices(p, t));
        }
    }
    SimMatrix::new(s, values)
}

pub fn pairwise_mse(preds: &[Spectrogram], truths: &[Spectrogram]) -> Result<SimMatrix, BijectionError> {
    if let Some(bad) = preds.iter().chain(truths).find(|x| x.shape() != preds[0].shape()) {
        return Err(BijectionError::Shape(format!("{:?} vs {:?}", bad.shape(), preds[0].shape())));
    }
    let p: Vec<&[f64]> = preds.iter().map(Spectrogram::data).collect();
    let t: Vec<&[f64]> = truths.iter().map(Spectrogram::data).collect();
    pairwise_mse_slices(&p, &t)
}

/// Greedy assignment over a similarity matrix: `(loss / s, assignment)`.
pub fn greedy_assign(sim: &SimMatrix) -> (f64, Vec<usize>) {
    let s = sim.size();
    let mut free = vec![true; s];
    let mut assignment = Vec::with_capacity(s);
    let mut total = 0.0;
    for i in 0..s {
        let mut best: Option<usize> = None;
        for j in (0..s).filter(|&j| free[j]) {
            if best.is_none_or(|b| sim.get(i, j) < sim.get(i, b)) {
                best = Some(j);
            }
        }
        let j = best.expect("one free column per remaining row");
        free[j] = false;
        total += sim.get(i, j);
        assignment.push(j);
    }
    (total / s as f64, assignment)
}

pub fn greedy_bijection_loss(preds: &[Spectrogram], truths: &[Spectrogram]) -> Result<(f64, Vec<usize>), BijectionError> {
    Ok(greedy_assign(&pairwise_mse(preds, truths)?))
}

/// Minimum-cost perfect matching (O(s³) shortest augmenting paths), cost
/// divided by `s`.
pub fn hungarian_loss(sim: &SimMatrix) -> (f64, Vec<usize>) {
    let n = sim.size();
    // 1-based potentials; column 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = sim.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[row_of[j] - 1] = j - 1;
    }
    (sim.cost(&assignment), assignment)
}

/// Greedy bijection loss on tape: the assignment is chosen from the current
/// values and frozen, and only the selected MSE terms enter the graph.
/// Returns the loss node and the assignment.
pub fn greedy_bijection_on_tape<T: Real>(
    tape: &Tape<T>,
    preds: &[Var],
    truths: &[Tensor<T>],
) -> Result<(Var, Vec<usize>), BijectionError> {
    let values: Vec<Tensor<T>> = preds.iter().map(|&p| tape.value(p).clone()).collect();
    for (p, t) in values.iter().zip(truths) {
        if p.shape() != t.shape() {
            return Err(BijectionError::Shape(format!("prediction {:?} vs truth {:?}", p.shape(), t.shape())));
        }
    }
    let p: Vec<&[T]> = values.iter().map(Tensor::data).collect();
    let t: Vec<&[T]> = truths.iter().map(Tensor::data).collect();
    let (_, assignment) = greedy_assign(&pairwise_mse_slices(&p, &t)?);
    let mut total: Option<Var> = None;
    for (i, &j) in assignment.iter().enumerate() {
        let term = tape.mse(preds[i], &truths[j])?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let total = total.expect("non-empty set");
    Ok((tape.scale(total, T::lit(1.0 / preds.len() as f64)), assignment))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_vs_optimal_hand_trace() {
        let sim = SimMatrix::new(2, vec![1.0, 2.0, 0.5, 3.0]).unwrap();
        let (g, ga) = greedy_assign(&sim);
        assert_eq!((g, ga), (2.0, vec![0, 1]));
        let (h, ha) = hungarian_loss(&sim);
        assert_eq!((h, ha), (1.25, vec![1, 0]));
    }

    #[test]
    fn ties_go_to_smallest_index() {
        let sim = SimMatrix::new(3, vec![1.0; 9]).unwrap();
        assert_eq!(greedy_assign(&sim).1, vec![0, 1, 2]);
    }

    #[test]
    fn constant_field_entry() {
        let zeros = [0.0f64; 6];
        let cs = [1.5f64; 6];
        let sim = pairwise_mse_slices(&[&zeros[..]], &[&cs[..]]).unwrap();
        assert_eq!(sim.get(0, 0), 2.25);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(SimMatrix::new(2, vec![0.0; 3]).is_err());
        assert!(SimMatrix::new(1, vec![-1.0]).is_err());
        let a = [0.0f64; 4];
        let b = [0.0f64; 3];
        assert!(matches!(pairwise_mse_slices(&[&a[..]], &[&b[..]]), Err(BijectionError::Shape(_))));
        assert!(matches!(pairwise_mse_slices(&[&a[..]], &[&a[..], &a[..]]), Err(BijectionError::Contract(_))));
    }

    #[test]
    fn tape_loss_matches_value_and_assignment() {
        let tape = Tape::<f64>::new();
        let truths = vec![Tensor::full(&[2, 3], 1.0), Tensor::full(&[2, 3], -2.0)];
        let preds = [tape.input(Tensor::full(&[2, 3], -1.5)), tape.input(Tensor::full(&[2, 3], 0.5))];
        let (loss, assignment) = greedy_bijection_on_tape(&tape, &preds, &truths).unwrap();
        assert_eq!(assignment, vec![1, 0]);
        assert!((tape.scalar(loss) - (0.25 + 0.25) / 2.0).abs() < 1e-15);
    }
}
