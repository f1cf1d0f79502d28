//! Finite-difference verification of every differentiable operation and of
//! the full model with its set loss, in 64-bit.

use rand::Rng;

use crate::autodiff::{finite_diff_params, AutodiffError, GradCheckReport, ParamSet, Probe, Tape, Tensor, Var};
use crate::bijection::{greedy_bijection_on_tape, BijectionError};
use crate::seed;
use crate::stt::{SttConfig, SttError, SttModel};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Maximum relative error accepted for a single operation.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Maximum relative error accepted for the whole model.
pub const MODEL_TOLERANCE: f64 = 1e-4;

#[derive(Debug, thiserror::Error)]
pub enum GradSuiteError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] SttError),
    #[error(transparent)]
    Loss(#[from] BijectionError),
}

#[derive(Clone, Debug)]
pub struct OpCheck {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.report.max_rel_err <= OP_TOLERANCE
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = seed::rng(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

type OpFn = dyn Fn(&Tape<f64>, &[Var]) -> Result<Var, AutodiffError>;

/// Checks `op` on random inputs of the given shapes through the objective
/// `sum(op(inputs) ⊙ r)` with a fixed random `r`.
fn check_op(name: &'static str, shapes: &[&[usize]], seed: u64, op: &OpFn) -> Result<OpCheck, AutodiffError> {
    let mut ps = ParamSet::new();
    let ids: Vec<_> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| ps.add(format!("{name}.in{i}"), random(s, seed::derive(seed, i as u64))))
        .collect();
    let proj_seed = seed::derive(seed, 1000);
    let objective = |tape: &Tape<f64>, ps: &ParamSet<f64>| {
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(ps, id)).collect();
        let y = op(tape, &vars)?;
        let r = tape.constant(random(&tape.shape(y), proj_seed));
        let weighted = tape.mul(y, r)?;
        Ok(Probe { loss: tape.sum(weighted), terms: vec![weighted] })
    };
    let report = finite_diff_params(objective, &mut ps, STEP, None, seed)?;
    Ok(OpCheck { name, report })
}

/// Runs the finite-difference check for every operation.
pub fn op_suite(seed: u64) -> Result<Vec<OpCheck>, AutodiffError> {
    let mse_target = random(&[3, 4], seed::derive(seed, 77));
    let cases: Vec<(&'static str, Vec<&[usize]>, Box<OpFn>)> = vec![
        ("matmul", vec![&[3, 4], &[4, 2]], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("transpose", vec![&[3, 5]], Box::new(|t, v| t.transpose(v[0]))),
        ("reshape", vec![&[2, 6]], Box::new(|t, v| t.reshape(v[0], &[3, 4]))),
        ("add", vec![&[3, 4], &[3, 4]], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![&[3, 4], &[3, 4]], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![&[3, 4], &[3, 4]], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("scale", vec![&[3, 4]], Box::new(|t, v| Ok(t.scale(v[0], 0.7)))),
        ("relu", vec![&[4, 5]], Box::new(|t, v| Ok(t.relu(v[0])))),
        ("softmax", vec![&[3, 5]], Box::new(|t, v| t.softmax(v[0]))),
        ("layer_norm", vec![&[4, 6], &[6], &[6]], Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-8))),
        ("linear", vec![&[5, 3], &[3, 4], &[4]], Box::new(|t, v| t.linear(v[0], v[1], Some(v[2])))),
        ("conv1d_same", vec![&[7, 3], &[3, 3, 4], &[4]], Box::new(|t, v| t.conv1d_same(v[0], v[1], Some(v[2])))),
        ("conv1d_same_k5", vec![&[6, 2], &[5, 2, 3]], Box::new(|t, v| t.conv1d_same(v[0], v[1], None))),
        ("dropout_eval", vec![&[3, 4]], Box::new(|t, v| t.dropout(v[0], 0.5, None))),
        (
            "dropout_train",
            vec![&[3, 4]],
            Box::new(|t, v| {
                let mut r = seed::rng(7);
                t.dropout(v[0], 0.5, Some(&mut r))
            }),
        ),
        ("self_attention", vec![&[5, 8]], Box::new(|t, v| t.attention(v[0], v[0], v[0], 2))),
        ("cross_attention", vec![&[4, 8], &[6, 8], &[6, 8]], Box::new(|t, v| t.attention(v[0], v[1], v[2], 2))),
        ("sum", vec![&[3, 4]], Box::new(|t, v| Ok(t.sum(v[0])))),
        ("mean", vec![&[3, 4]], Box::new(|t, v| t.mean(v[0]))),
        ("mse", vec![&[3, 4]], Box::new(move |t, v| t.mse(v[0], &mse_target))),
        ("select_last", vec![&[3, 4, 2]], Box::new(|t, v| t.select_last(v[0], 1))),
    ];
    cases
        .into_iter()
        .enumerate()
        .map(|(i, (name, shapes, op))| check_op(name, &shapes, seed::derive(seed, i as u64), op.as_ref()))
        .collect()
}

/// Finite-difference check of the model's parameters through the greedy
/// bijection loss on a random mixture and random targets. `limit_per_param`
/// caps the probed coordinates of each tensor.
pub fn model_check(cfg: &SttConfig, seed: u64, limit_per_param: Option<usize>) -> Result<GradCheckReport, GradSuiteError> {
    let mut model = SttModel::<f64>::new(cfg.clone(), seed)?;
    model.randomize_head(seed::derive(seed, 2));
    let shape = [cfg.frames, cfg.height];
    let mixture = random(&shape, seed::derive(seed, 1));
    let truths: Vec<Tensor<f64>> = (0..cfg.sources).map(|k| random(&shape, seed::derive(seed, 10 + k as u64))).collect();
    let objective = |tape: &Tape<f64>, ps: &ParamSet<f64>| -> Result<Probe, AutodiffError> {
        let pass = model.forward_with(ps, tape, &mixture, None).map_err(into_autodiff)?;
        let (loss, assignment) = greedy_bijection_on_tape(tape, &pass.sources, &truths).map_err(|e| match e {
            BijectionError::Autodiff(a) => a,
            other => AutodiffError::Contract(other.to_string()),
        })?;
        // Per-element squared residuals of the selected pairs, scaled so
        // that they sum to the loss.
        let scale = 1.0 / (cfg.sources * cfg.frames * cfg.height) as f64;
        let mut terms = Vec::with_capacity(assignment.len());
        for (i, &j) in assignment.iter().enumerate() {
            let d = tape.sub(pass.sources[i], tape.constant(truths[j].clone()))?;
            terms.push(tape.scale(tape.mul(d, d)?, scale));
        }
        Ok(Probe { loss, terms })
    };
    let mut ps = model.params().clone();
    Ok(finite_diff_params(objective, &mut ps, STEP, limit_per_param, seed)?)
}

fn into_autodiff(e: SttError) -> AutodiffError {
    match e {
        SttError::Autodiff(a) => a,
        other => AutodiffError::Contract(other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for c in op_suite(1).unwrap() {
            assert!(c.passed(), "{} {:?}", c.name, c.report);
        }
    }

    #[test]
    fn toy_model_passes_sampled() {
        let r = model_check(&SttConfig::toy(), 3, Some(4)).unwrap();
        assert!(r.max_rel_err <= MODEL_TOLERANCE, "{r:?}");
    }
}
