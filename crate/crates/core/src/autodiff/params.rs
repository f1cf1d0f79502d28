use serde::{Deserialize, Serialize};

use super::{AutodiffError, Gradients, Real, Tensor};

/// Index of a parameter inside its [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
struct Param<T> {
    name: String,
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
}

/// Named trainable tensors with optional accumulated gradients.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param { name: name.into(), value, grad: None });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params[id.0].grad.as_ref()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Adds the parameter gradients of one backward pass to the stored ones.
    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<(), AutodiffError> {
        for (id, g) in grads.params() {
            self.accumulate_one(*id, g)?;
        }
        Ok(())
    }

    pub fn accumulate_one(&mut self, id: ParamId, g: &Tensor<T>) -> Result<(), AutodiffError> {
        let p = self
            .params
            .get_mut(id.0)
            .ok_or_else(|| AutodiffError::Contract(format!("unknown parameter {}", id.0)))?;
        if p.value.shape() != g.shape() {
            return Err(AutodiffError::Shape(format!(
                "gradient {:?} for parameter {} of shape {:?}",
                g.shape(),
                p.name,
                p.value.shape()
            )));
        }
        match &mut p.grad {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Same names and values in another float type.
    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast(), grad: p.grad.as_ref().map(Tensor::cast) })
                .collect(),
        }
    }

    /// `(name, value)` pairs in insertion order.
    pub fn named_values(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.value))
    }

    /// Overwrites every value from `(name, tensor)` pairs. Names and shapes
    /// must match exactly.
    pub fn load_named(&mut self, tensors: &[(String, Tensor<T>)]) -> Result<(), AutodiffError> {
        if tensors.len() != self.params.len() {
            return Err(AutodiffError::Checkpoint(format!(
                "{} tensors for {} parameters",
                tensors.len(),
                self.params.len()
            )));
        }
        for (p, (name, t)) in self.params.iter_mut().zip(tensors) {
            if &p.name != name || p.value.shape() != t.shape() {
                return Err(AutodiffError::Checkpoint(format!(
                    "expected {} {:?}, found {name} {:?}",
                    p.name,
                    p.value.shape(),
                    t.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments for one [`ParamSet`].
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamSet<T>, config: AdamConfig) -> Self {
        let zeros = || params.params.iter().map(|p| vec![T::zero(); p.value.numel()]).collect();
        Self { config, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update of every parameter, then clears the
    /// gradients. Every parameter must hold a gradient.
    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<(), AutodiffError> {
        if params.len() != self.m.len() {
            return Err(AutodiffError::Contract("optimizer built for a different parameter set".into()));
        }
        if let Some(p) = params.params.iter().find(|p| p.grad.is_none()) {
            return Err(AutodiffError::Contract(format!("parameter {} has no gradient", p.name)));
        }
        if let Some(p) = params.params.iter().find(|p| !p.grad.as_ref().is_some_and(Tensor::all_finite)) {
            return Err(AutodiffError::Numeric(format!("gradient of {}", p.name)));
        }
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.t as i32));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        for (i, p) in params.params.iter_mut().enumerate() {
            let g = p.grad.take().expect("checked above");
            for (((w, &gi), m), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(&mut self.m[i]).zip(&mut self.v[i]) {
                *m = b1 * *m + (T::one() - b1) * gi;
                *v = b2 * *v + (T::one() - b2) * gi * gi;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut ps = ParamSet::<f64>::new();
        let id = ps.add("w", Tensor::new(&[2], vec![3.0, -2.0]).unwrap());
        let mut opt = AdamState::new(&ps, AdamConfig { lr: 0.1, ..AdamConfig::default() });
        let target = Tensor::new(&[2], vec![1.0, 0.5]).unwrap();
        for _ in 0..500 {
            let tape = Tape::new();
            let w = tape.param(&ps, id);
            let loss = tape.mse(w, &target).unwrap();
            ps.accumulate(&tape.backward(loss).unwrap()).unwrap();
            opt.step(&mut ps).unwrap();
            assert!(ps.grad(id).is_none());
        }
        let w = ps.value(id).data();
        assert!((w[0] - 1.0).abs() < 1e-3 && (w[1] - 0.5).abs() < 1e-3, "{w:?}");
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut ps = ParamSet::<f64>::new();
        let id = ps.add("w", Tensor::new(&[3], vec![0.0; 3]).unwrap());
        ps.accumulate_one(id, &Tensor::new(&[3], vec![2.0, -0.5, 1e-3]).unwrap()).unwrap();
        let mut opt = AdamState::new(&ps, AdamConfig { lr: 0.01, ..AdamConfig::default() });
        opt.step(&mut ps).unwrap();
        // With bias correction the first step is lr·sign(g) up to eps.
        for (&w, s) in ps.value(id).data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((w - 0.01 * s).abs() < 1e-6, "{w}");
        }
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut ps = ParamSet::<f32>::new();
        ps.add("a", Tensor::zeros(&[1]));
        let mut opt = AdamState::new(&ps, AdamConfig::default());
        assert!(matches!(opt.step(&mut ps), Err(AutodiffError::Contract(_))));
    }

    #[test]
    fn load_named_checks_names_and_shapes() {
        let mut ps = ParamSet::<f32>::new();
        ps.add("a", Tensor::zeros(&[2]));
        assert!(ps.load_named(&[("b".into(), Tensor::zeros(&[2]))]).is_err());
        assert!(ps.load_named(&[("a".into(), Tensor::zeros(&[3]))]).is_err());
        ps.load_named(&[("a".into(), Tensor::full(&[2], 4.0))]).unwrap();
        assert_eq!(ps.value(ParamId(0)).data(), &[4.0, 4.0]);
    }
}
