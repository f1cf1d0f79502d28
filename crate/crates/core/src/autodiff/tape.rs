//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its value and the information its backward rule needs. [`Var`] is a
//! plain index into the tape. [`Tape::backward`] walks the nodes in reverse
//! creation order, which is a valid topological order because a node can
//! only reference earlier nodes.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;

use rand::{Rng, RngCore};

use super::real::{gemm, MatMut, MatRef};
use super::{AutodiffError, ParamId, ParamSet, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Constant,
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv1d { x: Var, w: Var, b: Option<Var>, kernel: usize, cols: Vec<T> },
    Dropout { x: Var, mask: Vec<T> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    Sum(Var),
    Mean(Var),
    Mse { x: Var, target: Vec<T> },
    SelectLast { x: Var, index: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Result of [`Tape::backward`]: gradients for every node that requires
/// them, plus the per-parameter gradients.
#[derive(Debug)]
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> &[(ParamId, Tensor<T>)] {
        &self.params
    }

    pub fn into_params(self) -> Vec<(ParamId, Tensor<T>)> {
        self.params
    }
}

pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    param_vars: RefCell<HashMap<ParamId, Var>>,
    backward_done: Cell<bool>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<V>(msg: String) -> Result<V, AutodiffError> {
    Err(AutodiffError::Shape(msg))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            param_vars: RefCell::new(HashMap::new()),
            backward_done: Cell::new(false),
        }
    }

    /// Clears every node so the tape can record a new pass.
    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
        self.param_vars.borrow_mut().clear();
        self.backward_done.set(false);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = match op {
            Op::Constant => false,
            Op::Input | Op::Param(_) => true,
            _ => inputs.iter().any(|v| nodes[v.0].requires_grad),
        };
        nodes.push(Node { value, op, requires_grad });
        Var(nodes.len() - 1)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, &[])
    }

    /// A leaf whose gradient is reported by [`Gradients::get`].
    pub fn input(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, &[])
    }

    /// The leaf for parameter `id`; repeated calls return the same node.
    pub fn param(&self, params: &ParamSet<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.borrow().get(&id) {
            return v;
        }
        let v = self.push(params.value(id).clone(), Op::Param(id), &[]);
        self.param_vars.borrow_mut().insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        let nodes = self.nodes.borrow();
        nodes[v.0].value.data()[0]
    }

    /// Softmax weights of an attention node, laid out `heads × n × m`.
    pub fn attention_probs(&self, v: Var) -> Option<(Vec<T>, [usize; 3])> {
        let nodes = self.nodes.borrow();
        match &nodes[v.0].op {
            Op::Attention { q, k, heads, probs, .. } => {
                let n = nodes[q.0].value.shape()[0];
                let m = nodes[k.0].value.shape()[0];
                Some((probs.clone(), [*heads, n, m]))
            }
            _ => None,
        }
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let value = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let [m, k] = av.dims2()?;
            let [k2, n] = bv.dims2()?;
            if k != k2 {
                return shape_err(format!("matmul {:?} × {:?}", av.shape(), bv.shape()));
            }
            let mut out = vec![T::zero(); m * n];
            gemm(T::one(), MatRef::dense(av.data(), m, k), MatRef::dense(bv.data(), k, n), T::zero(), MatMut::dense(&mut out, m, n));
            Tensor::new(&[m, n], out)?
        };
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&self, a: Var) -> Result<Var, AutodiffError> {
        let value = self.nodes.borrow()[a.0].value.transpose2()?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let value = self.nodes.borrow()[a.0].value.clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    fn binary(&self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>, AutodiffError> {
        let nodes = self.nodes.borrow();
        let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
        if av.shape() != bv.shape() {
            return shape_err(format!("{what} {:?} vs {:?}", av.shape(), bv.shape()));
        }
        Ok(av.zip_map(bv, f))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let value = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let value = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(|x| x * c);
        self.push(value, Op::Scale(a, c), &[a])
    }

    pub fn relu(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(|x| x.max(T::zero()));
        self.push(value, Op::Relu(a), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, a: Var) -> Result<Var, AutodiffError> {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let d = x.last_dim();
            if d == 0 || x.numel() == 0 {
                return Err(AutodiffError::Config("softmax over an empty axis".into()));
            }
            let mut out = x.clone();
            out.data_mut().chunks_mut(d).for_each(softmax_row);
            out
        };
        Ok(self.push(value, Op::Softmax(a), &[a]))
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var, AutodiffError> {
        let (value, xhat, inv_std) = {
            let nodes = self.nodes.borrow();
            let (xv, g, b) = (&nodes[x.0].value, &nodes[gain.0].value, &nodes[bias.0].value);
            let d = xv.last_dim();
            if d == 0 || g.shape() != [d] || b.shape() != [d] {
                return shape_err(format!(
                    "layer_norm over {:?} with gain {:?}, bias {:?}",
                    xv.shape(),
                    g.shape(),
                    b.shape()
                ));
            }
            let dn = T::lit(d as f64);
            let mut xhat = vec![T::zero(); xv.numel()];
            let mut inv_std = Vec::with_capacity(xv.outer());
            let mut out = vec![T::zero(); xv.numel()];
            for (r, row) in xv.data().chunks(d).enumerate() {
                let mean = row.iter().copied().sum::<T>() / dn;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
                let is = T::one() / (var + eps).sqrt();
                inv_std.push(is);
                for j in 0..d {
                    let h = (row[j] - mean) * is;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * g.data()[j] + b.data()[j];
                }
            }
            (Tensor::new(xv.shape(), out)?, xhat, inv_std)
        };
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias]))
    }

    /// Affine map on the last axis: `x·w + b` with `w` of shape `in × out`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var, AutodiffError> {
        let value = {
            let nodes = self.nodes.borrow();
            let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
            let [din, dout] = wv.dims2()?;
            if xv.last_dim() != din || xv.rank() == 0 {
                return shape_err(format!("linear {:?} through {:?}", xv.shape(), wv.shape()));
            }
            let rows = xv.outer();
            let mut out = vec![T::zero(); rows * dout];
            gemm(T::one(), MatRef::dense(xv.data(), rows, din), MatRef::dense(wv.data(), din, dout), T::zero(), MatMut::dense(&mut out, rows, dout));
            if let Some(b) = b {
                let bv = &nodes[b.0].value;
                if bv.shape() != [dout] {
                    return shape_err(format!("linear bias {:?} for {dout} outputs", bv.shape()));
                }
                for row in out.chunks_mut(dout) {
                    for (o, &bb) in row.iter_mut().zip(bv.data()) {
                        *o += bb;
                    }
                }
            }
            let mut shape = xv.shape().to_vec();
            *shape.last_mut().expect("rank checked") = dout;
            Tensor::new(&shape, out)?
        };
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    /// Zero-padded convolution along the first axis of `x` (`len × c_in`)
    /// with odd kernel `w` (`k × c_in × c_out`); output is `len × c_out`.
    pub fn conv1d_same(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var, AutodiffError> {
        let (value, cols, kernel) = {
            let nodes = self.nodes.borrow();
            let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
            let [len, cin] = xv.dims2()?;
            let (k, wcin, cout) = match wv.shape() {
                &[k, a, b] => (k, a, b),
                s => return shape_err(format!("conv kernel must be 3-D, got {s:?}")),
            };
            if wcin != cin {
                return shape_err(format!("conv input {:?} with kernel {:?}", xv.shape(), wv.shape()));
            }
            if k % 2 == 0 {
                return Err(AutodiffError::Config(format!("same-size convolution needs an odd kernel, got {k}")));
            }
            let pad = k / 2;
            let width = k * cin;
            let mut cols = vec![T::zero(); len * width];
            for l in 0..len {
                for j in 0..k {
                    let src = l as isize + j as isize - pad as isize;
                    if src < 0 || src >= len as isize {
                        continue;
                    }
                    let src = src as usize;
                    cols[l * width + j * cin..l * width + (j + 1) * cin]
                        .copy_from_slice(&xv.data()[src * cin..(src + 1) * cin]);
                }
            }
            let mut out = vec![T::zero(); len * cout];
            gemm(T::one(), MatRef::dense(&cols, len, width), MatRef::dense(wv.data(), width, cout), T::zero(), MatMut::dense(&mut out, len, cout));
            if let Some(b) = b {
                let bv = &nodes[b.0].value;
                if bv.shape() != [cout] {
                    return shape_err(format!("conv bias {:?} for {cout} channels", bv.shape()));
                }
                for row in out.chunks_mut(cout) {
                    for (o, &bb) in row.iter_mut().zip(bv.data()) {
                        *o += bb;
                    }
                }
            }
            (Tensor::new(&[len, cout], out)?, cols, k)
        };
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(value, Op::Conv1d { x, w, b, kernel, cols }, &inputs))
    }

    /// Inverted dropout. Without an rng, or with rate 0, returns `x` itself.
    pub fn dropout(&self, x: Var, rate: f64, rng: Option<&mut dyn RngCore>) -> Result<Var, AutodiffError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        let Some(rng) = rng else { return Ok(x) };
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let (value, mask) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let mask: Vec<T> = (0..xv.numel())
                .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
                .collect();
            let out = Tensor::new(xv.shape(), xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect())?;
            (out, mask)
        };
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    /// Multi-head scaled dot-product attention. `q` is `n × d`, `k` and `v`
    /// are `m × d`; head `h` uses columns `[h·d/heads, (h+1)·d/heads)`.
    pub fn attention(&self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var, AutodiffError> {
        let (value, probs) = {
            let nodes = self.nodes.borrow();
            let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
            let [n, d] = qv.dims2()?;
            let [m, dk] = kv.dims2()?;
            if kv.shape() != vv.shape() || dk != d {
                return shape_err(format!(
                    "attention q {:?}, k {:?}, v {:?}",
                    qv.shape(),
                    kv.shape(),
                    vv.shape()
                ));
            }
            if heads == 0 || d % heads != 0 {
                return Err(AutodiffError::Config(format!("{heads} heads do not divide width {d}")));
            }
            if m == 0 {
                return Err(AutodiffError::Config("attention over an empty key set".into()));
            }
            let dh = d / heads;
            let scale = T::one() / T::lit(dh as f64).sqrt();
            let mut probs = vec![T::zero(); heads * n * m];
            let mut out = vec![T::zero(); n * d];
            for h in 0..heads {
                let p = &mut probs[h * n * m..(h + 1) * n * m];
                let qh = MatRef::cols(qv.data(), n, d, h * dh, dh);
                let kh = MatRef::cols(kv.data(), m, d, h * dh, dh);
                gemm(scale, qh, kh.t(), T::zero(), MatMut::dense(p, n, m));
                p.chunks_mut(m).for_each(softmax_row);
                let vh = MatRef::cols(vv.data(), m, d, h * dh, dh);
                gemm(T::one(), MatRef::dense(p, n, m), vh, T::zero(), MatMut::cols(&mut out, n, d, h * dh, dh));
            }
            (Tensor::new(&[n, d], out)?, probs)
        };
        Ok(self.push(value, Op::Attention { q, k, v, heads, probs }, &[q, k, v]))
    }

    pub fn sum(&self, a: Var) -> Var {
        let value = Tensor::scalar(self.nodes.borrow()[a.0].value.sum());
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn mean(&self, a: Var) -> Result<Var, AutodiffError> {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            if x.numel() == 0 {
                return Err(AutodiffError::Config("mean of an empty tensor".into()));
            }
            Tensor::scalar(x.sum() / T::lit(x.numel() as f64))
        };
        Ok(self.push(value, Op::Mean(a), &[a]))
    }

    /// Mean squared difference between `x` and a fixed target.
    pub fn mse(&self, x: Var, target: &Tensor<T>) -> Result<Var, AutodiffError> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            if xv.shape() != target.shape() {
                return shape_err(format!("mse {:?} vs target {:?}", xv.shape(), target.shape()));
            }
            if xv.numel() == 0 {
                return Err(AutodiffError::Config("mse of empty tensors".into()));
            }
            let s: T = xv.data().iter().zip(target.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
            Tensor::scalar(s / T::lit(xv.numel() as f64))
        };
        Ok(self.push(value, Op::Mse { x, target: target.data().to_vec() }, &[x]))
    }

    /// Slice `index` of the last axis; the result drops that axis.
    pub fn select_last(&self, x: Var, index: usize) -> Result<Var, AutodiffError> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            if xv.rank() < 2 {
                return shape_err(format!("select_last needs rank ≥ 2, got {:?}", xv.shape()));
            }
            let s = xv.last_dim();
            if index >= s {
                return shape_err(format!("index {index} out of last axis {s}"));
            }
            let data = xv.data().iter().skip(index).step_by(s).copied().collect();
            Tensor::new(&xv.shape()[..xv.rank() - 1], data)?
        };
        Ok(self.push(value, Op::SelectLast { x, index }, &[x]))
    }

    /// Backpropagates from a scalar `loss`. A tape can be differentiated once
    /// per recording; call [`Tape::reset`] before reusing it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, AutodiffError> {
        if self.backward_done.get() {
            return Err(AutodiffError::DoubleBackward);
        }
        let nodes = self.nodes.borrow();
        let root = nodes.get(loss.0).ok_or_else(|| AutodiffError::Contract("loss is not on this tape".into()))?;
        if root.value.numel() != 1 {
            return Err(AutodiffError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), T::one()));
        for id in (0..=loss.0).rev() {
            if !nodes[id].requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(pid) => grads[i].clone().map(|g| (pid, g)),
                _ => None,
            })
            .collect();
        self.backward_done.set(true);
        Ok(Gradients { nodes: grads, params })
    }
}

fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn accumulate<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Column sums of a `rows × cols` matrix.
fn col_sums<T: Real>(data: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for row in data.chunks(cols) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

fn backprop<T: Real>(nodes: &[Node<T>], id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let val = |v: Var| &nodes[v.0].value;
    let needs = |v: Var| nodes[v.0].requires_grad;
    let like = |v: Var, data: Vec<T>| Tensor::new(val(v).shape(), data).expect("gradient matches input shape");
    match &nodes[id].op {
        Op::Constant | Op::Input | Op::Param(_) => {}
        &Op::MatMul(a, b) => {
            let [m, k] = val(a).dims2().expect("checked in forward");
            let n = val(b).shape()[1];
            if needs(a) {
                let mut da = vec![T::zero(); m * k];
                gemm(T::one(), MatRef::dense(g.data(), m, n), MatRef::dense(val(b).data(), k, n).t(), T::zero(), MatMut::dense(&mut da, m, k));
                accumulate(nodes, grads, a, like(a, da));
            }
            if needs(b) {
                let mut db = vec![T::zero(); k * n];
                gemm(T::one(), MatRef::dense(val(a).data(), m, k).t(), MatRef::dense(g.data(), m, n), T::zero(), MatMut::dense(&mut db, k, n));
                accumulate(nodes, grads, b, like(b, db));
            }
        }
        &Op::Transpose(a) => {
            accumulate(nodes, grads, a, g.transpose2().expect("2-D gradient"));
        }
        &Op::Reshape(a) => {
            accumulate(nodes, grads, a, like(a, g.data().to_vec()));
        }
        &Op::Add(a, b) => {
            accumulate(nodes, grads, a, g.clone());
            accumulate(nodes, grads, b, g.clone());
        }
        &Op::Sub(a, b) => {
            accumulate(nodes, grads, a, g.clone());
            accumulate(nodes, grads, b, g.map(|x| -x));
        }
        &Op::Mul(a, b) => {
            if needs(a) {
                accumulate(nodes, grads, a, g.zip_map(val(b), |x, y| x * y));
            }
            if needs(b) {
                accumulate(nodes, grads, b, g.zip_map(val(a), |x, y| x * y));
            }
        }
        &Op::Scale(a, c) => accumulate(nodes, grads, a, g.map(|x| x * c)),
        &Op::Relu(a) => {
            accumulate(nodes, grads, a, g.zip_map(val(a), |gy, x| if x > T::zero() { gy } else { T::zero() }));
        }
        &Op::Softmax(a) => {
            let y = &nodes[id].value;
            let d = y.last_dim();
            let mut dx = vec![T::zero(); y.numel()];
            for ((dr, yr), gr) in dx.chunks_mut(d).zip(y.data().chunks(d)).zip(g.data().chunks(d)) {
                let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                for j in 0..d {
                    dr[j] = yr[j] * (gr[j] - dot);
                }
            }
            accumulate(nodes, grads, a, like(a, dx));
        }
        Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
            let (x, gain, bias) = (*x, *gain, *bias);
            let d = val(gain).numel();
            let gv = val(gain).data();
            if needs(x) {
                let dn = T::lit(d as f64);
                let mut dx = vec![T::zero(); xhat.len()];
                for (r, &is) in inv_std.iter().enumerate() {
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_dh = T::zero();
                    let mut sum_dh_h = T::zero();
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                    }
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        dx[r * d + j] = is * (dh - sum_dh / dn - hr[j] * sum_dh_h / dn);
                    }
                }
                accumulate(nodes, grads, x, like(x, dx));
            }
            if needs(gain) {
                let prod: Vec<T> = g.data().iter().zip(xhat).map(|(&a, &b)| a * b).collect();
                accumulate(nodes, grads, gain, like(gain, col_sums(&prod, d)));
            }
            if needs(bias) {
                accumulate(nodes, grads, bias, like(bias, col_sums(g.data(), d)));
            }
        }
        &Op::Linear { x, w, b } => {
            let [din, dout] = val(w).dims2().expect("checked in forward");
            let rows = val(x).outer();
            if needs(x) {
                let mut dx = vec![T::zero(); rows * din];
                gemm(T::one(), MatRef::dense(g.data(), rows, dout), MatRef::dense(val(w).data(), din, dout).t(), T::zero(), MatMut::dense(&mut dx, rows, din));
                accumulate(nodes, grads, x, like(x, dx));
            }
            if needs(w) {
                let mut dw = vec![T::zero(); din * dout];
                gemm(T::one(), MatRef::dense(val(x).data(), rows, din).t(), MatRef::dense(g.data(), rows, dout), T::zero(), MatMut::dense(&mut dw, din, dout));
                accumulate(nodes, grads, w, like(w, dw));
            }
            if let Some(b) = b {
                accumulate(nodes, grads, b, like(b, col_sums(g.data(), dout)));
            }
        }
        Op::Conv1d { x, w, b, kernel, cols } => {
            let (x, w, b, k) = (*x, *w, *b, *kernel);
            let [len, cin] = val(x).dims2().expect("checked in forward");
            let cout = val(w).shape()[2];
            let width = k * cin;
            if needs(w) {
                let mut dw = vec![T::zero(); width * cout];
                gemm(T::one(), MatRef::dense(cols, len, width).t(), MatRef::dense(g.data(), len, cout), T::zero(), MatMut::dense(&mut dw, width, cout));
                accumulate(nodes, grads, w, like(w, dw));
            }
            if let Some(b) = b {
                accumulate(nodes, grads, b, like(b, col_sums(g.data(), cout)));
            }
            if needs(x) {
                let mut dcols = vec![T::zero(); len * width];
                gemm(T::one(), MatRef::dense(g.data(), len, cout), MatRef::dense(val(w).data(), width, cout).t(), T::zero(), MatMut::dense(&mut dcols, len, width));
                let pad = k / 2;
                let mut dx = vec![T::zero(); len * cin];
                for l in 0..len {
                    for j in 0..k {
                        let src = l as isize + j as isize - pad as isize;
                        if src < 0 || src >= len as isize {
                            continue;
                        }
                        let src = src as usize;
                        for c in 0..cin {
                            dx[src * cin + c] += dcols[l * width + j * cin + c];
                        }
                    }
                }
                accumulate(nodes, grads, x, like(x, dx));
            }
        }
        Op::Dropout { x, mask } => {
            let dx = g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect();
            accumulate(nodes, grads, *x, like(*x, dx));
        }
        Op::Attention { q, k, v, heads, probs } => {
            let (q, k, v, heads) = (*q, *k, *v, *heads);
            let [n, d] = val(q).dims2().expect("checked in forward");
            let m = val(k).shape()[0];
            let dh = d / heads;
            let scale = T::one() / T::lit(dh as f64).sqrt();
            let mut dq = vec![T::zero(); n * d];
            let mut dk = vec![T::zero(); m * d];
            let mut dv = vec![T::zero(); m * d];
            let mut ds = vec![T::zero(); n * m];
            for h in 0..heads {
                let p = &probs[h * n * m..(h + 1) * n * m];
                let go = MatRef::cols(g.data(), n, d, h * dh, dh);
                let vh = MatRef::cols(val(v).data(), m, d, h * dh, dh);
                // dV_h = Pᵀ·dO_h
                gemm(T::one(), MatRef::dense(p, n, m).t(), go, T::zero(), MatMut::cols(&mut dv, m, d, h * dh, dh));
                // dP = dO_h·V_hᵀ, then the softmax Jacobian in place.
                gemm(T::one(), go, vh.t(), T::zero(), MatMut::dense(&mut ds, n, m));
                for (dr, pr) in ds.chunks_mut(m).zip(p.chunks(m)) {
                    let dot: T = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                    for (x, &pp) in dr.iter_mut().zip(pr) {
                        *x = pp * (*x - dot);
                    }
                }
                let kh = MatRef::cols(val(k).data(), m, d, h * dh, dh);
                let qh = MatRef::cols(val(q).data(), n, d, h * dh, dh);
                gemm(scale, MatRef::dense(&ds, n, m), kh, T::zero(), MatMut::cols(&mut dq, n, d, h * dh, dh));
                gemm(scale, MatRef::dense(&ds, n, m).t(), qh, T::zero(), MatMut::cols(&mut dk, m, d, h * dh, dh));
            }
            accumulate(nodes, grads, q, like(q, dq));
            accumulate(nodes, grads, k, like(k, dk));
            accumulate(nodes, grads, v, like(v, dv));
        }
        &Op::Sum(a) => {
            let g0 = g.data()[0];
            accumulate(nodes, grads, a, Tensor::full(val(a).shape(), g0));
        }
        &Op::Mean(a) => {
            let g0 = g.data()[0] / T::lit(val(a).numel() as f64);
            accumulate(nodes, grads, a, Tensor::full(val(a).shape(), g0));
        }
        Op::Mse { x, target } => {
            let xv = val(*x);
            let c = g.data()[0] * T::lit(2.0 / xv.numel() as f64);
            let dx = xv.data().iter().zip(target).map(|(&a, &b)| c * (a - b)).collect();
            accumulate(nodes, grads, *x, like(*x, dx));
        }
        &Op::SelectLast { x, index } => {
            let s = val(x).last_dim();
            let mut dx = vec![T::zero(); val(x).numel()];
            for (i, &gv) in g.data().iter().enumerate() {
                dx[i * s + index] = gv;
            }
            accumulate(nodes, grads, x, like(x, dx));
        }
    }
}
