use rand::{Rng, RngCore};

use super::SttError;
use crate::autodiff::{ParamId, ParamSet, Real, Tape, Tensor, Var};

pub(crate) const NORM_EPS: f64 = 1e-8;

/// Everything a layer needs during one forward pass.
pub(crate) struct Cx<'a, 'r, T: Real> {
    pub tape: &'a Tape<T>,
    pub params: &'a ParamSet<T>,
    /// Present only in training mode; drives dropout masks.
    pub rng: Option<&'r mut dyn RngCore>,
    pub dropout: f64,
}

impl<T: Real> Cx<'_, '_, T> {
    pub fn p(&self, id: ParamId) -> Var {
        self.tape.param(self.params, id)
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var, SttError> {
        let rng: Option<&mut dyn RngCore> = match &mut self.rng {
            Some(r) => Some(&mut **r),
            None => None,
        };
        Ok(self.tape.dropout(x, self.dropout, rng)?)
    }
}

/// Uniform `±√(3/fan_in)` weights: unit variance out for unit variance in,
/// which keeps attention logits at the scale the `1/√d` factor assumes.
fn uniform<T: Real>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let a = (3.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-a..a)))
}

#[derive(Clone, Debug)]
pub(crate) struct LinearP {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl LinearP {
    pub fn new<T: Real>(ps: &mut ParamSet<T>, rng: &mut impl Rng, name: &str, din: usize, dout: usize) -> Self {
        let w = ps.add(format!("{name}.w"), uniform(rng, &[din, dout], din));
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[dout]));
        Self { w, b: Some(b) }
    }

    pub fn without_bias<T: Real>(ps: &mut ParamSet<T>, rng: &mut impl Rng, name: &str, din: usize, dout: usize) -> Self {
        Self { w: ps.add(format!("{name}.w"), uniform(rng, &[din, dout], din)), b: None }
    }

    /// Zero weights and bias: the output starts at 0.
    pub fn zeroed<T: Real>(ps: &mut ParamSet<T>, name: &str, din: usize, dout: usize) -> Self {
        let w = ps.add(format!("{name}.w"), Tensor::zeros(&[din, dout]));
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[dout]));
        Self { w, b: Some(b) }
    }

    /// Zero weights and unit bias: `relu` of its output is 1 everywhere.
    pub fn unit_gate<T: Real>(ps: &mut ParamSet<T>, name: &str, din: usize, dout: usize) -> Self {
        let w = ps.add(format!("{name}.w"), Tensor::zeros(&[din, dout]));
        let b = ps.add(format!("{name}.b"), Tensor::full(&[dout], T::one()));
        Self { w, b: Some(b) }
    }

    pub fn apply<T: Real>(&self, cx: &Cx<'_, '_, T>, x: Var) -> Result<Var, SttError> {
        Ok(cx.tape.linear(x, cx.p(self.w), self.b.map(|b| cx.p(b)))?)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct NormP {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl NormP {
    pub fn new<T: Real>(ps: &mut ParamSet<T>, name: &str, d: usize) -> Self {
        let gain = ps.add(format!("{name}.gain"), Tensor::full(&[d], T::one()));
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(&[d]));
        Self { gain, bias }
    }

    /// `LayerNorm(a + b)`.
    pub fn add_norm<T: Real>(&self, cx: &Cx<'_, '_, T>, a: Var, b: Var) -> Result<Var, SttError> {
        let sum = cx.tape.add(a, b)?;
        Ok(cx.tape.layer_norm(sum, cx.p(self.gain), cx.p(self.bias), T::lit(NORM_EPS))?)
    }
}

/// Same-size 1-D convolutions along the rows, ReLU between layers.
#[derive(Clone, Debug)]
pub(crate) struct CnnP {
    layers: Vec<(ParamId, ParamId)>,
}

impl CnnP {
    pub fn new<T: Real>(
        ps: &mut ParamSet<T>,
        rng: &mut impl Rng,
        name: &str,
        width: usize,
        spec: &[super::ConvSpec],
    ) -> Self {
        let mut cin = width;
        let layers = spec
            .iter()
            .enumerate()
            .map(|(l, c)| {
                let cout = if c.channels == 0 { width } else { c.channels };
                let fan_in = c.kernel * cin;
                let w = ps.add(format!("{name}.conv{l}.w"), uniform(rng, &[c.kernel, cin, cout], fan_in));
                let b = ps.add(format!("{name}.conv{l}.b"), Tensor::zeros(&[cout]));
                cin = cout;
                (w, b)
            })
            .collect();
        Self { layers }
    }

    pub fn apply<T: Real>(&self, cx: &Cx<'_, '_, T>, mut x: Var) -> Result<Var, SttError> {
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            if l > 0 {
                x = cx.tape.relu(x);
            }
            x = cx.tape.conv1d_same(x, cx.p(w), Some(cx.p(b)))?;
        }
        Ok(x)
    }
}

/// Multi-head attention with query, key, value and output projections. The
/// key projection has no bias: a key bias shifts every score of a query row
/// by the same amount, which the softmax cancels.
#[derive(Clone, Debug)]
pub(crate) struct MsaP {
    q: LinearP,
    k: LinearP,
    v: LinearP,
    o: LinearP,
    heads: usize,
}

impl MsaP {
    pub fn new<T: Real>(ps: &mut ParamSet<T>, rng: &mut impl Rng, name: &str, d: usize, heads: usize) -> Self {
        Self {
            q: LinearP::new(ps, rng, &format!("{name}.q"), d, d),
            k: LinearP::without_bias(ps, rng, &format!("{name}.k"), d, d),
            v: LinearP::new(ps, rng, &format!("{name}.v"), d, d),
            o: LinearP::new(ps, rng, &format!("{name}.o"), d, d),
            heads,
        }
    }

    /// Queries from `x`, keys and values from `memory`. Returns the output
    /// and the raw attention node (for inspecting its weights).
    pub fn apply<T: Real>(&self, cx: &Cx<'_, '_, T>, x: Var, memory: Var) -> Result<(Var, Var), SttError> {
        let q = self.q.apply(cx, x)?;
        let k = self.k.apply(cx, memory)?;
        let v = self.v.apply(cx, memory)?;
        let att = cx.tape.attention(q, k, v, self.heads)?;
        Ok((self.o.apply(cx, att)?, att))
    }
}

/// Position-wise two-layer feedforward with ReLU.
#[derive(Clone, Debug)]
pub(crate) struct FfP {
    l1: LinearP,
    l2: LinearP,
}

impl FfP {
    pub fn new<T: Real>(ps: &mut ParamSet<T>, rng: &mut impl Rng, name: &str, d: usize, hidden: usize) -> Self {
        Self {
            l1: LinearP::new(ps, rng, &format!("{name}.ff1"), d, hidden),
            l2: LinearP::new(ps, rng, &format!("{name}.ff2"), hidden, d),
        }
    }

    pub fn apply<T: Real>(&self, cx: &Cx<'_, '_, T>, x: Var) -> Result<Var, SttError> {
        let h = self.l1.apply(cx, x)?;
        self.l2.apply(cx, cx.tape.relu(h))
    }
}

/// CNN → MSA → Add&Norm → FF → Add&Norm on a `rows × width` input.
#[derive(Clone, Debug)]
pub(crate) struct StePathP {
    cnn: Option<CnnP>,
    msa: MsaP,
    norm1: NormP,
    ff: FfP,
    norm2: NormP,
}

impl StePathP {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        ps: &mut ParamSet<T>,
        rng: &mut impl Rng,
        name: &str,
        width: usize,
        heads: usize,
        ff_mult: usize,
        cnn: Option<&[super::ConvSpec]>,
    ) -> Self {
        Self {
            cnn: cnn.map(|spec| CnnP::new(ps, rng, name, width, spec)),
            msa: MsaP::new(ps, rng, &format!("{name}.msa"), width, heads),
            norm1: NormP::new(ps, &format!("{name}.norm1"), width),
            ff: FfP::new(ps, rng, name, width, width * ff_mult),
            norm2: NormP::new(ps, &format!("{name}.norm2"), width),
        }
    }

    pub fn apply<T: Real>(&self, cx: &mut Cx<'_, '_, T>, x: Var) -> Result<Var, SttError> {
        let c = match &self.cnn {
            Some(cnn) => cnn.apply(cx, x)?,
            None => x,
        };
        let (a, _) = self.msa.apply(cx, c, c)?;
        let a = cx.dropout(a)?;
        let n1 = self.norm1.add_norm(cx, a, c)?;
        let f = self.ff.apply(cx, n1)?;
        let f = cx.dropout(f)?;
        self.norm2.add_norm(cx, f, n1)
    }
}

/// Self-attention, cross-attention to the encoder output, feedforward,
/// each followed by Add&Norm.
#[derive(Clone, Debug)]
pub(crate) struct DecoderP {
    self_attn: MsaP,
    norm1: NormP,
    cross: MsaP,
    norm2: NormP,
    ff: FfP,
    norm3: NormP,
}

impl DecoderP {
    pub fn new<T: Real>(ps: &mut ParamSet<T>, rng: &mut impl Rng, name: &str, d: usize, heads: usize, ff_mult: usize) -> Self {
        Self {
            self_attn: MsaP::new(ps, rng, &format!("{name}.self"), d, heads),
            norm1: NormP::new(ps, &format!("{name}.norm1"), d),
            cross: MsaP::new(ps, rng, &format!("{name}.cross"), d, heads),
            norm2: NormP::new(ps, &format!("{name}.norm2"), d),
            ff: FfP::new(ps, rng, name, d, d * ff_mult),
            norm3: NormP::new(ps, &format!("{name}.norm3"), d),
        }
    }

    /// Returns the block output and the cross-attention node.
    pub fn apply<T: Real>(&self, cx: &mut Cx<'_, '_, T>, y: Var, memory: Var) -> Result<(Var, Var), SttError> {
        let (a, _) = self.self_attn.apply(cx, y, y)?;
        let a = cx.dropout(a)?;
        let y = self.norm1.add_norm(cx, a, y)?;
        let (c, cross) = self.cross.apply(cx, y, memory)?;
        let c = cx.dropout(c)?;
        let y = self.norm2.add_norm(cx, c, y)?;
        let f = self.ff.apply(cx, y)?;
        let f = cx.dropout(f)?;
        Ok((self.norm3.add_norm(cx, f, y)?, cross))
    }
}
