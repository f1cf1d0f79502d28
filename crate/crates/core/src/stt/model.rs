use rand::{Rng, RngCore};

use super::layers::{Cx, DecoderP, LinearP, StePathP};
use super::{Ablation, SttConfig, SttError};
use crate::autodiff::{ParamSet, Real, Tape, Tensor, Var};
use crate::dsp::Spectrogram;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PathKind {
    Temporal,
    Spectral,
}

#[derive(Clone, Debug)]
struct EncoderP {
    paths: Vec<(PathKind, StePathP)>,
}

/// Standard sinusoidal table: even columns `sin(p / 10000^(2i/d))`, odd
/// columns the matching cosine.
fn sinusoid(positions: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; positions * d];
    for p in 0..positions {
        for c in 0..d {
            let i = (c / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * i / d as f64);
            out[p * d + c] = if c % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

/// Intermediate nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub embedded: Var,
    pub encoder_outputs: Vec<Var>,
    pub decoder_outputs: Vec<Var>,
    /// Cross-attention node of each decoder block.
    pub cross_attention: Vec<Var>,
    pub ff1: Var,
    /// `relu(FF2)`, absent for the no-MGN variant.
    pub mask: Option<Var>,
    /// `W × H × s`.
    pub output: Var,
    /// One `W × H` node per source.
    pub sources: Vec<Var>,
}

/// Scalar parameter counts per component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamCensus {
    pub embedding: usize,
    pub temporal: usize,
    pub spectral: usize,
    pub temporal2: usize,
    pub spectral2: usize,
    pub cnn: usize,
    pub decoder: usize,
    pub mgn_ff1: usize,
    pub mgn_ff2: usize,
    pub total: usize,
}

#[derive(Clone, Debug)]
pub struct SttModel<T: Real> {
    cfg: SttConfig,
    params: ParamSet<T>,
    embed: LinearP,
    encoders: Vec<EncoderP>,
    decoders: Vec<DecoderP>,
    ff1: LinearP,
    ff2: Option<LinearP>,
    spectral_pe: Vec<T>,
    temporal_pe: Tensor<T>,
}

impl<T: Real> SttModel<T> {
    /// Fresh model; initial values depend only on `cfg` and `seed`.
    pub fn new(cfg: SttConfig, seed: u64) -> Result<Self, SttError> {
        cfg.validate()?;
        let mut rng = seed::rng(seed);
        let mut ps = ParamSet::new();
        let (h, w, he) = (cfg.height, cfg.frames, cfg.embed);
        let embed = LinearP::new(&mut ps, &mut rng, "emb", h, he);
        let cnn = (cfg.ablation != Ablation::NoCnn).then_some(&cfg.cnn[..]);
        let layout: &[(PathKind, &str)] = match cfg.ablation {
            Ablation::TpOnly => &[(PathKind::Temporal, "tp")],
            Ablation::SpOnly => &[(PathKind::Spectral, "sp")],
            Ablation::TpDouble => &[(PathKind::Temporal, "tp"), (PathKind::Temporal, "tp2")],
            Ablation::SpDouble => &[(PathKind::Spectral, "sp"), (PathKind::Spectral, "sp2")],
            Ablation::Full | Ablation::NoCnn | Ablation::NoMgn => {
                &[(PathKind::Temporal, "tp"), (PathKind::Spectral, "sp")]
            }
        };
        let encoders = (0..cfg.n_enc)
            .map(|j| EncoderP {
                paths: layout
                    .iter()
                    .map(|&(kind, tag)| {
                        let width = if kind == PathKind::Temporal { he } else { w };
                        let name = format!("enc{j}.{tag}");
                        (kind, StePathP::new(&mut ps, &mut rng, &name, width, cfg.heads, cfg.ff_mult, cnn))
                    })
                    .collect(),
            })
            .collect();
        let decoders = (0..cfg.n_dec)
            .map(|j| DecoderP::new(&mut ps, &mut rng, &format!("dec{j}"), he, cfg.heads, cfg.ff_mult))
            .collect();
        let out = h * cfg.sources;
        let ff1 = LinearP::zeroed(&mut ps, "mgn.ff1", he, out);
        let ff2 = (cfg.ablation != Ablation::NoMgn).then(|| LinearP::unit_gate(&mut ps, "mgn.ff2", out, out));
        let spectral_pe = (0..h).map(|i| T::lit((i as f64).sin())).collect();
        let temporal_pe = Tensor::from_f64(&[w, he], &sinusoid(w, he))?;
        Ok(Self { cfg, params: ps, embed, encoders, decoders, ff1, ff2, spectral_pe, temporal_pe })
    }

    /// Redraws the generation head with fan-in-scaled uniform weights and
    /// zero biases. The training init starts FF1 at zero, which zeroes every
    /// upstream gradient; gradient checks need a point where all of them flow.
    pub fn randomize_head(&mut self, seed: u64) {
        let mut rng = seed::rng(seed);
        let mut heads = vec![&self.ff1];
        heads.extend(self.ff2.as_ref());
        for lin in heads {
            let w = self.params.value_mut(lin.w);
            let a = (3.0 / w.shape()[0] as f64).sqrt();
            for v in w.data_mut() {
                *v = T::lit(rng.gen_range(-a..a));
            }
            if let Some(b) = lin.b {
                self.params.value_mut(b).data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }

    pub fn config(&self) -> &SttConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// The same model with parameters in another float type.
    pub fn cast<U: Real>(&self) -> Result<SttModel<U>, SttError> {
        let mut m = SttModel::<U>::new(self.cfg.clone(), 0)?;
        m.params = self.params.cast();
        Ok(m)
    }

    pub fn census(&self) -> ParamCensus {
        let mut c = ParamCensus::default();
        for (name, t) in self.params.named_values() {
            let n = t.numel();
            c.total += n;
            let parts: Vec<&str> = name.split('.').collect();
            match parts[0] {
                "emb" => c.embedding += n,
                "mgn" if parts[1] == "ff1" => c.mgn_ff1 += n,
                "mgn" => c.mgn_ff2 += n,
                p if p.starts_with("dec") => c.decoder += n,
                _ => {
                    match parts[1] {
                        "tp" => c.temporal += n,
                        "sp" => c.spectral += n,
                        "tp2" => c.temporal2 += n,
                        _ => c.spectral2 += n,
                    }
                    if parts[2].starts_with("conv") {
                        c.cnn += n;
                    }
                }
            }
        }
        c
    }

    fn check(&self, tape: &Tape<T>, v: Var, want: &[usize], stage: &str) -> Result<(), SttError> {
        let got = tape.shape(v);
        if got != want {
            return Err(SttError::Shape(format!("{stage}: expected {want:?}, got {got:?}")));
        }
        Ok(())
    }

    /// Runs the model on a `W × H` mixture. Dropout is active only when an
    /// rng is supplied.
    pub fn forward(&self, tape: &Tape<T>, mixture: &Tensor<T>, rng: Option<&mut dyn RngCore>) -> Result<ForwardPass, SttError> {
        self.forward_with(&self.params, tape, mixture, rng)
    }

    /// [`SttModel::forward`] with an external parameter set of the same
    /// layout (used to probe perturbed copies).
    pub fn forward_with(
        &self,
        params: &ParamSet<T>,
        tape: &Tape<T>,
        mixture: &Tensor<T>,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<ForwardPass, SttError> {
        let cfg = &self.cfg;
        if params.len() != self.params.len() {
            return Err(SttError::Shape(format!("{} parameters, model has {}", params.len(), self.params.len())));
        }
        let (w, h, he) = (cfg.frames, cfg.height, cfg.embed);
        if mixture.shape() != [w, h] {
            return Err(SttError::Shape(format!("mixture {:?}, model expects [{w}, {h}]", mixture.shape())));
        }
        let mut cx = Cx { tape, params, rng, dropout: cfg.dropout };

        let mut shifted = mixture.clone();
        for row in shifted.data_mut().chunks_mut(h) {
            for (v, &pe) in row.iter_mut().zip(&self.spectral_pe) {
                *v += pe;
            }
        }
        let x = tape.constant(shifted);
        let x = self.embed.apply(&cx, x)?;
        let pe = tape.constant(self.temporal_pe.clone());
        let embedded = tape.add(x, pe)?;
        self.check(tape, embedded, &[w, he], "embedding")?;

        let mut x = embedded;
        let mut encoder_outputs = Vec::with_capacity(self.encoders.len());
        for enc in &self.encoders {
            let mut merged: Option<Var> = None;
            for (kind, path) in &enc.paths {
                let y = match kind {
                    PathKind::Temporal => path.apply(&mut cx, x)?,
                    PathKind::Spectral => {
                        let xt = tape.transpose(x)?;
                        let y = path.apply(&mut cx, xt)?;
                        self.check(tape, y, &[he, w], "spectral path")?;
                        tape.transpose(y)?
                    }
                };
                merged = Some(match merged {
                    Some(m) => tape.add(m, y)?,
                    None => y,
                });
            }
            x = merged.expect("every encoder has a path");
            self.check(tape, x, &[w, he], "encoder")?;
            encoder_outputs.push(x);
        }

        let memory = x;
        let mut y = memory;
        let mut decoder_outputs = Vec::with_capacity(self.decoders.len());
        let mut cross_attention = Vec::with_capacity(self.decoders.len());
        for dec in &self.decoders {
            let (out, cross) = dec.apply(&mut cx, y, memory)?;
            y = out;
            self.check(tape, y, &[w, he], "decoder")?;
            decoder_outputs.push(y);
            cross_attention.push(cross);
        }

        let ff1 = self.ff1.apply(&cx, y)?;
        let (flat, mask) = match &self.ff2 {
            Some(ff2) => {
                let mask = tape.relu(ff2.apply(&cx, ff1)?);
                (tape.mul(ff1, mask)?, Some(mask))
            }
            None => (ff1, None),
        };
        let output = tape.reshape(flat, &[w, h, cfg.sources])?;
        let sources = (0..cfg.sources).map(|k| tape.select_last(output, k)).collect::<Result<Vec<_>, _>>()?;
        Ok(ForwardPass { embedded, encoder_outputs, decoder_outputs, cross_attention, ff1, mask, output, sources })
    }

    /// Inference: dropout off, one spectrogram per source.
    pub fn predict(&self, mixture: &Spectrogram) -> Result<Vec<Spectrogram>, SttError> {
        let (w, h) = mixture.shape();
        let input = Tensor::from_f64(&[w, h], mixture.data())?;
        let tape = Tape::new();
        let pass = self.forward(&tape, &input, None)?;
        pass.sources
            .iter()
            .map(|&v| {
                let data = tape.value(v).data().iter().map(|x| x.as_f64()).collect();
                mixture.with_data(data).map_err(|e| SttError::Shape(e.to_string()))
            })
            .collect()
    }
}

/// The no-separation reference: every source is predicted as the mixture.
pub fn mixture_projection(mixture: &Spectrogram, s: usize) -> Vec<Spectrogram> {
    vec![mixture.clone(); s]
}
