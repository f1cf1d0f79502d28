use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specsep::dsp::{Spectrogram, SpectrogramMeta};
use specsep::stt::{mixture_projection, Ablation, ConvSpec, SttConfig, SttModel};
use specsep::{Tape, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn toy_input(cfg: &SttConfig, seed: u64) -> Tensor<f64> {
    random(&[cfg.frames, cfg.height], seed)
}

fn set(model: &mut SttModel<f64>, name: &str, f: impl Fn(usize) -> f64) {
    let id = model.params().find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    for (i, v) in model.params_mut().value_mut(id).data_mut().iter_mut().enumerate() {
        *v = f(i);
    }
}

fn values(tape: &Tape<f64>, v: specsep::Var) -> Vec<f64> {
    tape.value(v).data().to_vec()
}

fn layer_norm_rows(x: &[f64], width: usize) -> Vec<f64> {
    x.chunks(width)
        .flat_map(|row| {
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / width as f64;
            let inv = 1.0 / (var + 1e-8).sqrt();
            row.iter().map(move |v| (v - mean) * inv).collect::<Vec<_>>()
        })
        .collect()
}

#[test]
fn zero_input_through_zero_embedding_is_the_temporal_encoding() {
    let cfg = SttConfig::toy();
    let mut m = SttModel::<f64>::new(cfg.clone(), 1).unwrap();
    set(&mut m, "emb.w", |_| 0.0);
    let tape = Tape::new();
    let pass = m.forward(&tape, &Tensor::zeros(&[cfg.frames, cfg.height]), None).unwrap();
    let got = values(&tape, pass.embedded);
    let d = cfg.embed;
    for t in 0..cfg.frames {
        for c in 0..d {
            let angle = t as f64 / 10000f64.powf((c / 2 * 2) as f64 / d as f64);
            let want = if c % 2 == 0 { angle.sin() } else { angle.cos() };
            assert!((got[t * d + c] - want).abs() < 1e-12, "frame {t} column {c}");
        }
    }
}

#[test]
fn identical_columns_embed_differently() {
    let cfg = SttConfig::toy();
    let m = SttModel::<f64>::new(cfg.clone(), 2).unwrap();
    let column = random(&[cfg.height], 3);
    let x = Tensor::from_fn(&[cfg.frames, cfg.height], |i| column.data()[i % cfg.height]);
    let tape = Tape::new();
    let e = values(&tape, m.forward(&tape, &x, None).unwrap().embedded);
    let d = cfg.embed;
    assert_eq!(e.len(), cfg.frames * d);
    for t in 1..cfg.frames {
        assert_ne!(e[..d], e[t * d..(t + 1) * d]);
    }
}

#[test]
fn path_with_identity_cnn_and_silent_blocks_is_two_norms() {
    let cfg = SttConfig { n_enc: 1, ..SttConfig::toy() }.with_ablation(Ablation::TpOnly);
    let cfg = SttConfig { cnn: vec![ConvSpec { kernel: 3, channels: 0 }], ..cfg };
    let mut m = SttModel::<f64>::new(cfg.clone(), 4).unwrap();
    let d = cfg.embed;
    set(&mut m, "enc0.tp.conv0.w", |i| {
        let (k, rest) = (i / (d * d), i % (d * d));
        f64::from(k == 1 && rest / d == rest % d)
    });
    for name in ["enc0.tp.msa.v.w", "enc0.tp.msa.v.b", "enc0.tp.msa.o.b", "enc0.tp.ff2.w", "enc0.tp.ff2.b"] {
        set(&mut m, name, |_| 0.0);
    }
    let tape = Tape::new();
    let pass = m.forward(&tape, &toy_input(&cfg, 5), None).unwrap();
    let want = layer_norm_rows(&layer_norm_rows(&values(&tape, pass.embedded), cfg.embed), cfg.embed);
    for (a, b) in values(&tape, pass.encoder_outputs[0]).iter().zip(&want) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn tp_only_equals_the_temporal_path_of_the_full_model() {
    let cfg = SttConfig::toy();
    let mut full = SttModel::<f64>::new(cfg.clone(), 6).unwrap();
    for j in 0..cfg.n_enc {
        set(&mut full, &format!("enc{j}.sp.norm2.gain"), |_| 0.0);
    }
    let mut tp = SttModel::<f64>::new(cfg.clone().with_ablation(Ablation::TpOnly), 7).unwrap();
    let names: Vec<String> = tp.params().named_values().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let src = full.params().value(full.params().find(&name).unwrap()).clone();
        let id = tp.params().find(&name).unwrap();
        *tp.params_mut().value_mut(id) = src;
    }
    let x = toy_input(&cfg, 8);
    let (t1, t2) = (Tape::new(), Tape::new());
    let a = full.forward(&t1, &x, None).unwrap();
    let b = tp.forward(&t2, &x, None).unwrap();
    for (ea, eb) in a.encoder_outputs.iter().zip(&b.encoder_outputs) {
        assert_eq!(values(&t1, *ea), values(&t2, *eb));
    }
    assert_eq!(values(&t1, a.output), values(&t2, b.output));
}

#[test]
fn census_of_variants() {
    let cfg = SttConfig::toy();
    let census = |a| SttModel::<f32>::new(cfg.clone().with_ablation(a), 0).unwrap().census();
    let full = census(Ablation::Full);
    let tp_only = census(Ablation::TpOnly);
    assert_eq!((tp_only.spectral, tp_only.spectral2), (0, 0));
    assert_eq!(tp_only.temporal, full.temporal);
    let tp_double = census(Ablation::TpDouble);
    assert_eq!(tp_double.temporal2, tp_double.temporal);
    assert_eq!(tp_double.spectral, 0);
    let sp_double = census(Ablation::SpDouble);
    assert_eq!(sp_double.spectral2, full.spectral);
    assert_eq!(sp_double.temporal, 0);
    assert_eq!(census(Ablation::NoCnn).cnn, 0);
    assert!(full.cnn > 0);
    assert_eq!(census(Ablation::NoMgn).mgn_ff2, 0);
    assert_eq!(full.mgn_ff2, (cfg.height * 2) * (cfg.height * 2) + cfg.height * 2);
}

#[test]
fn decoder_depths_keep_shape_and_cross_attention_is_normalized() {
    for n_dec in [1, 4] {
        let cfg = SttConfig { n_dec, ..SttConfig::toy() };
        let m = SttModel::<f64>::new(cfg.clone(), 9).unwrap();
        let tape = Tape::new();
        let pass = m.forward(&tape, &toy_input(&cfg, 10), None).unwrap();
        assert_eq!(pass.decoder_outputs.len(), n_dec);
        for &d in &pass.decoder_outputs {
            assert_eq!(tape.shape(d), vec![cfg.frames, cfg.embed]);
        }
        for &c in &pass.cross_attention {
            let (probs, [heads, n, k]) = tape.attention_probs(c).unwrap();
            assert_eq!((heads, n, k), (cfg.heads, cfg.frames, cfg.frames));
            for row in probs.chunks(k) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn all_zero_parameters_give_a_finite_output() {
    let cfg = SttConfig::toy();
    let mut m = SttModel::<f64>::new(cfg.clone(), 11).unwrap();
    let names: Vec<String> = m.params().named_values().map(|(n, _)| n.to_string()).collect();
    for name in names {
        set(&mut m, &name, |_| 0.0);
    }
    let tape = Tape::new();
    let pass = m.forward(&tape, &Tensor::zeros(&[cfg.frames, cfg.height]), None).unwrap();
    assert!(tape.value(pass.output).all_finite());
}

#[test]
fn unit_mask_passes_ff1_and_dead_mask_zeroes_it() {
    let cfg = SttConfig::toy();
    let mut m = SttModel::<f64>::new(cfg.clone(), 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let ff1: Vec<f64> = (0..cfg.embed * cfg.height * 2).map(|_| rng.gen_range(-0.3..0.3)).collect();
    set(&mut m, "mgn.ff1.w", |i| ff1[i]);
    let x = toy_input(&cfg, 14);

    let tape = Tape::new();
    let pass = m.forward(&tape, &x, None).unwrap();
    assert!(values(&tape, pass.mask.unwrap()).iter().all(|&v| v == 1.0));
    assert_eq!(values(&tape, pass.output), values(&tape, pass.ff1));

    set(&mut m, "mgn.ff2.b", |_| -1.0);
    let tape = Tape::new();
    let pass = m.forward(&tape, &x, None).unwrap();
    assert!(values(&tape, pass.output).iter().all(|&v| v == 0.0));
}

#[test]
fn three_sources_at_full_resolution() {
    let cfg = SttConfig { n_enc: 1, n_dec: 1, embed: 16, ..SttConfig::studio(3) };
    let m = SttModel::<f32>::new(cfg, 0).unwrap();
    let tape = Tape::new();
    let pass = m.forward(&tape, &Tensor::zeros(&[460, 258]), None).unwrap();
    assert_eq!(tape.shape(pass.output), vec![460, 258, 3]);
    assert_eq!(pass.sources.len(), 3);
}

#[test]
fn forward_and_backward_are_repeatable() {
    let cfg = SttConfig { dropout: 0.2, ..SttConfig::toy() };
    let mut m = SttModel::<f64>::new(cfg.clone(), 15).unwrap();
    m.randomize_head(16);
    let x = toy_input(&cfg, 17);
    let run = || {
        let tape = Tape::new();
        let pass = m.forward(&tape, &x, None).unwrap();
        let loss = tape.sum(pass.output);
        let grads = tape.backward(loss).unwrap();
        (tape.scalar(loss), grads.into_params())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(ga.len(), m.params().len());
    for ((ia, ta), (ib, tb)) in ga.iter().zip(&gb) {
        assert_eq!(ia, ib);
        assert_eq!(ta, tb);
    }
}

#[test]
fn every_variant_runs_and_differentiates() {
    let cfg = SttConfig::toy();
    for a in Ablation::ALL {
        let mut m = SttModel::<f64>::new(cfg.clone().with_ablation(a), 18).unwrap();
        m.randomize_head(19);
        let tape = Tape::new();
        let pass = m.forward(&tape, &toy_input(&cfg, 20), None).unwrap();
        assert_eq!(pass.mask.is_none(), a == Ablation::NoMgn);
        let grads = tape.backward(tape.sum(pass.output)).unwrap();
        assert_eq!(grads.params().len(), m.params().len(), "{a}");
    }
}

#[test]
fn mixture_projection_copies() {
    let meta = SpectrogramMeta { n_fft: 2, hop: 1, sample_rate: 8000, original_length: 2 };
    let mix = Spectrogram::new(3, 4, random(&[12], 21).into_data(), meta).unwrap();
    let copies = mixture_projection(&mix, 2);
    assert_eq!(copies, vec![mix.clone(), mix.clone()]);

    let silence = mix.zeros_like();
    let sim = specsep::bijection::pairwise_mse(&copies, &[mix.clone(), silence]).unwrap();
    let energy = mix.data().iter().map(|v| v * v).sum::<f64>() / 12.0;
    assert_eq!(sim.get(0, 0), 0.0);
    assert!((sim.get(1, 1) - energy).abs() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mask_is_non_negative(seed in any::<u64>()) {
        let cfg = SttConfig::toy();
        let mut m = SttModel::<f64>::new(cfg.clone(), seed).unwrap();
        m.randomize_head(seed ^ 1);
        let tape = Tape::new();
        let pass = m.forward(&tape, &toy_input(&cfg, seed ^ 2), None).unwrap();
        let mask = values(&tape, pass.mask.unwrap());
        prop_assert!(mask.iter().all(|&v| v >= 0.0));
        prop_assert!(mask.iter().any(|&v| v == 0.0));
    }

    #[test]
    fn shape_chain_holds(seed in any::<u64>(), s in prop_oneof![Just(2usize), Just(3), Just(5)], n_enc in 1usize..3) {
        let cfg = SttConfig { sources: s, n_enc, ..SttConfig::toy() };
        let m = SttModel::<f32>::new(cfg.clone(), seed).unwrap();
        let tape = Tape::new();
        let pass = m.forward(&tape, &toy_input(&cfg, seed).cast(), None).unwrap();
        prop_assert_eq!(tape.shape(pass.embedded), vec![cfg.frames, cfg.embed]);
        prop_assert_eq!(pass.encoder_outputs.len(), n_enc);
        prop_assert_eq!(tape.shape(pass.output), vec![cfg.frames, cfg.height, s]);
        for &v in &pass.sources {
            prop_assert_eq!(tape.shape(v), vec![cfg.frames, cfg.height]);
        }
    }
}
