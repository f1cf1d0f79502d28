use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specsep::dsp::{istft_samples, stft_samples, StftParams};

fn signal(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn params() -> impl Strategy<Value = StftParams> {
    (4u32..9).prop_flat_map(|e| {
        let n_fft = 1usize << e;
        (1..n_fft).prop_map(move |hop| StftParams::new(n_fft, hop).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn shape_law(p in params(), extra in 0usize..1500, seed in any::<u64>()) {
        let len = p.n_fft + extra;
        let s = stft_samples(&signal(len, seed), 8000, &p).unwrap();
        prop_assert_eq!(s.shape(), (len / p.hop + 1, p.n_fft + 2));
        let half = s.height() / 2;
        for t in 0..s.frames() {
            prop_assert_eq!(s.row(t)[half], 0.0);
            prop_assert!(s.row(t)[s.height() - 1].abs() < 1e-9);
        }
    }

    #[test]
    fn reconstruction_on_invertible_lengths(p in params(), extra in 0usize..1500, seed in any::<u64>()) {
        let len = p.n_fft + extra;
        prop_assume!(p.invertible_len(len));
        let x = signal(len, seed);
        let back = istft_samples(&stft_samples(&x, 8000, &p).unwrap()).unwrap();
        prop_assert_eq!(back.len(), len);
        let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err <= 1e-6 * peak, "err {err}");
    }

    #[test]
    fn additive_and_homogeneous(seed in any::<u64>(), c in -3.0f64..3.0) {
        let p = StftParams::new(128, 96).unwrap();
        let (a, b) = (signal(900, seed), signal(900, seed ^ 0x5555));
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + c * y).collect();
        let (sa, sb, ss) = (
            stft_samples(&a, 8000, &p).unwrap(),
            stft_samples(&b, 8000, &p).unwrap(),
            stft_samples(&sum, 8000, &p).unwrap(),
        );
        for ((x, y), z) in sa.data().iter().zip(sb.data()).zip(ss.data()) {
            prop_assert!((x + c * y - z).abs() <= 1e-9);
        }
    }
}
