//! WebAssembly bindings for the static demo page in `www/`.

use std::cell::OnceCell;

use rand::Rng;
use specsep::audio::{gen_synthetic_corpus, Corpus, CorpusSpec, Fold};
use specsep::bijection::{greedy_assign, hungarian_loss, SimMatrix};
use specsep::dsp::{stft_samples, StftParams};
use specsep::forge::{generate_record, MixParams, Partition, SubdatasetId};
use specsep::seed;
use wasm_bindgen::prelude::*;

const CORPUS_SEED: u64 = 0;

thread_local! {
    static CORPUS: OnceCell<Corpus> = const { OnceCell::new() };
}

fn with_corpus<R>(f: impl FnOnce(&Corpus) -> R) -> Result<R, JsError> {
    CORPUS.with(|cell| {
        if cell.get().is_none() {
            let corpus = gen_synthetic_corpus(&CorpusSpec::desk(), CORPUS_SEED)?;
            let _ = cell.set(corpus);
        }
        Ok(f(cell.get().expect("set above")))
    })
}

/// One synthesized mixture with its full-length sources.
#[wasm_bindgen]
pub struct Mixture {
    mixture: Vec<f32>,
    sources: Vec<Vec<f32>>,
    sample_rate: u32,
    summary: String,
}

#[wasm_bindgen]
impl Mixture {
    pub fn samples(&self) -> Vec<f32> {
        self.mixture.clone()
    }

    pub fn source(&self, k: usize) -> Vec<f32> {
        self.sources.get(k).cloned().unwrap_or_default()
    }

    #[wasm_bindgen(getter)]
    pub fn count(&self) -> usize {
        self.sources.len()
    }

    #[wasm_bindgen(getter)]
    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// Class, start and volume of each placed clip, one per line.
    #[wasm_bindgen(getter)]
    pub fn summary(&self) -> String {
        self.summary.clone()
    }
}

/// Draws record `seed` of the desk-scale training fold of `partition`
/// with `sources` clips.
#[wasm_bindgen]
pub fn synth_mixture(partition: &str, sources: usize, seed: u32) -> Result<Mixture, JsError> {
    let partition: Partition = partition.parse().map_err(|e: String| JsError::new(&e))?;
    let id = SubdatasetId::new(partition, sources, Fold::Tr);
    let params = MixParams { mixture_seconds: 1.0, ..MixParams::default() };
    let rec = with_corpus(|c| generate_record(c, &id, &params, u64::from(seed), 0))??;
    let summary = rec
        .placements
        .iter()
        .enumerate()
        .map(|(k, p)| format!("source {k}: class {} clip {} at {:.3} s, volume {:.2}", p.class_id, p.clip_index, p.start_s, p.volume))
        .collect::<Vec<_>>()
        .join("\n");
    Ok(Mixture {
        sample_rate: rec.mixture.sample_rate(),
        mixture: rec.mixture.into_samples(),
        sources: rec.sources.into_iter().map(|s| s.into_samples()).collect(),
        summary,
    })
}

/// Log-magnitude spectrogram, frames by bins, row-major.
#[wasm_bindgen]
pub struct SpectrogramView {
    frames: usize,
    bins: usize,
    db: Vec<f32>,
}

#[wasm_bindgen]
impl SpectrogramView {
    #[wasm_bindgen(getter)]
    pub fn frames(&self) -> usize {
        self.frames
    }

    #[wasm_bindgen(getter)]
    pub fn bins(&self) -> usize {
        self.bins
    }

    /// Magnitudes in dB relative to the loudest cell, floored at -80.
    pub fn db(&self) -> Vec<f32> {
        self.db.clone()
    }
}

#[wasm_bindgen]
pub fn spectrogram(samples: &[f32], sample_rate: u32, n_fft: usize, hop: usize) -> Result<SpectrogramView, JsError> {
    let params = StftParams::new(n_fft, hop)?;
    let x: Vec<f64> = samples.iter().map(|&v| f64::from(v)).collect();
    let spec = stft_samples(&x, sample_rate, &params)?;
    let (frames, bins) = (spec.frames(), spec.bins());
    let mags: Vec<f64> = (0..frames).flat_map(|t| (0..bins).map(move |k| (t, k))).map(|(t, k)| spec.magnitude(t, k)).collect();
    let peak = mags.iter().copied().fold(0.0, f64::max).max(1e-12);
    let db = mags.iter().map(|&m| (20.0 * (m / peak).max(1e-4).log10()) as f32).collect();
    Ok(SpectrogramView { frames, bins, db })
}

/// Greedy and optimal matchings of one random similarity matrix.
#[wasm_bindgen]
pub struct Matching {
    matrix: Vec<f64>,
    greedy_loss: f64,
    greedy: Vec<u32>,
    optimal_loss: f64,
    optimal: Vec<u32>,
}

#[wasm_bindgen]
impl Matching {
    pub fn matrix(&self) -> Vec<f64> {
        self.matrix.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn greedy_loss(&self) -> f64 {
        self.greedy_loss
    }

    /// Column assigned to each row, in row order.
    pub fn greedy(&self) -> Vec<u32> {
        self.greedy.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn optimal_loss(&self) -> f64 {
        self.optimal_loss
    }

    pub fn optimal(&self) -> Vec<u32> {
        self.optimal.clone()
    }
}

/// Compares greedy matching with the Hungarian optimum on an `s × s`
/// matrix of uniform entries in [0, 1).
#[wasm_bindgen]
pub fn compare_matchings(s: usize, seed: u32) -> Result<Matching, JsError> {
    let mut rng = seed::rng(u64::from(seed));
    let values: Vec<f64> = (0..s * s).map(|_| rng.gen::<f64>()).collect();
    let sim = SimMatrix::new(s, values.clone())?;
    let (greedy_loss, greedy) = greedy_assign(&sim);
    let (optimal_loss, optimal) = hungarian_loss(&sim);
    let to_u32 = |v: Vec<usize>| v.into_iter().map(|j| j as u32).collect();
    Ok(Matching { matrix: values, greedy_loss, greedy: to_u32(greedy), optimal_loss, optimal: to_u32(optimal) })
}
