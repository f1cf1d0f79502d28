//! Centered STFT / iSTFT between waveforms and real∥imag spectrograms.
//!
//! A spectrogram row is one frame: the `n_fft/2 + 1` real parts followed by
//! the `n_fft/2 + 1` imaginary parts, so `H = n_fft + 2`. Frames are centered
//! (the signal is reflection-padded by `n_fft/2` on both sides), giving
//! `W = floor(len / hop) + 1` frames.

use std::f64::consts::PI;
use std::io::{self, Read, Write};

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AudioError, PcmClip};

/// Windows whose squared-sum falls below this at a retained sample cannot be
/// inverted.
pub const MIN_WINDOW_SUM: f64 = 1e-8;

#[derive(Error, Debug)]
pub enum DspError {
    #[error("stft config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("window overlap sum {sum:.3e} at sample {index} is too small to invert")]
    NonInvertible { index: usize, sum: f64 },
    #[error("spectrogram dump is malformed: {0}")]
    Dump(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftParams {
    pub n_fft: usize,
    pub hop: usize,
}

impl Default for StftParams {
    /// Hann window of 256 with hop 192.
    fn default() -> Self {
        Self { n_fft: 256, hop: 192 }
    }
}

impl StftParams {
    pub fn new(n_fft: usize, hop: usize) -> Result<Self, DspError> {
        let p = Self { n_fft, hop };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), DspError> {
        if self.n_fft < 2 || !self.n_fft.is_power_of_two() {
            return Err(DspError::Config(format!("n_fft {} is not a power of two ≥ 2", self.n_fft)));
        }
        if self.hop == 0 {
            return Err(DspError::Config("hop must be positive".into()));
        }
        Ok(())
    }

    /// Spectrogram height: `n_fft/2 + 1` real plus as many imaginary parts.
    pub fn height(&self) -> usize {
        self.n_fft + 2
    }

    pub fn frames(&self, len: usize) -> usize {
        len / self.hop + 1
    }

    /// Whether every sample of a `len`-sample signal is covered by at least
    /// one frame with nonzero synthesis weight. With centered framing the
    /// `len mod hop` samples after the last frame centre must fit in half a
    /// window.
    pub fn invertible_len(&self, len: usize) -> bool {
        self.hop < self.n_fft && len % self.hop <= self.n_fft / 2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpectrogramMeta {
    pub n_fft: usize,
    pub hop: usize,
    pub sample_rate: u32,
    pub original_length: usize,
}

/// A `W × H` real matrix, time-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    frames: usize,
    height: usize,
    data: Vec<f64>,
    meta: SpectrogramMeta,
}

impl Spectrogram {
    pub fn new(frames: usize, height: usize, data: Vec<f64>, meta: SpectrogramMeta) -> Result<Self, DspError> {
        if height % 2 != 0 {
            return Err(DspError::Shape(format!("height {height} is odd")));
        }
        if data.len() != frames * height {
            return Err(DspError::Shape(format!(
                "{} values for a {frames}×{height} spectrogram",
                data.len()
            )));
        }
        Ok(Self { frames, height, data, meta })
    }

    pub fn zeros_like(&self) -> Self {
        Self { data: vec![0.0; self.data.len()], ..self.clone() }
    }

    /// Number of time frames (W).
    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Row width (H).
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.frames, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn meta(&self) -> &SpectrogramMeta {
        &self.meta
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.height..(t + 1) * self.height]
    }

    pub fn bins(&self) -> usize {
        self.height / 2
    }

    /// Magnitude of bin `k` in frame `t`.
    pub fn magnitude(&self, t: usize, k: usize) -> f64 {
        let row = self.row(t);
        row[k].hypot(row[self.bins() + k])
    }

    pub fn with_data(&self, data: Vec<f64>) -> Result<Self, DspError> {
        Self::new(self.frames, self.height, data, self.meta)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Writes the flat binary dump: a little-endian header
    /// `{W:u32, H:u32, n_fft:u32, hop:u32, sample_rate:u32, original_length:u64}`
    /// followed by `W·H` f32 values, time-major.
    pub fn write_dump(&self, mut w: impl Write) -> Result<(), DspError> {
        let u32_of = |v: usize, what: &str| {
            u32::try_from(v).map_err(|_| DspError::Dump(format!("{what} {v} exceeds u32")))
        };
        w.write_all(&u32_of(self.frames, "W")?.to_le_bytes())?;
        w.write_all(&u32_of(self.height, "H")?.to_le_bytes())?;
        w.write_all(&u32_of(self.meta.n_fft, "n_fft")?.to_le_bytes())?;
        w.write_all(&u32_of(self.meta.hop, "hop")?.to_le_bytes())?;
        w.write_all(&self.meta.sample_rate.to_le_bytes())?;
        w.write_all(&(self.meta.original_length as u64).to_le_bytes())?;
        for &v in &self.data {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_dump(mut r: impl Read) -> Result<Self, DspError> {
        let mut u32_buf = [0u8; 4];
        let mut next_u32 = |r: &mut dyn Read| -> Result<u32, DspError> {
            r.read_exact(&mut u32_buf)?;
            Ok(u32::from_le_bytes(u32_buf))
        };
        let frames = next_u32(&mut r)? as usize;
        let height = next_u32(&mut r)? as usize;
        let n_fft = next_u32(&mut r)? as usize;
        let hop = next_u32(&mut r)? as usize;
        let sample_rate = next_u32(&mut r)?;
        let mut len_buf = [0u8; 8];
        r.read_exact(&mut len_buf)?;
        let original_length = u64::from_le_bytes(len_buf) as usize;
        let count = frames
            .checked_mul(height)
            .ok_or_else(|| DspError::Dump("W·H overflows".into()))?;
        let mut raw = vec![0u8; count * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Self::new(frames, height, data, SpectrogramMeta { n_fft, hop, sample_rate, original_length })
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Index into `x` reflected about both ends (no edge repeat), for any
/// offset. Signals of length 1 are treated as constant.
fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

pub fn stft(clip: &PcmClip, params: &StftParams) -> Result<Spectrogram, DspError> {
    stft_samples(&clip.samples_f64(), clip.sample_rate(), params)
}

/// STFT of an `f64` signal; see the module docs for the layout.
pub fn stft_samples(x: &[f64], sample_rate: u32, params: &StftParams) -> Result<Spectrogram, DspError> {
    params.validate()?;
    if x.is_empty() {
        return Err(DspError::Shape("cannot transform an empty signal".into()));
    }
    let n = params.n_fft;
    let pad = n / 2;
    let bins = n / 2 + 1;
    let height = 2 * bins;
    let frames = params.frames(x.len());
    let window = hann(n);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);

    let mut data = vec![0.0; frames * height];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for t in 0..frames {
        let start = (t * params.hop) as isize - pad as isize;
        for (j, b) in buf.iter_mut().enumerate() {
            let v = x[reflect(start + j as isize, x.len())];
            *b = Complex::new(v * window[j], 0.0);
        }
        fft.process(&mut buf);
        let row = &mut data[t * height..(t + 1) * height];
        for k in 0..bins {
            row[k] = buf[k].re;
            row[bins + k] = buf[k].im;
        }
    }
    Spectrogram::new(
        frames,
        height,
        data,
        SpectrogramMeta { n_fft: n, hop: params.hop, sample_rate, original_length: x.len() },
    )
}

/// Inverse STFT by weighted overlap-add, normalized by the squared-window
/// sum, truncated to the original length. Returns unclamped `f64` samples.
pub fn istft_samples(spec: &Spectrogram) -> Result<Vec<f64>, DspError> {
    let meta = spec.meta;
    let params = StftParams { n_fft: meta.n_fft, hop: meta.hop };
    params.validate()?;
    let n = meta.n_fft;
    let bins = n / 2 + 1;
    if spec.height != 2 * bins {
        return Err(DspError::Shape(format!(
            "height {} does not match n_fft {} (expected {})",
            spec.height,
            n,
            2 * bins
        )));
    }
    let pad = n / 2;
    let window = hann(n);
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let total = (spec.frames.saturating_sub(1)) * meta.hop + n;
    let mut acc = vec![0.0; total];
    let mut wsum = vec![0.0; total];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for t in 0..spec.frames {
        let row = spec.row(t);
        buf[0] = Complex::new(row[0], 0.0);
        buf[n / 2] = Complex::new(row[n / 2], 0.0);
        for k in 1..n / 2 {
            let c = Complex::new(row[k], row[bins + k]);
            buf[k] = c;
            buf[n - k] = c.conj();
        }
        ifft.process(&mut buf);
        let start = t * meta.hop;
        for j in 0..n {
            acc[start + j] += buf[j].re / n as f64 * window[j];
            wsum[start + j] += window[j] * window[j];
        }
    }
    let mut out = Vec::with_capacity(meta.original_length);
    for i in 0..meta.original_length {
        let p = i + pad;
        let sum = wsum.get(p).copied().unwrap_or(0.0);
        if sum < MIN_WINDOW_SUM {
            return Err(DspError::NonInvertible { index: i, sum });
        }
        out.push(acc[p] / sum);
    }
    Ok(out)
}

/// Inverse STFT to a clip; samples are clamped into [-1, 1].
pub fn istft(spec: &Spectrogram) -> Result<PcmClip, DspError> {
    let samples = istft_samples(spec)?;
    let clip = PcmClip::clamped(samples.into_iter().map(|v| v as f32).collect(), spec.meta.sample_rate)?;
    Ok(clip)
}

/// `max |stft(a+b) − stft(a) − stft(b)|`.
pub fn linearity_check(a: &PcmClip, b: &PcmClip, params: &StftParams) -> Result<f64, DspError> {
    if a.len() != b.len() || a.sample_rate() != b.sample_rate() {
        return Err(DspError::Shape(format!(
            "clips differ: {} samples @ {} Hz vs {} samples @ {} Hz",
            a.len(),
            a.sample_rate(),
            b.len(),
            b.sample_rate()
        )));
    }
    let xa = a.samples_f64();
    let xb = b.samples_f64();
    let sum: Vec<f64> = xa.iter().zip(&xb).map(|(p, q)| p + q).collect();
    let sa = stft_samples(&xa, a.sample_rate(), params)?;
    let sb = stft_samples(&xb, b.sample_rate(), params)?;
    let ss = stft_samples(&sum, a.sample_rate(), params)?;
    Ok(ss
        .data
        .iter()
        .zip(sa.data.iter().zip(&sb.data))
        .map(|(s, (p, q))| (s - p - q).abs())
        .fold(0.0, f64::max))
}
