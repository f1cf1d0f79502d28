//! Waveform containers, WAV files and the synthetic source corpus.

mod corpus;
mod wav;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use corpus::{gen_synthetic_corpus, load_corpus_dir, ClassClips, Corpus, CorpusSpec, SoundFamily};
pub use wav::{read_wav, write_wav};

pub const DEFAULT_SAMPLE_RATE: u32 = 44_100;

#[derive(Error, Debug)]
pub enum AudioError {
    #[error("malformed WAV file {path:?}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("unsupported WAV encoding in {path:?}: {msg}")]
    UnsupportedCodec { path: PathBuf, msg: String },
    #[error("WAV file {0:?} has an empty data chunk")]
    EmptyClip(PathBuf),
    #[error("clip must contain at least one sample")]
    NoSamples,
    #[error("sample {index} = {value} lies outside [-1, 1]")]
    OutOfRange { index: usize, value: f32 },
    #[error("sample rate must be positive")]
    ZeroSampleRate,
    #[error("corpus config: {0}")]
    Config(String),
    #[error("I/O error on {path:?}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Dataset split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fold {
    Tr,
    Vl,
    Te,
}

impl Fold {
    pub const ALL: [Fold; 3] = [Fold::Tr, Fold::Vl, Fold::Te];

    pub fn index(self) -> usize {
        match self {
            Fold::Tr => 0,
            Fold::Vl => 1,
            Fold::Te => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Fold::Tr => "tr",
            Fold::Vl => "vl",
            Fold::Te => "te",
        }
    }
}

impl fmt::Display for Fold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Fold {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tr" | "train" => Ok(Fold::Tr),
            "vl" | "val" | "valid" => Ok(Fold::Vl),
            "te" | "test" => Ok(Fold::Te),
            other => Err(format!("unknown fold {other:?} (expected tr, vl or te)")),
        }
    }
}

/// Where a corpus clip came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub class_id: u32,
    pub fold: Fold,
}

/// A mono waveform with every sample in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct PcmClip {
    samples: Vec<f32>,
    sample_rate: u32,
    provenance: Option<Provenance>,
}

impl PcmClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self, AudioError> {
        if samples.is_empty() {
            return Err(AudioError::NoSamples);
        }
        if sample_rate == 0 {
            return Err(AudioError::ZeroSampleRate);
        }
        if let Some((index, &value)) = samples
            .iter()
            .enumerate()
            .find(|(_, v)| !(-1.0..=1.0).contains(*v))
        {
            return Err(AudioError::OutOfRange { index, value });
        }
        Ok(Self { samples, sample_rate, provenance: None })
    }

    /// Builds a clip after hard-clamping every sample into [-1, 1].
    /// Non-finite samples become 0.
    pub fn clamped(samples: Vec<f32>, sample_rate: u32) -> Result<Self, AudioError> {
        let samples = samples
            .into_iter()
            .map(|v| if v.is_finite() { v.clamp(-1.0, 1.0) } else { 0.0 })
            .collect();
        Self::new(samples, sample_rate)
    }

    pub fn silence(len: usize, sample_rate: u32) -> Result<Self, AudioError> {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn with_provenance(mut self, class_id: u32, fold: Fold) -> Self {
        self.provenance = Some(Provenance { class_id, fold });
        self
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn provenance(&self) -> Option<Provenance> {
        self.provenance
    }

    pub fn class_id(&self) -> Option<u32> {
        self.provenance.map(|p| p.class_id)
    }

    pub fn fold(&self) -> Option<Fold> {
        self.provenance.map(|p| p.fold)
    }

    /// Duration in seconds.
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn samples_f64(&self) -> Vec<f64> {
        self.samples.iter().map(|&v| v as f64).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_and_empty() {
        assert!(matches!(PcmClip::new(vec![], 8000), Err(AudioError::NoSamples)));
        assert!(matches!(
            PcmClip::new(vec![0.0, 1.5], 8000),
            Err(AudioError::OutOfRange { index: 1, .. })
        ));
        assert!(matches!(PcmClip::new(vec![0.0], 0), Err(AudioError::ZeroSampleRate)));
    }

    #[test]
    fn duration_is_len_over_rate() {
        let c = PcmClip::silence(88_200, DEFAULT_SAMPLE_RATE).unwrap();
        assert_eq!(c.duration(), 2.0);
    }

    #[test]
    fn clamped_saturates() {
        let c = PcmClip::clamped(vec![2.0, -3.0, f32::NAN, 0.5], 8000).unwrap();
        assert_eq!(c.samples(), &[1.0, -1.0, 0.0, 0.5]);
    }

    #[test]
    fn fold_parses() {
        assert_eq!("te".parse::<Fold>().unwrap(), Fold::Te);
        assert_eq!("train".parse::<Fold>().unwrap(), Fold::Tr);
        assert!("x".parse::<Fold>().is_err());
    }
}
