//! Spectro-temporal transformer (STT).
//!
//! Pipeline: column embedding with spectral and temporal positional
//! encodings, a stack of spectro-temporal encoders (a temporal path on the
//! `W × H_e` sequence plus a spectral path on its transpose), a
//! non-autoregressive decoder stack, and a masked generation network that
//! emits `s` source spectrograms.

mod layers;
mod model;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::AutodiffError;

pub use model::{mixture_projection, ForwardPass, ParamCensus, SttModel};

#[derive(Debug, thiserror::Error)]
pub enum SttError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Architecture variants compared in the ablation study.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    Full,
    TpOnly,
    SpOnly,
    TpDouble,
    SpDouble,
    NoCnn,
    NoMgn,
}

impl Ablation {
    pub const ALL: [Ablation; 7] =
        [Self::Full, Self::TpOnly, Self::SpOnly, Self::TpDouble, Self::SpDouble, Self::NoCnn, Self::NoMgn];

    /// The six reduced variants.
    pub const VARIANTS: [Ablation; 6] =
        [Self::TpOnly, Self::SpOnly, Self::TpDouble, Self::SpDouble, Self::NoCnn, Self::NoMgn];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::TpOnly => "tp-only",
            Self::SpOnly => "sp-only",
            Self::TpDouble => "tp-double",
            Self::SpDouble => "sp-double",
            Self::NoCnn => "no-CNN",
            Self::NoMgn => "no-MGN",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = SttError;
    fn from_str(s: &str) -> Result<Self, SttError> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| SttError::Config(format!("unknown ablation {s:?}")))
    }
}

/// One convolution layer of a path's CNN. `channels == 0` means the path
/// width; the last layer must use it so the path preserves its shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SttConfig {
    /// Spectrogram height `H` (real and imaginary rows).
    pub height: usize,
    /// Frames `W`.
    pub frames: usize,
    /// Embedding width `H_e`.
    pub embed: usize,
    pub n_enc: usize,
    pub n_dec: usize,
    pub heads: usize,
    pub cnn: Vec<ConvSpec>,
    /// Hidden width of every feedforward block, as a multiple of its input.
    pub ff_mult: usize,
    pub dropout: f64,
    pub sources: usize,
    pub ablation: Ablation,
}

/// Preset grids for the searched hyperparameters.
pub const LAYER_GRID: [usize; 4] = [2, 4, 6, 8];
pub const HEAD_GRID: [usize; 3] = [1, 2, 4];
pub const DROPOUT_GRID: [f64; 3] = [0.0, 0.2, 0.5];

fn default_cnn() -> Vec<ConvSpec> {
    vec![ConvSpec { kernel: 3, channels: 0 }, ConvSpec { kernel: 3, channels: 0 }]
}

impl SttConfig {
    /// 2 s at 44.1 kHz with `n_fft` 256 and hop 192.
    pub fn studio(sources: usize) -> Self {
        Self {
            height: 258,
            frames: 460,
            embed: 128,
            n_enc: 2,
            n_dec: 2,
            heads: 2,
            cnn: default_cnn(),
            ff_mult: 2,
            dropout: 0.0,
            sources,
            ablation: Ablation::Full,
        }
    }

    /// 1 s at 8 kHz with `n_fft` 128 and hop 96.
    pub fn desk(sources: usize) -> Self {
        Self { height: 130, frames: 84, embed: 32, n_enc: 1, n_dec: 1, ..Self::studio(sources) }
    }

    /// The small configuration used for finite-difference checks.
    pub fn toy() -> Self {
        Self { height: 18, frames: 12, embed: 16, n_enc: 2, n_dec: 2, heads: 2, sources: 2, ..Self::studio(2) }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn validate(&self) -> Result<(), SttError> {
        let bad = |m: String| Err(SttError::Config(m));
        if self.height == 0 || self.frames == 0 || self.embed == 0 || self.sources == 0 || self.ff_mult == 0 {
            return bad(format!("dimensions must be positive: {self:?}"));
        }
        if self.n_enc == 0 || self.n_dec == 0 {
            return bad("encoder and decoder counts must be at least 1".into());
        }
        if self.heads == 0 || self.embed % self.heads != 0 {
            return bad(format!("{} heads do not divide embedding width {}", self.heads, self.embed));
        }
        if self.uses_spectral() && self.frames % self.heads != 0 {
            return bad(format!("{} heads do not divide frame count {} of the spectral path", self.heads, self.frames));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.ablation != Ablation::NoCnn {
            if self.cnn.is_empty() {
                return bad("empty CNN; use the no-CNN variant instead".into());
            }
            if let Some(c) = self.cnn.iter().find(|c| c.kernel % 2 == 0 || c.kernel == 0) {
                return bad(format!("convolution kernel {} must be odd", c.kernel));
            }
            if self.cnn.last().is_some_and(|c| c.channels != 0) {
                return bad("last convolution must keep the path width (channels = 0)".into());
            }
        }
        Ok(())
    }

    pub(crate) fn uses_spectral(&self) -> bool {
        !matches!(self.ablation, Ablation::TpOnly | Ablation::TpDouble)
    }

    /// Single-line JSON, the form hashed into checkpoints.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, SttError> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| SttError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for s in [2, 3, 5] {
            SttConfig::studio(s).validate().unwrap();
            SttConfig::desk(s).validate().unwrap();
        }
        SttConfig::toy().validate().unwrap();
        for &h in &HEAD_GRID {
            SttConfig { heads: h, ..SttConfig::studio(2) }.validate().unwrap();
        }
    }

    #[test]
    fn invalid_configs() {
        let c = SttConfig::toy();
        assert!(SttConfig { heads: 3, ..c.clone() }.validate().is_err());
        assert!(SttConfig { n_dec: 0, ..c.clone() }.validate().is_err());
        assert!(SttConfig { cnn: vec![ConvSpec { kernel: 2, channels: 0 }], ..c.clone() }.validate().is_err());
        assert!(SttConfig { cnn: vec![ConvSpec { kernel: 3, channels: 5 }], ..c.clone() }.validate().is_err());
        // 5 frames cannot be split across 2 spectral heads, unless the
        // spectral path is absent.
        let odd = SttConfig { frames: 5, ..c };
        assert!(odd.validate().is_err());
        odd.with_ablation(Ablation::TpOnly).validate().unwrap();
    }

    #[test]
    fn json_round_trip_and_names() {
        let c = SttConfig::desk(3).with_ablation(Ablation::NoMgn);
        assert_eq!(SttConfig::from_json(&c.to_json()).unwrap(), c);
        assert!(c.to_json().contains("\"no-mgn\""));
        for a in Ablation::ALL {
            assert_eq!(a.as_str().parse::<Ablation>().unwrap(), a);
        }
    }
}
