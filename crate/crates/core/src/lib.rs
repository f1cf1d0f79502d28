//! Monaural source separation with a spectro-temporal transformer.
//!
//! The crate covers the whole pipeline at desk scale:
//!
//! * [`audio`]: PCM clips, WAV I/O and a deterministic synthetic corpus.
//! * [`dsp`]: centered STFT / iSTFT in the concatenated real∥imag layout.
//! * [`forge`]: mixture synthesis under the interclass / intraclass / hybrid
//!   sampling policies, with reproducible manifests.
//! * [`autodiff`]: a small tape-based reverse-mode engine, Adam, and
//!   finite-difference checking.
//! * [`stt`]: the spectro-temporal transformer and its ablation variants.
//! * [`bijection`]: the greedy bijection MSE set loss and a Hungarian oracle.
//! * [`train`]: training, evaluation, separation and checkpoints.

pub mod audio;
pub mod autodiff;
pub mod bijection;
pub mod dsp;
pub mod forge;
pub mod gradsuite;
pub mod seed;
pub mod stt;
pub mod train;

pub use audio::{Corpus, CorpusSpec, Fold, PcmClip};
pub use autodiff::{Real, Tape, Tensor, Var};
pub use dsp::{Spectrogram, StftParams};
pub use forge::{DatasetManifest, MixtureRecord, Partition, SubdatasetId};
pub use stt::{Ablation, SttConfig, SttModel};
pub use train::{Profile, TrainConfig};
