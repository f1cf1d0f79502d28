use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{AudioError, PcmClip};

fn map_hound(path: &Path, err: hound::Error) -> AudioError {
    let path = path.to_path_buf();
    match err {
        hound::Error::IoError(source) => AudioError::Io { path, source },
        hound::Error::FormatError(msg) => AudioError::Format { path, msg: msg.to_string() },
        hound::Error::Unsupported => {
            AudioError::UnsupportedCodec { path, msg: "unsupported WAV format".into() }
        }
        hound::Error::TooWide => {
            AudioError::UnsupportedCodec { path, msg: "sample width too large".into() }
        }
        other => AudioError::Format { path, msg: other.to_string() },
    }
}

/// Reads a PCM WAV file. Integer samples are divided by 2^(bits-1); only
/// channel 0 of multichannel files is kept. Accepted encodings: 8/16/24-bit
/// integer and 32-bit float. Float samples outside [-1, 1] are clamped.
pub fn read_wav(path: impl AsRef<Path>) -> Result<PcmClip, AudioError> {
    let path = path.as_ref();
    let reader = WavReader::open(path).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;

    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, bits @ (8 | 16 | 24)) => {
            let scale = 1.0 / (1u32 << (bits - 1)) as f32;
            reader
                .into_samples::<i32>()
                .step_by(channels)
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<Result<_, _>>()
                .map_err(|e| map_hound(path, e))?
        }
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .step_by(channels)
            .map(|s| s.map(|v| if v.is_finite() { v.clamp(-1.0, 1.0) } else { 0.0 }))
            .collect::<Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (format, bits) => {
            return Err(AudioError::UnsupportedCodec {
                path: path.to_path_buf(),
                msg: format!("{bits}-bit {format:?}"),
            })
        }
    };

    if samples.is_empty() {
        return Err(AudioError::EmptyClip(path.to_path_buf()));
    }
    PcmClip::new(samples, spec.sample_rate)
}

/// Quantizes one sample to 16 bits: clamp, scale by 2^15, round, saturate.
pub(crate) fn quantize_i16(v: f32) -> i16 {
    let scaled = (v.clamp(-1.0, 1.0) as f64 * 32768.0).round();
    scaled.clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

/// Writes a 16-bit PCM mono WAV.
pub fn write_wav(clip: &PcmClip, path: impl AsRef<Path>) -> Result<(), AudioError> {
    let path = path.as_ref();
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate(),
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path, spec).map_err(|e| map_hound(path, e))?;
    for &v in clip.samples() {
        writer.write_sample(quantize_i16(v)).map_err(|e| map_hound(path, e))?;
    }
    writer.finalize().map_err(|e| map_hound(path, e))
}
