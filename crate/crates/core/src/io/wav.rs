//! 16-bit PCM mono WAV at 16 kHz.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};
use crate::stft::{Waveform, SAMPLE_RATE};

const SCALE: f64 = 32768.0;

fn audio(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(e) => Error::Io(e),
        other => Error::Audio(other.to_string()),
    }
}

pub fn wav_read(path: impl AsRef<Path>) -> Result<Waveform> {
    let reader = WavReader::open(path.as_ref()).map_err(audio)?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::Audio(format!(
            "sample rate {} Hz, expected {SAMPLE_RATE}",
            spec.sample_rate
        )));
    }
    if spec.channels != 1 {
        return Err(Error::Audio(format!("channels {}, expected 1 (mono)", spec.channels)));
    }
    if spec.bits_per_sample != 16 || spec.sample_format != SampleFormat::Int {
        return Err(Error::Audio(format!(
            "bit depth {} ({:?}), expected 16-bit integer PCM",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / SCALE).map_err(audio))
        .collect::<Result<Vec<f64>>>()?;
    Ok(Waveform::new(samples))
}

/// Samples outside `[-1, 1]` are clipped with a warning.
pub fn wav_write(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    w.check_rate()?;
    let spec = WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let clipped = w.samples.iter().filter(|v| v.abs() > 1.0).count();
    if clipped > 0 {
        log::warn!("clipping {clipped} samples outside [-1, 1]");
    }
    if let Some(v) = w.samples.iter().find(|v| !v.is_finite()) {
        return Err(Error::Audio(format!("non-finite sample {v}")));
    }
    let mut writer = WavWriter::create(path.as_ref(), spec).map_err(audio)?;
    for &v in &w.samples {
        let q = (v.clamp(-1.0, 1.0) * SCALE).round().clamp(-SCALE, SCALE - 1.0) as i16;
        writer.write_sample(q).map_err(audio)?;
    }
    writer.finalize().map_err(audio)
}
