//! WAV ingestion and emission. Accepts single-channel 16-bit PCM or 32-bit
//! float at 32 kHz; everything else is rejected with a descriptive error.

use std::path::Path;

use super::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path)
        .map_err(|e| Error::Input(format!("cannot open {}: {}", path.display(), e)))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Input(format!(
            "{}: expected single-channel audio, got {} channels",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::Input(format!(
            "{}: expected {} Hz, got {} Hz",
            path.display(),
            SAMPLE_RATE,
            spec.sample_rate
        )));
    }
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32767.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Input(format!("{}: {}", path.display(), e)))?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Input(format!("{}: {}", path.display(), e)))?,
        (fmt, bits) => {
            return Err(Error::Input(format!(
                "{}: unsupported format {:?}/{} bits (16-bit PCM or 32-bit float only)",
                path.display(),
                fmt,
                bits
            )))
        }
    };
    Waveform::new(samples, SAMPLE_RATE)
}

pub fn write_wav_pcm16(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| Error::Input(format!("cannot create {}: {}", path.display(), e)))?;
    for &s in w.samples() {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer
            .write_sample(v)
            .map_err(|e| Error::Input(format!("write {}: {}", path.display(), e)))?;
    }
    writer
        .finalize()
        .map_err(|e| Error::Input(format!("finalize {}: {}", path.display(), e)))?;
    Ok(())
}
