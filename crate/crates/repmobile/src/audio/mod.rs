//! Waveform ingestion, log-mel frontend and training-time augmentations.

pub mod augment;
pub mod mel;
pub mod wav;

pub use augment::{AugmentConfig, AugmentDescriptor, FmsDraw};
pub use mel::{Frontend, FrontendConfig, LogMelSpec};

use crate::error::{Error, Result};

/// Sample rate every waveform in the toolkit runs at.
pub const SAMPLE_RATE: u32 = 32_000;
/// One-second clip length at [`SAMPLE_RATE`].
pub const CLIP_SAMPLES: usize = 32_000;

/// Single-channel audio at 32 kHz, values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::Input(format!(
                "expected {} Hz audio, got {} Hz (resampling is out of scope)",
                SAMPLE_RATE, sample_rate
            )));
        }
        if samples.iter().any(|s| !s.is_finite() || s.abs() > 1.0001) {
            return Err(Error::Data("waveform values must be finite and within [-1, 1]".into()));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
