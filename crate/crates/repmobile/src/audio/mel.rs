//! STFT plus HTK-mel filterbank log-power frontend.
//!
//! Framing has no centering: the first window starts at sample 0 and the
//! trailing remainder is dropped, so a 32000-sample clip at win=3072/hop=512
//! yields exactly 57 frames. Filters are triangular without area
//! normalization; they are stored sparsely since each FFT bin feeds at most
//! two of them.

use std::sync::Arc;

use rustfft::num_complex::Complex32;
use rustfft::{Fft, FftPlanner};

use super::Waveform;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrontendConfig {
    pub win: usize,
    pub hop: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    /// Floor added before the log; `ln(eps_mel)` is the spectrogram floor.
    pub eps_mel: f32,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            win: 3072,
            hop: 512,
            n_fft: 4096,
            n_mels: 256,
            fmin: 0.0,
            fmax: 16_000.0,
            eps_mel: 1e-5,
        }
    }
}

impl FrontendConfig {
    pub fn frames_for(&self, samples: usize) -> Result<usize> {
        if samples < self.win {
            return Err(Error::Input(format!(
                "waveform of {} samples is shorter than one window ({})",
                samples, self.win
            )));
        }
        Ok(1 + (samples - self.win) / self.hop)
    }

    pub fn log_floor(&self) -> f32 {
        self.eps_mel.ln()
    }
}

/// Log-mel spectrogram, `[n_mels, frames]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpec {
    values: Tensor<f32>,
}

impl LogMelSpec {
    pub fn new(values: Tensor<f32>) -> Self {
        debug_assert_eq!(values.shape().len(), 2);
        LogMelSpec { values }
    }

    pub fn bins(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn values(&self) -> &Tensor<f32> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Tensor<f32> {
        &mut self.values
    }

    pub fn into_values(self) -> Tensor<f32> {
        self.values
    }
}

struct MelFilter {
    first_bin: usize,
    weights: Vec<f32>,
}

/// Precomputed window, FFT plan and sparse filterbank.
pub struct Frontend {
    cfg: FrontendConfig,
    window: Vec<f32>,
    fft: Arc<dyn Fft<f32>>,
    filters: Vec<MelFilter>,
    centers_hz: Vec<f64>,
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl Frontend {
    pub fn new(cfg: FrontendConfig, sample_rate: u32) -> Self {
        assert!(cfg.n_fft >= cfg.win, "FFT size must cover the window");
        // periodic Hann
        let window: Vec<f32> = (0..cfg.win)
            .map(|i| {
                0.5 * (1.0 - (std::f64::consts::TAU * i as f64 / cfg.win as f64).cos()) as f32
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);

        let n_bins = cfg.n_fft / 2 + 1;
        let hz_per_bin = sample_rate as f64 / cfg.n_fft as f64;
        let mel_lo = hz_to_mel(cfg.fmin);
        let mel_hi = hz_to_mel(cfg.fmax);
        let points: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let centers_hz: Vec<f64> = points[1..=cfg.n_mels].to_vec();

        let mut filters = Vec::with_capacity(cfg.n_mels);
        for m in 0..cfg.n_mels {
            let (lo, mid, hi) = (points[m], points[m + 1], points[m + 2]);
            let mut first_bin = None;
            let mut weights = Vec::new();
            for k in 0..n_bins {
                let f = k as f64 * hz_per_bin;
                let w = if f <= lo || f >= hi {
                    0.0
                } else if f <= mid {
                    (f - lo) / (mid - lo).max(f64::MIN_POSITIVE)
                } else {
                    (hi - f) / (hi - mid).max(f64::MIN_POSITIVE)
                };
                if w > 0.0 {
                    if first_bin.is_none() {
                        first_bin = Some(k);
                    }
                    weights.push(w as f32);
                } else if first_bin.is_some() {
                    break; // support is contiguous
                }
            }
            filters.push(MelFilter {
                first_bin: first_bin.unwrap_or(0),
                weights,
            });
        }
        Frontend {
            cfg,
            window,
            fft,
            filters,
            centers_hz,
        }
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    /// Center frequency (Hz) of each mel filter.
    pub fn filter_centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    /// Waveform to log-mel spectrogram `[n_mels, frames]`.
    pub fn log_mel(&self, w: &Waveform) -> Result<LogMelSpec> {
        let cfg = &self.cfg;
        let frames = cfg.frames_for(w.len())?;
        let n_bins = cfg.n_fft / 2 + 1;
        let samples = w.samples();

        let mut out = Tensor::<f32>::zeros(&[cfg.n_mels, frames]);
        let mut buf = vec![Complex32::new(0.0, 0.0); cfg.n_fft];
        let mut scratch = vec![Complex32::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0f32; n_bins];

        for fr in 0..frames {
            let start = fr * cfg.hop;
            for i in 0..cfg.n_fft {
                buf[i] = if i < cfg.win {
                    Complex32::new(samples[start + i] * self.window[i], 0.0)
                } else {
                    Complex32::new(0.0, 0.0)
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (k, p) in power.iter_mut().enumerate() {
                *p = buf[k].norm_sqr();
            }
            for (m, filt) in self.filters.iter().enumerate() {
                let mut acc = 0f32;
                for (j, &fw) in filt.weights.iter().enumerate() {
                    acc += fw * power[filt.first_bin + j];
                }
                out.data_mut()[m * frames + fr] = (acc + cfg.eps_mel).ln();
            }
        }
        Ok(LogMelSpec::new(out))
    }
}

/// One-shot variant of [`Frontend::log_mel`]; builds the plan each call.
pub fn log_mel(w: &Waveform, cfg: FrontendConfig) -> Result<LogMelSpec> {
    Frontend::new(cfg, w.sample_rate()).log_mel(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::SAMPLE_RATE;

    fn frontend() -> Frontend {
        Frontend::new(FrontendConfig::default(), SAMPLE_RATE)
    }

    #[test]
    fn silence_hits_the_log_floor() {
        let w = Waveform::new(vec![0.0; 32_000], SAMPLE_RATE).unwrap();
        let spec = frontend().log_mel(&w).unwrap();
        let floor = 1e-5f32.ln();
        assert!((floor - (-11.5129)).abs() < 1e-3);
        for v in spec.values().data() {
            assert_eq!(*v, floor);
        }
    }

    #[test]
    fn clip_shape_is_256_by_57() {
        let w = Waveform::new(vec![0.1; 32_000], SAMPLE_RATE).unwrap();
        let spec = frontend().log_mel(&w).unwrap();
        // framing rule: 1 + (32000 - 3072) / 512
        assert_eq!((spec.bins(), spec.frames()), (256, 57));
    }

    #[test]
    fn too_short_waveform_is_an_error() {
        let w = Waveform::new(vec![0.0; 3000], SAMPLE_RATE).unwrap();
        assert!(matches!(frontend().log_mel(&w), Err(Error::Input(_))));
    }

    #[test]
    fn sine_peaks_at_nearest_filter_center() {
        let fe = frontend();
        let freq = 1000.0f64;
        let samples: Vec<f32> = (0..32_000)
            .map(|i| {
                (0.5 * (std::f64::consts::TAU * freq * i as f64 / SAMPLE_RATE as f64).sin()) as f32
            })
            .collect();
        let w = Waveform::new(samples, SAMPLE_RATE).unwrap();
        let spec = fe.log_mel(&w).unwrap();

        let expected: usize = fe
            .centers_hz
            .iter()
            .enumerate()
            .min_by(|a, b| {
                (a.1 - freq).abs().partial_cmp(&(b.1 - freq).abs()).unwrap()
            })
            .unwrap()
            .0;
        for fr in 0..spec.frames() {
            let argmax = (0..spec.bins())
                .max_by(|&a, &b| {
                    spec.values().data()[a * spec.frames() + fr]
                        .partial_cmp(&spec.values().data()[b * spec.frames() + fr])
                        .unwrap()
                })
                .unwrap();
            assert_eq!(argmax, expected, "frame {}", fr);
        }
    }

    #[test]
    fn hop_aligned_roll_permutes_interior_frames() {
        let mut rng = crate::rng::stream_rng(3, &[0x3e1]);
        use rand::Rng;
        let samples: Vec<f32> = (0..32_000).map(|_| rng.random_range(-0.5..0.5)).collect();
        let w = Waveform::new(samples, SAMPLE_RATE).unwrap();
        let fe = frontend();
        let base = fe.log_mel(&w).unwrap();

        let k = 3usize; // roll by k hops
        let rolled = crate::audio::augment::roll_by(&w, (k * 512) as i32);
        let spec = fe.log_mel(&rolled).unwrap();
        // frame f of the rolled signal equals frame f-k of the original for
        // interior frames (window wrap touches only the boundary)
        let fr = base.frames();
        for f in k..fr {
            for m in 0..base.bins() {
                let a = spec.values().data()[m * fr + f];
                let b = base.values().data()[m * fr + (f - k)];
                assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()), "bin {} frame {}", m, f);
            }
        }
    }
}
