//! Synthetic acoustic-scene generator with device mismatch.
//!
//! Each of the ten classes is a fixed recipe of two amplitude-modulated
//! tones plus a band of random-phase sinusoids; the bands and tone
//! frequencies are pairwise distinct so a linear classifier on time-averaged
//! log-mel features separates the classes easily. Each simulated device is a
//! fixed random 32-tap FIR coloration filter. Generation is a pure function
//! of the dataset seed, so regeneration is bitwise identical.

use std::f64::consts::TAU;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::index::{DatasetIndex, SampleMeta};
use crate::audio::{wav, Waveform, CLIP_SAMPLES, SAMPLE_RATE};
use crate::error::Result;
use crate::rng::{stream_key, stream_rng};

const TAG_SAMPLE: u64 = 0xda7a;
const TAG_DEVICE: u64 = 0xf117;
pub const FIR_TAPS: usize = 32;
const NOISE_COMPONENTS: usize = 48;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSceneSpec {
    pub num_classes: usize,
    pub num_devices: usize,
    /// Devices `0..held_out_device` appear in training data; the last device
    /// is reserved for the test split's unseen-device condition.
    pub held_out_device: usize,
    pub seed: u64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        SyntheticSceneSpec {
            num_classes: 10,
            num_devices: 4,
            held_out_device: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Class recipe: tone frequencies (Hz), AM rate (Hz), noise band (Hz).
struct Recipe {
    tone1: f64,
    tone2: f64,
    am_rate: f64,
    band: (f64, f64),
}

fn recipe(class: usize) -> Recipe {
    let k = class as f64;
    Recipe {
        tone1: 180.0 * (k + 1.0),
        tone2: 486.0 * (k + 1.0),
        am_rate: 1.5 + 0.9 * k,
        band: (2200.0 + 850.0 * k, 3300.0 + 850.0 * k),
    }
}

/// Fixed coloration filter of one simulated device.
pub fn device_fir(dataset_seed: u64, device: u32) -> Vec<f32> {
    let mut rng = stream_rng(dataset_seed, &[TAG_DEVICE, device as u64]);
    let mut taps = vec![0f32; FIR_TAPS];
    taps[0] = 1.0;
    let mut decay = 0.5f64;
    for t in taps.iter_mut().skip(1) {
        let n: f64 = StandardNormal.sample(&mut rng);
        *t = (n * decay) as f32;
        decay *= 0.75;
    }
    taps
}

fn synth_clip(spec: &SyntheticSceneSpec, split: Split, id: u64, class: usize, device: u32) -> Waveform {
    let mut rng = stream_rng(spec.seed, &[TAG_SAMPLE, split.tag(), id]);
    let r = recipe(class);
    let sr = SAMPLE_RATE as f64;

    // tonal components with jittered frequency and random phase
    let jit = |rng: &mut rand_chacha::ChaCha8Rng| 1.0 + rng.random_range(-0.02..0.02);
    let f1 = r.tone1 * jit(&mut rng);
    let f2 = r.tone2 * jit(&mut rng);
    let p1: f64 = rng.random_range(0.0..TAU);
    let p2: f64 = rng.random_range(0.0..TAU);
    let a1 = 0.5 * rng.random_range(0.8..1.2);
    let a2 = 0.35 * rng.random_range(0.8..1.2);
    let am_phase: f64 = rng.random_range(0.0..TAU);

    // band-limited noise as a sum of random-phase sinusoids
    let mut noise: Vec<(f64, f64, f64)> = Vec::with_capacity(NOISE_COMPONENTS);
    let na = 0.35 / (NOISE_COMPONENTS as f64).sqrt();
    for _ in 0..NOISE_COMPONENTS {
        let f = rng.random_range(r.band.0..r.band.1);
        let p = rng.random_range(0.0..TAU);
        let a = na * rng.random_range(0.5..1.5);
        noise.push((f, p, a));
    }

    let mut x = vec![0f64; CLIP_SAMPLES];
    for (i, v) in x.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let am = 0.6 + 0.4 * (TAU * r.am_rate * t + am_phase).sin();
        let mut s = am * (a1 * (TAU * f1 * t + p1).sin() + a2 * (TAU * f2 * t + p2).sin());
        for (f, p, a) in &noise {
            s += a * (TAU * f * t + p).sin();
        }
        *v = s;
    }

    // device coloration
    let fir = device_fir(spec.seed, device);
    let mut y = vec![0f32; CLIP_SAMPLES];
    for i in 0..CLIP_SAMPLES {
        let mut acc = 0f64;
        for (j, tap) in fir.iter().enumerate() {
            if i >= j {
                acc += *tap as f64 * x[i - j];
            }
        }
        y[i] = acc as f32;
    }

    // peak-normalize into [-0.95, 0.95]
    let peak = y.iter().fold(0f32, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = 0.95 / peak;
        for v in &mut y {
            *v *= g;
        }
    }
    Waveform::new(y, SAMPLE_RATE).expect("synthesized clip is valid")
}

/// Generate one split: `n_per_class` clips per class, devices assigned
/// round-robin (training uses only the non-held-out devices), WAV files plus
/// a JSON-lines index.
pub fn gen_split(
    spec: &SyntheticSceneSpec,
    n_per_class: usize,
    split: Split,
    out_dir: &Path,
) -> Result<DatasetIndex> {
    std::fs::create_dir_all(out_dir)?;
    let devices: Vec<u32> = match split {
        Split::Train => (0..spec.held_out_device as u32).collect(),
        Split::Test => (0..spec.num_devices as u32).collect(),
    };
    let mut metas = Vec::with_capacity(spec.num_classes * n_per_class);
    let mut id = 0u64;
    for class in 0..spec.num_classes {
        for j in 0..n_per_class {
            let device = devices[j % devices.len()];
            metas.push(SampleMeta {
                id,
                class: class as u32,
                device,
                seed: stream_key(spec.seed, &[TAG_SAMPLE, split.tag(), id]),
                file: format!("{}_{:06}.wav", split.label(), id),
            });
            id += 1;
        }
    }

    metas
        .par_iter()
        .map(|m| {
            let w = synth_clip(spec, split, m.id, m.class as usize, m.device);
            wav::write_wav_pcm16(&out_dir.join(&m.file), &w)
        })
        .collect::<Result<Vec<_>>>()?;

    let index = DatasetIndex {
        root: out_dir.to_path_buf(),
        samples: metas,
    };
    index.write()?;
    Ok(index)
}

/// Synthesize one clip in memory (no files); used by tests.
pub fn clip_in_memory(
    spec: &SyntheticSceneSpec,
    split: Split,
    id: u64,
    class: usize,
    device: u32,
) -> Waveform {
    synth_clip(spec, split, id, class, device)
}
