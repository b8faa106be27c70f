//! Training-time augmentations: circular waveform roll, frequency-band
//! masking, and Freq-MixStyle (per-frequency statistics mixing across the
//! batch).
//!
//! Every random choice is captured in an [`AugmentDescriptor`] drawn from a
//! keyed stream, and applying a descriptor is a pure function, so an
//! augmented view can be replayed bitwise later — that is what the teacher
//! logits cache relies on.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;

use super::mel::{Frontend, LogMelSpec};
use super::Waveform;
use crate::error::{Error, Result};
use crate::rng::{stream_key, stream_rng};
use crate::tensor::Tensor;

const TAG_SAMPLE: u64 = 0x5a17;
const TAG_FMS: u64 = 0xf3f5;
const TAG_ORDER: u64 = 0x04de;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub roll: bool,
    /// Maximum circular shift in samples (125 ms at 32 kHz).
    pub roll_max_shift: usize,
    pub spec_mask: bool,
    /// Maximum masked band width in mel bins.
    pub mask_max_width: usize,
    pub n_mels: usize,
    pub fms: bool,
    pub fms_alpha: f64,
    pub fms_p: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            roll: true,
            roll_max_shift: 4000,
            spec_mask: true,
            mask_max_width: 48,
            n_mels: 256,
            fms: true,
            fms_alpha: 0.3,
            fms_p: 0.7,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            roll: false,
            spec_mask: false,
            fms: false,
            ..AugmentConfig::default()
        }
    }
}

/// Freq-MixStyle part of a descriptor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FmsField {
    pub applied: bool,
    /// Sample id whose statistics are mixed in (may equal the own id).
    pub partner: u64,
    pub lambda: f32,
}

impl FmsField {
    pub fn none() -> Self {
        FmsField {
            applied: false,
            partner: u64::MAX,
            lambda: 0.0,
        }
    }
}

/// Everything needed to rebuild one augmented training view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDescriptor {
    /// Key of the per-sample stream the draws came from (kept for audit).
    pub seed: u64,
    pub roll_shift: i32,
    pub mask_start: u32,
    pub mask_width: u32,
    pub fms: FmsField,
}

pub const DESCRIPTOR_BYTES: usize = 33;

impl AugmentDescriptor {
    pub fn identity() -> Self {
        AugmentDescriptor {
            seed: 0,
            roll_shift: 0,
            mask_start: 0,
            mask_width: 0,
            fms: FmsField::none(),
        }
    }

    pub fn to_bytes(&self) -> [u8; DESCRIPTOR_BYTES] {
        let mut b = [0u8; DESCRIPTOR_BYTES];
        b[0..8].copy_from_slice(&self.seed.to_le_bytes());
        b[8..12].copy_from_slice(&self.roll_shift.to_le_bytes());
        b[12..16].copy_from_slice(&self.mask_start.to_le_bytes());
        b[16..20].copy_from_slice(&self.mask_width.to_le_bytes());
        b[20] = self.fms.applied as u8;
        b[21..29].copy_from_slice(&self.fms.partner.to_le_bytes());
        b[29..33].copy_from_slice(&self.fms.lambda.to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() != DESCRIPTOR_BYTES {
            return Err(Error::Format(format!(
                "augment descriptor must be {} bytes, got {}",
                DESCRIPTOR_BYTES,
                b.len()
            )));
        }
        let u64at = |i: usize| u64::from_le_bytes(b[i..i + 8].try_into().unwrap());
        let u32at = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().unwrap());
        Ok(AugmentDescriptor {
            seed: u64at(0),
            roll_shift: i32::from_le_bytes(b[8..12].try_into().unwrap()),
            mask_start: u32at(12),
            mask_width: u32at(16),
            fms: FmsField {
                applied: b[20] != 0,
                partner: u64at(21),
                lambda: f32::from_le_bytes(b[29..33].try_into().unwrap()),
            },
        })
    }
}

/// Circular shift; positive values move content toward later times.
pub fn roll_by(w: &Waveform, shift: i32) -> Waveform {
    let n = w.len();
    if n == 0 {
        return w.clone();
    }
    let s = shift.rem_euclid(n as i32) as usize;
    let src = w.samples();
    let mut out = Vec::with_capacity(n);
    out.extend_from_slice(&src[n - s..]);
    out.extend_from_slice(&src[..n - s]);
    Waveform::new(out, w.sample_rate()).expect("roll preserves validity")
}

/// Draw a shift uniform in `[-max_shift, +max_shift]` and apply it.
pub fn roll_waveform(w: &Waveform, rng: &mut ChaCha8Rng, max_shift: usize) -> (Waveform, i32) {
    let m = max_shift as i32;
    let shift = rng.random_range(-m..=m);
    (roll_by(w, shift), shift)
}

/// Set mel rows `[start, start+width)` to `fill`.
pub fn mask_band(spec: &LogMelSpec, start: u32, width: u32, fill: f32) -> LogMelSpec {
    let mut out = spec.clone();
    let frames = out.frames();
    let end = ((start + width) as usize).min(out.bins());
    for m in start as usize..end {
        for v in &mut out.values_mut().data_mut()[m * frames..(m + 1) * frames] {
            *v = fill;
        }
    }
    out
}

/// One random contiguous frequency mask; returns the masked spectrogram and
/// the `(start, width)` drawn.
pub fn spec_augment_freq(
    spec: &LogMelSpec,
    rng: &mut ChaCha8Rng,
    max_width: usize,
    fill: f32,
) -> (LogMelSpec, u32, u32) {
    let (width, start) = draw_mask(rng, spec.bins(), max_width);
    (mask_band(spec, start, width, fill), start, width)
}

fn draw_mask(rng: &mut ChaCha8Rng, n_mels: usize, max_width: usize) -> (u32, u32) {
    let width = rng.random_range(0..=max_width) as u32;
    let start = rng.random_range(0..=(n_mels as u32 - width));
    (width, start)
}

const FMS_EPS: f32 = 1e-5;

/// Per-frequency mean/std over time for one `[F, T]` spectrogram slice.
fn freq_stats(x: &[f32], f: usize, t: usize) -> (Vec<f32>, Vec<f32>) {
    let inv_t = 1.0 / t as f32;
    let mut mean = vec![0f32; f];
    let mut std = vec![0f32; f];
    for fi in 0..f {
        let row = &x[fi * t..(fi + 1) * t];
        let m: f32 = row.iter().sum::<f32>() * inv_t;
        let var: f32 = row.iter().map(|v| (v - m) * (v - m)).sum::<f32>() * inv_t;
        mean[fi] = m;
        std[fi] = var.sqrt();
    }
    (mean, std)
}

/// Core Freq-MixStyle: normalize `own` by its per-frequency statistics and
/// re-inject a `lambda`-blend of own and partner statistics. Both the live
/// batch path and the cache replay path call exactly this function.
pub fn fms_mix(own: &[f32], partner: &[f32], f: usize, t: usize, lambda: f32) -> Vec<f32> {
    let (mu_o, sd_o) = freq_stats(own, f, t);
    let (mu_p, sd_p) = freq_stats(partner, f, t);
    let mut out = vec![0f32; f * t];
    for fi in 0..f {
        let sd_mix = lambda * sd_o[fi] + (1.0 - lambda) * sd_p[fi];
        let mu_mix = lambda * mu_o[fi] + (1.0 - lambda) * mu_p[fi];
        let inv = 1.0 / (sd_o[fi] + FMS_EPS);
        for ti in 0..t {
            let xhat = (own[fi * t + ti] - mu_o[fi]) * inv;
            out[fi * t + ti] = xhat * sd_mix + mu_mix;
        }
    }
    out
}

/// Batch-level draw for Freq-MixStyle.
#[derive(Debug, Clone, PartialEq)]
pub struct FmsDraw {
    pub applied: bool,
    pub lambda: f32,
    pub perm: Vec<usize>,
}

impl FmsDraw {
    pub fn skipped(n: usize) -> Self {
        FmsDraw {
            applied: false,
            lambda: 0.0,
            perm: (0..n).collect(),
        }
    }
}

pub fn draw_fms(n: usize, alpha: f64, p: f64, rng: &mut ChaCha8Rng) -> FmsDraw {
    if n < 2 {
        return FmsDraw::skipped(n);
    }
    let applied = rng.random::<f64>() < p;
    if !applied {
        return FmsDraw::skipped(n);
    }
    let beta = rand_distr::Beta::new(alpha, alpha).expect("alpha > 0");
    let lambda = beta.sample(rng) as f32;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    FmsDraw {
        applied: true,
        lambda,
        perm,
    }
}

/// Apply a fixed Freq-MixStyle draw to a `[N,1,F,T]` batch.
pub fn apply_fms(batch: &Tensor<f32>, lambda: f32, perm: &[usize]) -> Result<Tensor<f32>> {
    let s = batch.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::Dimension(format!("freq_mixstyle expects [N,1,F,T], got {:?}", s)));
    }
    let (n, f, t) = (s[0], s[2], s[3]);
    if perm.len() != n {
        return Err(Error::Dimension("permutation length != batch size".into()));
    }
    let ft = f * t;
    let mut out = Tensor::<f32>::zeros(s);
    for i in 0..n {
        let own = &batch.data()[i * ft..(i + 1) * ft];
        let partner = &batch.data()[perm[i] * ft..(perm[i] + 1) * ft];
        out.data_mut()[i * ft..(i + 1) * ft].copy_from_slice(&fms_mix(own, partner, f, t, lambda));
    }
    Ok(out)
}

/// Freq-MixStyle as a batch operation: with probability `p` mix per-frequency
/// statistics under a Beta(alpha, alpha) blend and a random permutation,
/// otherwise return the input untouched. Batches smaller than two are
/// returned untouched.
pub fn freq_mixstyle(
    batch: &Tensor<f32>,
    alpha: f64,
    p: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<f32>> {
    let n = *batch
        .shape()
        .first()
        .ok_or_else(|| Error::Dimension("empty batch".into()))?;
    if n < 2 {
        eprintln!("freq_mixstyle: batch of {} is too small to mix, skipping", n);
        return Ok(batch.clone());
    }
    let draw = draw_fms(n, alpha, p, rng);
    if !draw.applied {
        return Ok(batch.clone());
    }
    apply_fms(batch, draw.lambda, &draw.perm)
}

/// Deterministic order in which an epoch visits the given sample ids.
pub fn epoch_order(master_seed: u64, epoch: u32, ids: &[u64]) -> Vec<u64> {
    let mut out = ids.to_vec();
    let mut rng = stream_rng(master_seed, &[TAG_ORDER, epoch as u64]);
    out.shuffle(&mut rng);
    out
}

/// Draw the descriptors for one batch. Per-sample fields come from streams
/// keyed by `(seed, epoch, sample id)`; the Freq-MixStyle fields come from a
/// batch-level stream keyed by `(seed, epoch, batch index)`. Iteration order
/// never shifts anyone's randomness.
pub fn draw_batch_descriptors(
    master_seed: u64,
    epoch: u32,
    batch_index: u32,
    ids: &[u64],
    cfg: &AugmentConfig,
) -> Vec<AugmentDescriptor> {
    let mut descs: Vec<AugmentDescriptor> = ids
        .iter()
        .map(|&id| {
            let key = stream_key(master_seed, &[TAG_SAMPLE, epoch as u64, id]);
            let mut rng = stream_rng(master_seed, &[TAG_SAMPLE, epoch as u64, id]);
            let roll_shift = if cfg.roll {
                let m = cfg.roll_max_shift as i32;
                rng.random_range(-m..=m)
            } else {
                0
            };
            let (mask_width, mask_start) = if cfg.spec_mask {
                draw_mask(&mut rng, cfg.n_mels, cfg.mask_max_width)
            } else {
                (0, 0)
            };
            AugmentDescriptor {
                seed: key,
                roll_shift,
                mask_start,
                mask_width,
                fms: FmsField::none(),
            }
        })
        .collect();

    if cfg.fms {
        let mut rng = stream_rng(master_seed, &[TAG_FMS, epoch as u64, batch_index as u64]);
        let draw = draw_fms(ids.len(), cfg.fms_alpha, cfg.fms_p, &mut rng);
        if draw.applied {
            for (i, d) in descs.iter_mut().enumerate() {
                d.fms = FmsField {
                    applied: true,
                    partner: ids[draw.perm[i]],
                    lambda: draw.lambda,
                };
            }
        }
    }
    descs
}

/// Roll + log-mel + frequency mask for one sample; the Freq-MixStyle step is
/// applied on top of this by [`replay_augmented`] or the batch path.
pub fn pre_fms_spec(
    frontend: &Frontend,
    wave: &Waveform,
    desc: &AugmentDescriptor,
) -> Result<LogMelSpec> {
    let rolled = roll_by(wave, desc.roll_shift);
    let spec = frontend.log_mel(&rolled)?;
    if desc.mask_width > 0 {
        Ok(mask_band(
            &spec,
            desc.mask_start,
            desc.mask_width,
            frontend.config().log_floor(),
        ))
    } else {
        Ok(spec)
    }
}

/// Rebuild the exact augmented spectrogram a descriptor denotes. When the
/// descriptor has Freq-MixStyle applied, the partner's waveform and
/// descriptor (same epoch) must be supplied.
pub fn replay_augmented(
    frontend: &Frontend,
    wave: &Waveform,
    desc: &AugmentDescriptor,
    partner: Option<(&Waveform, &AugmentDescriptor)>,
) -> Result<LogMelSpec> {
    let own = pre_fms_spec(frontend, wave, desc)?;
    if !desc.fms.applied {
        return Ok(own);
    }
    let (pw, pd) = partner.ok_or_else(|| {
        Error::Data(format!(
            "descriptor mixes with sample {} but no partner was supplied",
            desc.fms.partner
        ))
    })?;
    let pspec = pre_fms_spec(frontend, pw, pd)?;
    let (f, t) = (own.bins(), own.frames());
    let mixed = fms_mix(own.values().data(), pspec.values().data(), f, t, desc.fms.lambda);
    Ok(LogMelSpec::new(Tensor::from_vec(&[f, t], mixed)?))
}
