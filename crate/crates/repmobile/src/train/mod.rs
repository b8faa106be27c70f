//! Training loop, learning-rate schedule, and evaluation.
//!
//! All randomness (epoch order, augmentation draws) comes from streams keyed
//! by the master seed, epoch and sample id, never from a shared sequential
//! generator, so runs are bit-reproducible and a distillation run replays
//! the exact inputs a cached teacher saw.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::audio::augment::{
    draw_batch_descriptors, epoch_order, fms_mix, pre_fms_spec, AugmentConfig,
    AugmentDescriptor,
};
use crate::audio::{Frontend, FrontendConfig, LogMelSpec};
use crate::data::LoadedDataset;
use crate::distill::{distill_loss_graph, DistillConfig, LogitsCache};
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::tensor::{Adam, AdamConfig, Graph, Tensor};

/// Warmup-cosine learning rate: linear `0 -> peak` over the first
/// `warmup` epochs, then half-cosine `peak -> 0` over the remainder.
pub fn lr_schedule(epoch: f64, total_epochs: f64, warmup: f64, peak: f64) -> f64 {
    let e = epoch.clamp(0.0, total_epochs);
    if warmup > 0.0 && e <= warmup {
        peak * e / warmup
    } else {
        let span = (total_epochs - warmup).max(f64::MIN_POSITIVE);
        0.5 * peak * (1.0 + (std::f64::consts::PI * (e - warmup) / span).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: f64,
    pub peak_lr: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    pub augment: AugmentConfig,
    pub frontend: FrontendConfig,
    /// Evaluate on the test split every this many epochs (0 = final only).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            warmup_epochs: 5.0,
            peak_lr: 0.01,
            seed: 0,
            adam: AdamConfig::default(),
            augment: AugmentConfig::default(),
            frontend: FrontendConfig::default(),
            eval_every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub eval_acc: Option<f64>,
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,lr,train_loss,eval_acc\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.8},{:.6},{}\n",
            r.epoch,
            r.lr,
            r.train_loss,
            r.eval_acc.map_or(String::new(), |a| format!("{:.6}", a))
        ));
    }
    out
}

/// Which loss drives the run.
pub enum LossSpec<'a> {
    CrossEntropy,
    Distill {
        cache: &'a LogitsCache,
        cfg: DistillConfig,
    },
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: ModelGraph<f32>,
    pub metrics: Vec<EpochMetrics>,
    pub best_accuracy: Option<f64>,
    pub best_model: Option<ModelGraph<f32>>,
}

/// The deterministic batch layout of one epoch.
pub(crate) fn epoch_batches(
    seed: u64,
    epoch: u32,
    sorted_ids: &[u64],
    batch_size: usize,
) -> Vec<Vec<u64>> {
    epoch_order(seed, epoch, sorted_ids)
        .chunks(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect()
}

/// Assemble the augmented `[N,1,F,T]` input for one batch. Freq-MixStyle
/// partners are resolved inside the batch; `partner_desc` supplies the
/// descriptor of a partner that is not part of it (cache replay).
pub(crate) fn augmented_batch(
    frontend: &Frontend,
    data: &LoadedDataset,
    ids: &[u64],
    descs: &[AugmentDescriptor],
    partner_desc: &dyn Fn(u64) -> Result<AugmentDescriptor>,
) -> Result<Tensor<f32>> {
    let pre: Vec<LogMelSpec> = ids
        .par_iter()
        .zip(descs.par_iter())
        .map(|(id, d)| pre_fms_spec(frontend, data.wave(*id)?, d))
        .collect::<Result<_>>()?;
    let (f, t) = (pre[0].bins(), pre[0].frames());
    let ft = f * t;
    let mut out = Tensor::<f32>::zeros(&[ids.len(), 1, f, t]);
    for (i, d) in descs.iter().enumerate() {
        let row = if d.fms.applied {
            let pid = d.fms.partner;
            match ids.iter().position(|&x| x == pid) {
                Some(p) => fms_mix(pre[i].values().data(), pre[p].values().data(), f, t, d.fms.lambda),
                None => {
                    let pd = partner_desc(pid)?;
                    let pspec = pre_fms_spec(frontend, data.wave(pid)?, &pd)?;
                    fms_mix(pre[i].values().data(), pspec.values().data(), f, t, d.fms.lambda)
                }
            }
        } else {
            pre[i].values().data().to_vec()
        };
        out.data_mut()[i * ft..(i + 1) * ft].copy_from_slice(&row);
    }
    Ok(out)
}

/// Train a model. Cross-entropy runs draw augmentations live from the plan;
/// distillation runs replay the cached descriptors (which the cache builder
/// drew from the same plan) and abort on any missing (sample, epoch) record.
pub fn fit(
    mut model: ModelGraph<f32>,
    data: &LoadedDataset,
    subset: Option<&[u64]>,
    test: Option<&LoadedDataset>,
    cfg: &TrainConfig,
    loss: &LossSpec,
) -> Result<TrainOutcome> {
    let frontend = Frontend::new(cfg.frontend, crate::audio::SAMPLE_RATE);
    let mut ids: Vec<u64> = subset.map(|s| s.to_vec()).unwrap_or_else(|| data.ids());
    ids.sort_unstable();
    if ids.is_empty() {
        return Err(Error::Input("training subset is empty".into()));
    }
    let num_classes = model.num_classes();
    let mut adam = Adam::<f32>::new(cfg.adam);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, ModelGraph<f32>)> = None;

    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(cfg.seed, epoch as u32, &ids, cfg.batch_size);
        let n_batches = batches.len();
        let mut loss_sum = 0f64;

        for (batch_idx, batch_ids) in batches.into_iter().enumerate() {
            let labels: Vec<usize> = batch_ids
                .iter()
                .map(|id| data.meta(*id).map(|m| m.class as usize))
                .collect::<Result<_>>()?;

            let (input, teacher_logits, distill_cfg) = match loss {
                LossSpec::CrossEntropy => {
                    let descs = draw_batch_descriptors(
                        cfg.seed,
                        epoch as u32,
                        batch_idx as u32,
                        &batch_ids,
                        &cfg.augment,
                    );
                    let input = augmented_batch(&frontend, data, &batch_ids, &descs, &|p| {
                        Err(Error::Data(format!("partner {} missing from live batch", p)))
                    })?;
                    (input, Vec::new(), None)
                }
                LossSpec::Distill { cache, cfg: dcfg } => {
                    let mut descs = Vec::with_capacity(batch_ids.len());
                    for id in &batch_ids {
                        descs.push(cache.lookup(*id, epoch as u32)?.descriptor);
                    }
                    let input = augmented_batch(&frontend, data, &batch_ids, &descs, &|p| {
                        Ok(cache.lookup(p, epoch as u32)?.descriptor)
                    })?;
                    let k = cache.num_teachers();
                    let c = cache.num_classes as usize;
                    if c != num_classes {
                        return Err(Error::Config(format!(
                            "cache has {} classes, model has {}",
                            c, num_classes
                        )));
                    }
                    let mut teachers = Vec::with_capacity(k);
                    for ki in 0..k {
                        let mut t = Tensor::<f32>::zeros(&[batch_ids.len(), c]);
                        for (row, id) in batch_ids.iter().enumerate() {
                            let record = cache.lookup(*id, epoch as u32)?;
                            t.data_mut()[row * c..(row + 1) * c]
                                .copy_from_slice(cache.teacher_logits(record, ki));
                        }
                        teachers.push(t);
                    }
                    (input, teachers, Some(*dcfg))
                }
            };

            let mut g = Graph::<f32>::new();
            let (logits, binding) = model.forward_train(&mut g, input)?;
            let loss_node = match distill_cfg {
                None => g.cross_entropy(logits, &labels)?,
                Some(dcfg) => distill_loss_graph(&mut g, logits, &teacher_logits, &labels, &dcfg)?,
            };
            let loss_value = g.value(loss_node).item() as f64;
            if !loss_value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss diverged at epoch {} batch {}",
                    epoch, batch_idx
                )));
            }
            loss_sum += loss_value;
            g.backward(loss_node)?;
            let lr = lr_schedule(
                epoch as f64 + batch_idx as f64 / n_batches.max(1) as f64,
                cfg.epochs as f64,
                cfg.warmup_epochs,
                cfg.peak_lr,
            );
            model.apply_gradients(&g, &binding, &mut adam, lr);
        }

        let should_eval = test.is_some()
            && (epoch + 1 == cfg.epochs
                || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0));
        let eval_acc = if should_eval {
            let report = evaluate(&model, test.unwrap(), &frontend, cfg.batch_size)?;
            if best.as_ref().is_none_or(|(a, _)| report.accuracy > *a) {
                best = Some((report.accuracy, model.clone()));
            }
            Some(report.accuracy)
        } else {
            None
        };
        metrics.push(EpochMetrics {
            epoch,
            lr: lr_schedule(
                epoch as f64,
                cfg.epochs as f64,
                cfg.warmup_epochs,
                cfg.peak_lr,
            ),
            train_loss: loss_sum / n_batches.max(1) as f64,
            eval_acc,
        });
    }

    model.finalize_training();
    let (best_accuracy, best_model) = match best {
        Some((a, mut m)) => {
            m.finalize_training();
            (Some(a), Some(m))
        }
        None => (None, None),
    };
    Ok(TrainOutcome {
        model,
        metrics,
        best_accuracy,
        best_model,
    })
}

/// Anything that maps a `[N,1,F,T]` batch to `[N,C]` logits.
pub trait Classifier {
    fn classify(&self, x: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl Classifier for ModelGraph<f32> {
    fn classify(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.forward_eval(x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// (correct, total) per class index.
    pub per_class: Vec<(usize, usize)>,
    /// (correct, total) per device id.
    pub per_device: BTreeMap<u32, (usize, usize)>,
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "top-1 accuracy: {:.2}% ({}/{})\n",
            self.accuracy * 100.0,
            self.correct,
            self.total
        );
        for (c, (ok, n)) in self.per_class.iter().enumerate() {
            if *n > 0 {
                out.push_str(&format!(
                    "  class {:>2}: {:>6.2}% ({}/{})\n",
                    c,
                    100.0 * *ok as f64 / *n as f64,
                    ok,
                    n
                ));
            }
        }
        for (d, (ok, n)) in &self.per_device {
            out.push_str(&format!(
                "  device {:>2}: {:>6.2}% ({}/{})\n",
                d,
                100.0 * *ok as f64 / *n as f64,
                ok,
                n
            ));
        }
        out
    }
}

/// Top-1 accuracy over a split; inputs are plain log-mel spectrograms (no
/// augmentation), so evaluation is deterministic.
pub fn evaluate(
    model: &impl Classifier,
    data: &LoadedDataset,
    frontend: &Frontend,
    batch_size: usize,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Input("evaluation split is empty".into()));
    }
    let mut ids = data.ids();
    ids.sort_unstable();
    let num_classes = data.index.num_classes().max(10);
    let mut per_class = vec![(0usize, 0usize); num_classes];
    let mut per_device: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    let mut correct = 0usize;

    for chunk in ids.chunks(batch_size.max(1)) {
        let specs: Vec<LogMelSpec> = chunk
            .par_iter()
            .map(|id| frontend.log_mel(data.wave(*id)?))
            .collect::<Result<_>>()?;
        let (f, t) = (specs[0].bins(), specs[0].frames());
        let ft = f * t;
        let mut x = Tensor::<f32>::zeros(&[chunk.len(), 1, f, t]);
        for (i, s) in specs.iter().enumerate() {
            x.data_mut()[i * ft..(i + 1) * ft].copy_from_slice(s.values().data());
        }
        let logits = model.classify(&x)?;
        let c = logits.shape()[1];
        for (row, id) in chunk.iter().enumerate() {
            let meta = data.meta(*id)?;
            let pred = crate::reparam::argmax(&logits.data()[row * c..(row + 1) * c]);
            let hit = pred == meta.class as usize;
            if hit {
                correct += 1;
            }
            let pc = &mut per_class[meta.class as usize];
            pc.1 += 1;
            if hit {
                pc.0 += 1;
            }
            let pd = per_device.entry(meta.device).or_insert((0, 0));
            pd.1 += 1;
            if hit {
                pd.0 += 1;
            }
        }
    }
    Ok(EvalReport {
        accuracy: correct as f64 / ids.len() as f64,
        correct,
        total: ids.len(),
        per_class,
        per_device,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{LoadedDataset, SampleMeta};

    #[test]
    fn lr_schedule_endpoints_and_midpoint() {
        let e = 30.0;
        assert_eq!(lr_schedule(0.0, e, 5.0, 0.01), 0.0);
        assert!((lr_schedule(5.0, e, 5.0, 0.01) - 0.01).abs() < 1e-15);
        assert!((lr_schedule((5.0 + e) / 2.0, e, 5.0, 0.01) - 0.005).abs() < 1e-15);
        assert!(lr_schedule(e, e, 5.0, 0.01).abs() < 1e-18);
        // continuity at the warmup boundary
        let left = lr_schedule(5.0 - 1e-9, e, 5.0, 0.01);
        let right = lr_schedule(5.0 + 1e-9, e, 5.0, 0.01);
        assert!((left - right).abs() < 1e-10);
    }

    #[test]
    fn epoch_batches_partition_ids() {
        let ids: Vec<u64> = (0..25).collect();
        let batches = epoch_batches(1, 0, &ids, 8);
        assert_eq!(batches.len(), 4);
        let mut all: Vec<u64> = batches.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, ids);
    }

    struct Uniform;
    impl Classifier for Uniform {
        fn classify(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
            Ok(Tensor::zeros(&[x.shape()[0], 10]))
        }
    }

    /// Classifies by the argmax mel bin; with one pure tone per class this
    /// is a perfect oracle.
    struct ToneOracle {
        bin_to_class: Vec<usize>,
    }

    impl Classifier for ToneOracle {
        fn classify(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
            let (n, f, t) = (x.shape()[0], x.shape()[2], x.shape()[3]);
            let mut out = Tensor::<f32>::zeros(&[n, 10]);
            for i in 0..n {
                let plane = &x.data()[i * f * t..(i + 1) * f * t];
                let bin = (0..f)
                    .max_by(|a, b| plane[a * t].partial_cmp(&plane[b * t]).unwrap())
                    .unwrap();
                out.data_mut()[i * 10 + self.bin_to_class[bin]] = 1.0;
            }
            Ok(out)
        }
    }

    fn class_tone_hz(class: u32) -> f64 {
        500.0 * (class as f64 + 1.0)
    }

    fn tone_dataset(per_class: usize) -> LoadedDataset {
        let sr = crate::audio::SAMPLE_RATE;
        let mut metas = Vec::new();
        let mut waves = Vec::new();
        let mut id = 0u64;
        for class in 0..10u32 {
            for j in 0..per_class {
                metas.push(SampleMeta {
                    id,
                    class,
                    device: (j % 2) as u32,
                    seed: id,
                    file: String::new(),
                });
                let f = class_tone_hz(class);
                let samples: Vec<f32> = (0..32_000)
                    .map(|i| {
                        (0.5 * (std::f64::consts::TAU * f * i as f64 / sr as f64).sin()) as f32
                    })
                    .collect();
                waves.push(crate::audio::Waveform::new(samples, sr).unwrap());
                id += 1;
            }
        }
        LoadedDataset::from_parts(metas, waves).unwrap()
    }

    #[test]
    fn perfect_oracle_scores_100_and_uniform_scores_chance() {
        let data = tone_dataset(3);
        let frontend = Frontend::new(FrontendConfig::default(), crate::audio::SAMPLE_RATE);

        // map each class tone to its nearest filter center
        let centers = frontend.filter_centers_hz();
        let mut bin_to_class = vec![0usize; centers.len()];
        for (bin, c) in centers.iter().enumerate() {
            let class = (0..10)
                .min_by(|&a, &b| {
                    (class_tone_hz(a) - c)
                        .abs()
                        .partial_cmp(&(class_tone_hz(b) - c).abs())
                        .unwrap()
                })
                .unwrap();
            bin_to_class[bin] = class as usize;
        }
        let oracle = ToneOracle { bin_to_class };
        let report = evaluate(&oracle, &data, &frontend, 8).unwrap();
        assert_eq!(report.accuracy, 1.0, "oracle must be perfect: {:?}", report.per_class);

        // uniform logits: argmax ties resolve to class 0 = 1/10 of the split
        let report = evaluate(&Uniform, &data, &frontend, 8).unwrap();
        assert!((report.accuracy - 0.1).abs() < 1e-12);
        assert_eq!(report.per_class[0], (3, 3));
        assert_eq!(report.per_device.len(), 2);
    }
}
