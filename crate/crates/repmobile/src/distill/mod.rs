//! Knowledge distillation from an ensemble of frozen teachers, with teacher
//! logits precomputed once per (sample, epoch) and cached on disk.
//!
//! The loss blends hard-label cross-entropy with the mean KL divergence
//! between temperature-sharpened student and teacher distributions:
//! `L = lambda * CE + (1 - lambda) * mean_k KL(softmax(s/tau) || softmax(t_k/tau))`.
//! The temperature applies to both sides and gradients flow only through
//! the student logits.

pub mod cache;

pub use cache::{CacheRecord, LogitsCache};

use crate::audio::augment::replay_augmented;
use crate::audio::Frontend;
use crate::data::LoadedDataset;
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::tensor::kernels;
use crate::tensor::{Element, Graph, NodeId, Tensor};
use crate::train::{epoch_batches, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    /// Cross-entropy weight; the distillation term gets `1 - lambda`.
    pub lambda: f64,
    /// Sharpening temperature applied to both student and teacher logits.
    pub tau: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda: 0.5,
            tau: 0.1,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self, num_teachers: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config(format!("temperature {} must be > 0", self.tau)));
        }
        if num_teachers == 0 && self.lambda < 1.0 {
            return Err(Error::Config(
                "distillation weight is nonzero but there are no teachers".into(),
            ));
        }
        Ok(())
    }
}

/// A frozen scorer: maps an augmented input batch to logits. No gradients
/// ever flow through a teacher.
pub trait TeacherHandle {
    fn id(&self) -> &str;
    fn param_count(&self) -> u64;
    fn score(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>>;
}

/// A saved model acting as a teacher.
pub struct ModelTeacher {
    id: String,
    model: ModelGraph<f32>,
}

impl ModelTeacher {
    pub fn new(id: impl Into<String>, model: ModelGraph<f32>) -> Self {
        ModelTeacher {
            id: id.into(),
            model,
        }
    }

    pub fn model(&self) -> &ModelGraph<f32> {
        &self.model
    }
}

impl TeacherHandle for ModelTeacher {
    fn id(&self) -> &str {
        &self.id
    }

    fn param_count(&self) -> u64 {
        crate::complexity::count_params(&self.model)
    }

    fn score(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.model.forward_eval(batch)
    }
}

/// Build the blended loss on the graph. `teachers` holds one `[N, C]`
/// logits tensor per teacher (constants; gradient reaches the student only).
pub fn distill_loss_graph<T: Element>(
    g: &mut Graph<T>,
    student_logits: NodeId,
    teachers: &[Tensor<T>],
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<NodeId> {
    cfg.validate(teachers.len())?;
    if cfg.lambda == 1.0 {
        // exact endpoint: the loss is plain cross-entropy
        return g.cross_entropy(student_logits, labels);
    }
    let student_probs = g.softmax_t(student_logits, cfg.tau)?;
    let mut kl_sum: Option<NodeId> = None;
    for t in teachers {
        let probs = kernels::softmax_t(t, cfg.tau)?;
        let q = g.constant(probs);
        let kl = g.kl_divergence(student_probs, q)?;
        kl_sum = Some(match kl_sum {
            None => kl,
            Some(a) => g.add(a, kl)?,
        });
    }
    let mean_kl = g.scale(
        kl_sum.expect("validated teachers"),
        T::from_f64_(1.0 / teachers.len() as f64),
    );
    if cfg.lambda == 0.0 {
        return Ok(mean_kl);
    }
    let ce = g.cross_entropy(student_logits, labels)?;
    let ce_part = g.scale(ce, T::from_f64_(cfg.lambda));
    let kl_part = g.scale(mean_kl, T::from_f64_(1.0 - cfg.lambda));
    g.add(ce_part, kl_part)
}

/// Loss value without keeping a graph around.
pub fn distill_loss<T: Element>(
    student_logits: &Tensor<T>,
    teachers: &[Tensor<T>],
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<T> {
    let mut g = Graph::new();
    let s = g.leaf(student_logits.clone(), true);
    let loss = distill_loss_graph(&mut g, s, teachers, labels, cfg)?;
    Ok(g.value(loss).item())
}

/// Score every (sample, epoch) augmented view with every teacher and collect
/// the records. The augmentation plan is exactly the training plan for
/// `cfg.seed`, so a later distillation run replays identical inputs.
pub fn cache_teachers(
    teachers: &[&dyn TeacherHandle],
    data: &LoadedDataset,
    subset: Option<&[u64]>,
    epochs: usize,
    cfg: &TrainConfig,
) -> Result<LogitsCache> {
    if teachers.is_empty() {
        return Err(Error::Config("need at least one teacher to cache".into()));
    }
    let frontend = Frontend::new(cfg.frontend, crate::audio::SAMPLE_RATE);
    let num_classes = teachers_num_classes(data)?;
    let mut out = LogitsCache::new(
        num_classes,
        teachers.iter().map(|t| t.id().to_string()).collect(),
    );
    let mut ids: Vec<u64> = subset.map(|s| s.to_vec()).unwrap_or_else(|| data.ids());
    ids.sort_unstable();

    for epoch in 0..epochs as u32 {
        for (batch_idx, batch_ids) in epoch_batches(cfg.seed, epoch, &ids, cfg.batch_size)
            .into_iter()
            .enumerate()
        {
            let descs = crate::audio::augment::draw_batch_descriptors(
                cfg.seed,
                epoch,
                batch_idx as u32,
                &batch_ids,
                &cfg.augment,
            );
            let input = crate::train::augmented_batch(&frontend, data, &batch_ids, &descs, &|p| {
                Err(Error::Data(format!("partner {} missing from batch", p)))
            })?;
            let mut logits_per_teacher = Vec::with_capacity(teachers.len());
            for t in teachers {
                let l = t.score(&input)?;
                for (row, &id) in batch_ids.iter().enumerate() {
                    let c = num_classes as usize;
                    let slice = &l.data()[row * c..(row + 1) * c];
                    if slice.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite(format!(
                            "teacher {} produced non-finite logits for sample {}",
                            t.id(),
                            id
                        )));
                    }
                }
                logits_per_teacher.push(l);
            }
            for (row, (&id, desc)) in batch_ids.iter().zip(&descs).enumerate() {
                let c = num_classes as usize;
                let mut logits = Vec::with_capacity(teachers.len() * c);
                for l in &logits_per_teacher {
                    logits.extend_from_slice(&l.data()[row * c..(row + 1) * c]);
                }
                out.push(CacheRecord {
                    sample_id: id,
                    epoch,
                    descriptor: *desc,
                    logits,
                })?;
            }
        }
    }
    Ok(out)
}

fn teachers_num_classes(data: &LoadedDataset) -> Result<u32> {
    let n = data.index.num_classes();
    if n == 0 {
        return Err(Error::Input("dataset has no samples".into()));
    }
    Ok(10.max(n as u32))
}

/// Rebuild every record's augmented input from its descriptor, re-score the
/// teachers, and return the worst absolute deviation from the cached logits.
pub fn replay_cache(
    cache: &LogitsCache,
    teachers: &[&dyn TeacherHandle],
    data: &LoadedDataset,
    frontend: &Frontend,
) -> Result<f64> {
    if teachers.len() != cache.num_teachers() {
        return Err(Error::Config(format!(
            "{} teachers supplied, cache was built with {}",
            teachers.len(),
            cache.num_teachers()
        )));
    }
    let mut worst = 0f64;
    for record in cache.records() {
        let wave = data.wave(record.sample_id)?;
        let partner = if record.descriptor.fms.applied {
            let pid = record.descriptor.fms.partner;
            let prec = cache.lookup(pid, record.epoch)?;
            Some((data.wave(pid)?, prec.descriptor))
        } else {
            None
        };
        let spec = replay_augmented(
            frontend,
            wave,
            &record.descriptor,
            partner.as_ref().map(|(w, d)| (*w, d)),
        )?;
        let (f, t) = (spec.bins(), spec.frames());
        let input = spec.into_values().reshaped(&[1, 1, f, t])?;
        for (k, teacher) in teachers.iter().enumerate() {
            let logits = teacher.score(&input)?;
            let cached = cache.teacher_logits(record, k);
            for (a, b) in logits.data().iter().zip(cached) {
                worst = worst.max((*a as f64 - *b as f64).abs());
            }
        }
    }
    Ok(worst)
}

/// Train a student against cached ensemble logits; a thin wrapper over the
/// training loop with the distillation loss.
pub fn distill_train(
    student: ModelGraph<f32>,
    cache: &LogitsCache,
    data: &LoadedDataset,
    subset: Option<&[u64]>,
    test: Option<&LoadedDataset>,
    cfg: &TrainConfig,
    distill: &DistillConfig,
) -> Result<crate::train::TrainOutcome> {
    distill.validate(cache.num_teachers())?;
    crate::train::fit(
        student,
        data,
        subset,
        test,
        cfg,
        &crate::train::LossSpec::Distill {
            cache,
            cfg: *distill,
        },
    )
}
