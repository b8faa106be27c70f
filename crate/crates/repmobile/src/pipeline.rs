//! End-to-end recipe: synthesize data, train the wide single-branch
//! teacher, cache its logits, distill the multi-branch student, prune it
//! progressively with finetuning, merge the result, and report an accuracy
//! grid over the configured training-data fractions.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{gen_split, make_subsets, DatasetIndex, LoadedDataset, Split, SubsetManifest, SyntheticSceneSpec};
use crate::distill::{cache_teachers, distill_train, DistillConfig, ModelTeacher, TeacherHandle};
use crate::error::{Error, Result};
use crate::model::{build_model, BranchShape};
use crate::prune::{progressive_prune, round_metrics_csv, PruneSchedule};
use crate::reparam::reparameterize_model;
use crate::rng::stream_key;
use crate::train::{evaluate, fit, metrics_csv, LossSpec, TrainConfig};
use crate::audio::{Frontend, FrontendConfig};

fn default_fractions() -> Vec<f64> {
    vec![1.0, 0.5, 0.25, 0.1, 0.05]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataGenConfig {
    pub classes: usize,
    pub devices: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Use an existing dataset root (with train/ and test/ splits) instead
    /// of generating one.
    pub dir: Option<PathBuf>,
}

impl Default for DataGenConfig {
    fn default() -> Self {
        DataGenConfig {
            classes: 10,
            devices: 4,
            train_per_class: 100,
            test_per_class: 50,
            dir: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherStage {
    pub width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_epochs: f64,
}

impl Default for TeacherStage {
    fn default() -> Self {
        TeacherStage {
            width: 96,
            epochs: 2,
            batch_size: 32,
            peak_lr: 0.01,
            warmup_epochs: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillStage {
    pub width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_epochs: f64,
    pub lambda: f64,
    pub tau: f64,
}

impl Default for DistillStage {
    fn default() -> Self {
        DistillStage {
            width: 96,
            epochs: 2,
            batch_size: 32,
            peak_lr: 0.01,
            warmup_epochs: 0.5,
            lambda: 0.5,
            tau: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneStage {
    pub schedule: Vec<usize>,
    pub finetune_epochs: usize,
    pub peak_lr: f64,
    pub warmup_epochs: f64,
}

impl Default for PruneStage {
    fn default() -> Self {
        PruneStage {
            schedule: vec![96, 64, 32],
            finetune_epochs: 1,
            peak_lr: 0.003,
            warmup_epochs: 0.25,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub fractions: Vec<f64>,
    pub data: DataGenConfig,
    pub teacher: TeacherStage,
    pub distill: DistillStage,
    pub prune: PruneStage,
    /// Per-stage test evaluation cadence in epochs (0 = final epoch only).
    pub eval_every: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            fractions: default_fractions(),
            data: DataGenConfig::default(),
            teacher: TeacherStage::default(),
            distill: DistillStage::default(),
            prune: PruneStage::default(),
            eval_every: 0,
        }
    }
}

impl PipelineConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let file = fs::File::open(path)
            .map_err(|e| Error::Input(format!("cannot open {}: {}", path.display(), e)))?;
        Ok(serde_json::from_reader(file)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fractions.is_empty() {
            return Err(Error::Config("pipeline needs at least one fraction".into()));
        }
        if self.prune.schedule.first() != Some(&self.distill.width) {
            return Err(Error::Config(format!(
                "prune schedule must start at the distilled width {} (got {:?})",
                self.distill.width, self.prune.schedule
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineSummary {
    pub fractions: Vec<f64>,
    /// Row label then one accuracy per fraction, grid order.
    pub rows: Vec<(String, Vec<f64>)>,
    pub stage_seconds: Vec<StageTiming>,
    pub final_width: usize,
    /// Per fraction: merged accuracy equals the final train-form accuracy.
    pub merged_matches_trainform: bool,
    pub total_seconds: f64,
}

impl PipelineSummary {
    pub fn grid_csv(&self) -> String {
        let mut out = String::from("method");
        for f in &self.fractions {
            out.push_str(&format!(",{}%", f * 100.0));
        }
        out.push('\n');
        for (name, accs) in &self.rows {
            out.push_str(name);
            for a in accs {
                out.push_str(&format!(",{:.6}", a));
            }
            out.push('\n');
        }
        out
    }

    pub fn accuracy(&self, method: &str, fraction_idx: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|(n, _)| n == method)
            .and_then(|(_, v)| v.get(fraction_idx).copied())
    }
}

struct StageClock {
    timings: Vec<StageTiming>,
}

impl StageClock {
    fn run<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f().map_err(|e| e.in_stage(stage))?;
        self.timings.push(StageTiming {
            stage: stage.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok(out)
    }
}

/// Execute the full recipe into `out_dir`. Every stage persists its
/// artifacts as it completes, so a failure leaves the finished stages on
/// disk and reports the failing stage by name.
pub fn run_pipeline(cfg: &PipelineConfig, out_dir: &Path) -> Result<PipelineSummary> {
    cfg.validate()?;
    let started = Instant::now();
    fs::create_dir_all(out_dir)?;
    serde_json::to_writer_pretty(
        fs::File::create(out_dir.join("config.json"))?,
        cfg,
    )?;

    let mut clock = StageClock { timings: Vec::new() };
    let frontend = Frontend::new(FrontendConfig::default(), crate::audio::SAMPLE_RATE);

    // data
    let data_root = cfg
        .data
        .dir
        .clone()
        .unwrap_or_else(|| out_dir.join("data"));
    let (train_index, test_index) = clock.run("gen-data", || {
        let train_dir = data_root.join("train");
        let test_dir = data_root.join("test");
        if cfg.data.dir.is_some() {
            Ok((
                DatasetIndex::read(&train_dir)?,
                DatasetIndex::read(&test_dir)?,
            ))
        } else {
            let spec = SyntheticSceneSpec {
                num_classes: cfg.data.classes,
                num_devices: cfg.data.devices,
                held_out_device: cfg.data.devices - 1,
                seed: stream_key(cfg.seed, &[0xda7a]),
            };
            Ok((
                gen_split(&spec, cfg.data.train_per_class, Split::Train, &train_dir)?,
                gen_split(&spec, cfg.data.test_per_class, Split::Test, &test_dir)?,
            ))
        }
    })?;
    let train_data = LoadedDataset::load(train_index)?;
    let test_data = LoadedDataset::load(test_index)?;

    // subsets
    let manifests: Vec<SubsetManifest> = clock.run("subsets", || {
        let m = make_subsets(&train_data.index.samples, &cfg.fractions, cfg.seed)?;
        serde_json::to_writer_pretty(fs::File::create(out_dir.join("subsets.json"))?, &m)?;
        Ok(m)
    })?;

    let final_width = *cfg.prune.schedule.last().unwrap();
    let mut row_labels: Vec<String> = vec![
        format!("teacher-c{}", cfg.teacher.width),
        format!("distilled-c{}", cfg.distill.width),
    ];
    for w in &cfg.prune.schedule[1..] {
        row_labels.push(format!("pruned-c{}", w));
    }
    row_labels.push(format!("merged-c{}", final_width));
    let mut rows: Vec<(String, Vec<f64>)> =
        row_labels.iter().map(|l| (l.clone(), Vec::new())).collect();
    let mut merged_matches = true;

    for (fi, manifest) in manifests.iter().enumerate() {
        let tag = format!("{}pct", (manifest.fraction * 100.0).round() as u64);
        let fdir = out_dir.join(&tag);
        fs::create_dir_all(&fdir)?;
        let subset = Some(manifest.ids.as_slice());

        // teacher: wide single-branch model trained with cross-entropy
        let teacher_model = clock.run(&format!("teacher@{}", tag), || {
            let model = build_model::<f32>(
                cfg.teacher.width,
                &[BranchShape::K3x3],
                stream_key(cfg.seed, &[0x7ea, fi as u64]),
            )?;
            let tc = TrainConfig {
                epochs: cfg.teacher.epochs,
                batch_size: cfg.teacher.batch_size,
                warmup_epochs: cfg.teacher.warmup_epochs,
                peak_lr: cfg.teacher.peak_lr,
                seed: stream_key(cfg.seed, &[0x7ea5, fi as u64]),
                eval_every: cfg.eval_every,
                ..TrainConfig::default()
            };
            let out = fit(model, &train_data, subset, None, &tc, &LossSpec::CrossEntropy)?;
            out.model.save(&fdir.join("teacher"))?;
            fs::write(fdir.join("teacher_metrics.csv"), metrics_csv(&out.metrics))?;
            // the merged form scores identically and runs leaner in the
            // caching pass
            let merged = reparameterize_model(&out.model)?;
            merged.save(&fdir.join("teacher-merged"))?;
            Ok(merged)
        })?;
        let teacher_acc = evaluate(&teacher_model, &test_data, &frontend, 32)?.accuracy;
        rows[0].1.push(teacher_acc);

        // cache teacher logits for every (sample, epoch) the student will see
        let distill_seed = stream_key(cfg.seed, &[0xd157, fi as u64]);
        let student_cfg = TrainConfig {
            epochs: cfg.distill.epochs,
            batch_size: cfg.distill.batch_size,
            warmup_epochs: cfg.distill.warmup_epochs,
            peak_lr: cfg.distill.peak_lr,
            seed: distill_seed,
            eval_every: cfg.eval_every,
            ..TrainConfig::default()
        };
        let cache = clock.run(&format!("cache@{}", tag), || {
            let teacher = ModelTeacher::new("builtin-teacher", teacher_model.clone());
            let handles: Vec<&dyn TeacherHandle> = vec![&teacher];
            let cache = cache_teachers(
                &handles,
                &train_data,
                subset,
                cfg.distill.epochs,
                &student_cfg,
            )?;
            cache.write(&fdir.join("logits.rlgc"))?;
            Ok(cache)
        })?;

        // distill the multi-branch student
        let student = clock.run(&format!("distill@{}", tag), || {
            let model = build_model::<f32>(
                cfg.distill.width,
                &BranchShape::ALL,
                stream_key(cfg.seed, &[0x57d, fi as u64]),
            )?;
            let dcfg = DistillConfig {
                lambda: cfg.distill.lambda,
                tau: cfg.distill.tau,
            };
            let out = distill_train(model, &cache, &train_data, subset, None, &student_cfg, &dcfg)?;
            out.model.save(&fdir.join(format!("student-c{}", cfg.distill.width)))?;
            fs::write(fdir.join("distill_metrics.csv"), metrics_csv(&out.metrics))?;
            Ok(out.model)
        })?;
        rows[1].1.push(evaluate(&student, &test_data, &frontend, 32)?.accuracy);

        // progressive prune-finetune (cross-entropy finetunes)
        let (final_model, round_rows) = clock.run(&format!("prune@{}", tag), || {
            let schedule = PruneSchedule::new(cfg.prune.schedule.clone(), cfg.prune.finetune_epochs);
            let mut round = 0usize;
            let result = progressive_prune(student.clone(), &schedule, |m, epochs| {
                let tc = TrainConfig {
                    epochs,
                    batch_size: cfg.distill.batch_size,
                    warmup_epochs: cfg.prune.warmup_epochs,
                    peak_lr: cfg.prune.peak_lr,
                    seed: stream_key(cfg.seed, &[0xf1e, fi as u64, round as u64]),
                    eval_every: cfg.eval_every,
                    ..TrainConfig::default()
                };
                round += 1;
                if epochs == 0 {
                    let acc = evaluate(&m, &test_data, &frontend, 32)?.accuracy;
                    return Ok((m, acc));
                }
                let out = fit(m, &train_data, subset, None, &tc, &LossSpec::CrossEntropy)?;
                let acc = evaluate(&out.model, &test_data, &frontend, 32)?.accuracy;
                Ok((out.model, acc))
            })?;
            fs::write(fdir.join("prune_rounds.csv"), round_metrics_csv(&result.1))?;
            result.0.save(&fdir.join(format!("student-c{}", final_width)))?;
            Ok(result)
        })?;
        for (ri, r) in round_rows.iter().enumerate() {
            rows[2 + ri].1.push(r.accuracy);
        }

        // merge and evaluate both forms
        let merged = clock.run(&format!("merge@{}", tag), || {
            let merged = reparameterize_model(&final_model)?;
            merged.save(&fdir.join(format!("merged-c{}", final_width)))?;
            Ok(merged)
        })?;
        let (train_form_acc, merged_acc) = clock.run(&format!("eval@{}", tag), || {
            let a = evaluate(&final_model, &test_data, &frontend, 32)?.accuracy;
            let b = evaluate(&merged, &test_data, &frontend, 32)?.accuracy;
            Ok((a, b))
        })?;
        if merged_acc != train_form_acc {
            merged_matches = false;
        }
        let last = rows.len() - 1;
        rows[last].1.push(merged_acc);
    }

    let summary = PipelineSummary {
        fractions: cfg.fractions.clone(),
        rows,
        stage_seconds: clock.timings,
        final_width,
        merged_matches_trainform: merged_matches,
        total_seconds: started.elapsed().as_secs_f64(),
    };
    fs::write(out_dir.join("results_grid.csv"), summary.grid_csv())?;
    serde_json::to_writer_pretty(fs::File::create(out_dir.join("summary.json"))?, &summary)?;
    Ok(summary)
}
