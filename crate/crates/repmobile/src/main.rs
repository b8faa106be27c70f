use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use repmobile::audio::{Frontend, FrontendConfig};
use repmobile::complexity::{count_macs_report, count_params};
use repmobile::data::{gen_split, make_subsets, DatasetIndex, LoadedDataset, Split, SubsetManifest, SyntheticSceneSpec};
use repmobile::distill::{cache_teachers, distill_train, DistillConfig, LogitsCache, ModelTeacher, TeacherHandle};
use repmobile::model::{build_model, BranchShape, ModelGraph};
use repmobile::pipeline::{run_pipeline, PipelineConfig};
use repmobile::prune::{progressive_prune, round_metrics_csv, PruneSchedule};
use repmobile::reparam::{reparameterize_model, verify_equivalence};
use repmobile::train::{evaluate, fit, metrics_csv, LossSpec, TrainConfig};

#[derive(Parser)]
#[command(
    name = "repmobile",
    about = "Train, distill, prune and merge reparameterizable acoustic scene classifiers",
    version
)]
struct Cli {
    /// Worker threads for data-parallel kernels (0 = all cores). Results
    /// are bitwise identical at any thread count.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset split directory (contains index.jsonl and WAV files).
    #[arg(long)]
    data: PathBuf,
    /// Optional test split directory for per-epoch evaluation.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Output model directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    width: usize,
    /// Comma-separated branch shapes (must include 3x3).
    #[arg(long, default_value = "3x3,1x1,3x1,1x3")]
    branches: String,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.01)]
    peak_lr: f64,
    #[arg(long, default_value_t = 5.0)]
    warmup: f64,
    /// Subset manifest JSON (from `subsets`) to restrict training data.
    #[arg(long)]
    subset: Option<PathBuf>,
    /// Which fraction of the manifest to use.
    #[arg(long)]
    fraction: Option<f64>,
    /// Evaluate every N epochs (0 = final only).
    #[arg(long, default_value_t = 1)]
    eval_every: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic scene dataset (train and test splits).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        train_per_class: usize,
        #[arg(long, default_value_t = 50)]
        test_per_class: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 4)]
        devices: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build nested stratified training subsets.
    Subsets {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "1.0,0.5,0.25,0.1,0.05")]
        fractions: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model with cross-entropy.
    Train(TrainArgs),
    /// Precompute teacher logits for every (sample, epoch) pair.
    Cache {
        /// Teacher model directories (repeat for an ensemble).
        #[arg(long, required = true)]
        teacher: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        subset: Option<PathBuf>,
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Train a student against cached ensemble logits.
    Distill {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
        #[arg(long, default_value_t = 0.1)]
        tau: f64,
    },
    /// Progressively prune a trained model with finetuning.
    Prune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated widths, e.g. 96,64,32 (first = current width).
        #[arg(long)]
        schedule: String,
        #[arg(long, default_value_t = 2)]
        finetune_epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.003)]
        peak_lr: f64,
    },
    /// Merge a train-form model into its single-branch inference form.
    Merge {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Verify train/merged equivalence on N random inputs.
        #[arg(long, default_value_t = 0)]
        verify: usize,
    },
    /// Parameter and MAC accounting.
    Count {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 256)]
        input_f: usize,
        #[arg(long, default_value_t = 57)]
        input_t: usize,
        /// Also write the per-layer breakdown CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Evaluate a model on a dataset split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 32)]
        batch: usize,
    },
    /// Run the full teacher -> cache -> distill -> prune -> merge recipe.
    Pipeline {
        /// JSON config file; flags below override its values.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated training-data fractions.
        #[arg(long)]
        fractions: Option<String>,
    },
}

fn parse_fractions(s: &str) -> anyhow::Result<Vec<f64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .with_context(|| format!("bad fraction '{}'", p))
        })
        .collect()
}

fn parse_branches(s: &str) -> anyhow::Result<Vec<BranchShape>> {
    s.split(',')
        .map(|p| BranchShape::parse(p.trim()).map_err(Into::into))
        .collect()
}

fn load_subset(path: &Option<PathBuf>, fraction: Option<f64>) -> anyhow::Result<Option<Vec<u64>>> {
    let Some(path) = path else { return Ok(None) };
    let manifests: Vec<SubsetManifest> =
        serde_json::from_reader(std::fs::File::open(path).context("open subset manifest")?)?;
    let manifest = match fraction {
        Some(f) => manifests
            .iter()
            .find(|m| (m.fraction - f).abs() < 1e-9)
            .with_context(|| format!("manifest has no fraction {}", f))?,
        None => manifests
            .first()
            .context("subset manifest is empty")?,
    };
    Ok(Some(manifest.ids.clone()))
}

fn run_train(args: &TrainArgs, loss_cache: Option<(PathBuf, f64, f64)>) -> anyhow::Result<()> {
    let data = LoadedDataset::load(DatasetIndex::read(&args.data)?)?;
    let test = match &args.test {
        Some(t) => Some(LoadedDataset::load(DatasetIndex::read(t)?)?),
        None => None,
    };
    let subset = load_subset(&args.subset, args.fraction)?;
    let branches = parse_branches(&args.branches)?;
    let model = build_model::<f32>(args.width, &branches, args.seed)?;
    let cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        warmup_epochs: args.warmup,
        peak_lr: args.peak_lr,
        seed: args.seed,
        eval_every: args.eval_every,
        ..TrainConfig::default()
    };
    let outcome = match &loss_cache {
        None => fit(
            model,
            &data,
            subset.as_deref(),
            test.as_ref(),
            &cfg,
            &LossSpec::CrossEntropy,
        )?,
        Some((cache_path, lambda, tau)) => {
            let cache = LogitsCache::read(cache_path)?;
            distill_train(
                model,
                &cache,
                &data,
                subset.as_deref(),
                test.as_ref(),
                &cfg,
                &DistillConfig {
                    lambda: *lambda,
                    tau: *tau,
                },
            )?
        }
    };
    outcome.model.save(&args.out)?;
    std::fs::write(args.out.join("metrics.csv"), metrics_csv(&outcome.metrics))?;
    if let (Some(acc), Some(best)) = (outcome.best_accuracy, &outcome.best_model) {
        best.save(&args.out.join("best"))?;
        println!("best eval accuracy {:.2}% (checkpoint in {}/best)", acc * 100.0, args.out.display());
    }
    if let Some(m) = outcome.metrics.last() {
        println!(
            "final epoch {}: train loss {:.4}{}",
            m.epoch,
            m.train_loss,
            m.eval_acc
                .map_or(String::new(), |a| format!(", eval accuracy {:.2}%", a * 100.0))
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            eprintln!("error: cannot configure {} threads: {}", cli.threads, e);
            return ExitCode::FAILURE;
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenData {
            out,
            train_per_class,
            test_per_class,
            classes,
            devices,
            seed,
        } => {
            if devices < 2 {
                bail!("need at least 2 devices (one is held out of training)");
            }
            let spec = SyntheticSceneSpec {
                num_classes: classes,
                num_devices: devices,
                held_out_device: devices - 1,
                seed,
            };
            let train = gen_split(&spec, train_per_class, Split::Train, &out.join("train"))?;
            let test = gen_split(&spec, test_per_class, Split::Test, &out.join("test"))?;
            println!(
                "wrote {} train and {} test clips under {} (device {} held out of training)",
                train.samples.len(),
                test.samples.len(),
                out.display(),
                devices - 1
            );
        }
        Command::Subsets {
            data,
            out,
            fractions,
            seed,
        } => {
            let index = DatasetIndex::read(&data)?;
            let fractions = parse_fractions(&fractions)?;
            let manifests = make_subsets(&index.samples, &fractions, seed)?;
            serde_json::to_writer_pretty(std::fs::File::create(&out)?, &manifests)?;
            for m in &manifests {
                println!("fraction {:>5.2}: {} samples", m.fraction, m.ids.len());
            }
            println!("wrote {}", out.display());
        }
        Command::Train(args) => run_train(&args, None)?,
        Command::Distill {
            train,
            cache,
            lambda,
            tau,
        } => run_train(&train, Some((cache, lambda, tau)))?,
        Command::Cache {
            teacher,
            data,
            out,
            epochs,
            batch,
            seed,
            subset,
            fraction,
        } => {
            let data = LoadedDataset::load(DatasetIndex::read(&data)?)?;
            let subset = load_subset(&subset, fraction)?;
            let teachers: Vec<ModelTeacher> = teacher
                .iter()
                .map(|dir| {
                    let name = dir
                        .file_name()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_else(|| "teacher".to_string());
                    Ok(ModelTeacher::new(name, ModelGraph::<f32>::load(dir)?))
                })
                .collect::<anyhow::Result<_>>()?;
            let handles: Vec<&dyn TeacherHandle> = teachers
                .iter()
                .map(|t| t as &dyn TeacherHandle)
                .collect();
            let cfg = TrainConfig {
                batch_size: batch,
                seed,
                ..TrainConfig::default()
            };
            let cache = cache_teachers(&handles, &data, subset.as_deref(), epochs, &cfg)?;
            cache.write(&out)?;
            println!(
                "cached {} records ({} teachers x {} classes) to {}",
                cache.len(),
                cache.num_teachers(),
                cache.num_classes,
                out.display()
            );
        }
        Command::Prune {
            model,
            data,
            test,
            out,
            schedule,
            finetune_epochs,
            batch,
            seed,
            peak_lr,
        } => {
            let model = ModelGraph::<f32>::load(&model)?;
            let data = LoadedDataset::load(DatasetIndex::read(&data)?)?;
            let test = match &test {
                Some(t) => Some(LoadedDataset::load(DatasetIndex::read(t)?)?),
                None => None,
            };
            let schedule = PruneSchedule::parse(&schedule, finetune_epochs)?;
            let frontend = Frontend::new(FrontendConfig::default(), repmobile::audio::SAMPLE_RATE);
            let mut round = 0u64;
            let (final_model, metrics) = progressive_prune(model, &schedule, |m, epochs| {
                let tc = TrainConfig {
                    epochs,
                    batch_size: batch,
                    warmup_epochs: 0.5,
                    peak_lr,
                    seed: repmobile::rng::stream_key(seed, &[0xf1e, round]),
                    eval_every: 0,
                    ..TrainConfig::default()
                };
                round += 1;
                if epochs == 0 {
                    let acc = match &test {
                        Some(t) => evaluate(&m, t, &frontend, batch)?.accuracy,
                        None => f64::NAN,
                    };
                    return Ok((m, acc));
                }
                let outcome = fit(m, &data, None, test.as_ref(), &tc, &LossSpec::CrossEntropy)?;
                let acc = match &test {
                    Some(t) => evaluate(&outcome.model, t, &frontend, batch)?.accuracy,
                    None => f64::NAN,
                };
                Ok((outcome.model, acc))
            })?;
            final_model.save(&out)?;
            let csv = round_metrics_csv(&metrics);
            std::fs::write(out.join("prune_rounds.csv"), &csv)?;
            print!("{}", csv);
            println!("final width {} saved to {}", final_model.base_channels(), out.display());
        }
        Command::Merge { model, out, verify } => {
            let train_form = ModelGraph::<f32>::load(&model)?;
            let merged = reparameterize_model(&train_form)?;
            merged.save(&out)?;
            println!(
                "merged model: {} params (train form {})",
                count_params(&merged),
                count_params(&train_form)
            );
            if verify > 0 {
                let report = verify_equivalence(&train_form, &merged, verify, 0)?;
                println!(
                    "verify: {} inputs, max |logit diff| {:.3e} (|logits| up to {:.3e}), argmax agree: {}",
                    report.inputs, report.worst_abs_diff, report.max_logit_abs, report.argmax_agree
                );
                if !report.within(1e-4) {
                    bail!("equivalence verification failed: {:?}", report);
                }
            }
        }
        Command::Count {
            model,
            input_f,
            input_t,
            csv,
        } => {
            let model = ModelGraph::<f32>::load(&model)?;
            let report = count_macs_report(&model, input_f, input_t)?;
            print!("{}", report.to_table());
            if let Some(path) = csv {
                std::fs::write(&path, report.to_csv())?;
                println!("wrote {}", path.display());
            }
        }
        Command::Eval { model, data, batch } => {
            let model = ModelGraph::<f32>::load(&model)?;
            let data = LoadedDataset::load(DatasetIndex::read(&data)?)?;
            let frontend = Frontend::new(FrontendConfig::default(), repmobile::audio::SAMPLE_RATE);
            let report = evaluate(&model, &data, &frontend, batch)?;
            print!("{}", report.to_table());
        }
        Command::Pipeline {
            config,
            out,
            seed,
            fractions,
        } => {
            let mut cfg = match config {
                Some(path) => PipelineConfig::from_file(&path)?,
                None => PipelineConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(f) = fractions {
                cfg.fractions = parse_fractions(&f)?;
            }
            let summary = run_pipeline(&cfg, &out)?;
            print!("{}", summary.grid_csv());
            for t in &summary.stage_seconds {
                println!("  {:<16} {:>8.1}s", t.stage, t.seconds);
            }
            println!(
                "total {:.1}s; merged == train-form accuracy: {}",
                summary.total_seconds, summary.merged_matches_trainform
            );
        }
    }
    Ok(())
}
