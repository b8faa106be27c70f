//! Acceptance suite: one test per criterion, each printing a pass/fail line.
//!
//! The heavy criteria share a lock so wall-clock budgets are measured
//! without interference; run with `--nocapture` to see the per-criterion
//! lines. The end-to-end criteria (10 and 11) execute the full desk-scale
//! pipeline twice and take the longest by far.

use std::sync::Mutex;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use repmobile::audio::{Frontend, FrontendConfig, SAMPLE_RATE};
use repmobile::complexity::{conv_macs, conv_params_count, count_macs, count_params};
use repmobile::data::{make_subsets, subsets::check_nesting, SampleMeta};
use repmobile::distill::{
    cache_teachers, distill_loss, distill_loss_graph, replay_cache, DistillConfig, ModelTeacher,
    TeacherHandle,
};
use repmobile::model::{build_model, BnParams, BranchShape, ConvParams, ModelGraph};
use repmobile::pipeline::{run_pipeline, PipelineConfig};
use repmobile::prune::prune_to_width;
use repmobile::reparam::{fold_bn, reparameterize_model};
use repmobile::rng::stream_rng;
use repmobile::tensor::kernels::{self, ConvSpec};
use repmobile::tensor::{Element, Graph, NodeId, Tensor};
use repmobile::train::lr_schedule;

static HEAVY: Mutex<()> = Mutex::new(());

fn lock() -> std::sync::MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|p| p.into_inner())
}

fn rand_tensor<T: Element>(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n).map(|_| T::from_f64_(rng.random_range(lo..hi))).collect(),
    )
    .unwrap()
}

/// Random but sane running statistics, the kind a trained network carries.
fn randomize_bn_stats<T: Element>(model: &mut ModelGraph<T>, seed: u64) {
    let mut rng = stream_rng(seed, &[0xb57a75]);
    model.for_each_tensor_mut(&mut |name, tensor| {
        let range = if name.ends_with(".gamma") {
            Some((0.3, 1.2))
        } else if name.ends_with(".beta") || name.ends_with(".running_mean") {
            Some((-0.5, 0.5))
        } else if name.ends_with(".running_var") {
            Some((1.0, 9.0))
        } else {
            None
        };
        if let Some((lo, hi)) = range {
            for v in tensor.data_mut() {
                *v = T::from_f64_(rng.random_range(lo..hi));
            }
        }
    });
}

fn equivalence_battery<T: Element>(models: usize, inputs_per_model: usize, seed: u64) -> (f64, bool) {
    let mut worst = 0f64;
    let mut all_agree = true;
    for mi in 0..models {
        let mut rng = stream_rng(seed, &[1, mi as u64]);
        let width = if rng.random::<bool>() { 16 } else { 32 };
        let mut model = build_model::<T>(width, &BranchShape::ALL, seed * 1000 + mi as u64).unwrap();
        randomize_bn_stats(&mut model, seed * 7 + mi as u64);
        let merged = reparameterize_model(&model).unwrap();
        let report =
            repmobile::reparam::verify_equivalence(&model, &merged, inputs_per_model, mi as u64)
                .unwrap();
        worst = worst.max(report.worst_abs_diff);
        all_agree &= report.argmax_agree;
    }
    (worst, all_agree)
}

#[test]
fn criterion_01_reparameterization_equivalence() {
    let _g = lock();
    let start = Instant::now();
    let (worst32, agree32) = equivalence_battery::<f32>(100, 100, 3);
    let (worst64, agree64) = equivalence_battery::<f64>(100, 100, 4);
    let elapsed = start.elapsed().as_secs_f64();
    println!(
        "criterion 1 (reparameterization equivalence): {} — f32 worst {:.3e} (<=1e-4), f64 worst {:.3e} (<=1e-8), argmax agree {}, {:.1}s (<=120s)",
        if worst32 <= 1e-4 && worst64 <= 1e-8 && agree32 && agree64 && elapsed <= 120.0 {
            "PASS"
        } else {
            "FAIL"
        },
        worst32,
        worst64,
        agree32 && agree64,
        elapsed
    );
    assert!(worst32 <= 1e-4, "f32 worst diff {}", worst32);
    assert!(worst64 <= 1e-8, "f64 worst diff {}", worst64);
    assert!(agree32 && agree64, "argmax disagreement");
    assert!(elapsed <= 120.0, "battery took {:.1}s", elapsed);
}

#[test]
fn criterion_02_bn_folding_golden_values() {
    let _g = lock();
    // worked example: W=2, gamma=0.5, sigma=2, mu=1, beta=0.1
    let conv = ConvParams::<f64> {
        weight: Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap(),
        bias: None,
        stride: (1, 1),
        padding: (0, 0),
        groups: 1,
    };
    let bn = BnParams {
        gamma: Tensor::from_vec(&[1], vec![0.5]).unwrap(),
        beta: Tensor::from_vec(&[1], vec![0.1]).unwrap(),
        running_mean: Tensor::from_vec(&[1], vec![1.0]).unwrap(),
        running_var: Tensor::from_vec(&[1], vec![3.99999]).unwrap(),
        eps: 1e-5,
        momentum: 0.1,
    };
    let folded = fold_bn(&conv, &bn).unwrap();
    let golden_ok =
        (folded.weight.data()[0] - 0.5).abs() < 1e-9 && (folded.bias.data()[0] + 0.15).abs() < 1e-9;

    // operational oracle over 100 random layers
    let mut worst = 0f64;
    for trial in 0..100u64 {
        let mut rng = stream_rng(trial, &[2]);
        let co = rng.random_range(1..4usize);
        let ci = rng.random_range(1..4usize);
        let k = if rng.random::<bool>() { 1 } else { 3 };
        let conv = ConvParams::<f32> {
            weight: rand_tensor(&[co, ci, k, k], &mut rng, -1.0, 1.0),
            bias: (trial % 2 == 0).then(|| rand_tensor(&[co], &mut rng, -0.5, 0.5)),
            stride: (1, 1),
            padding: (k / 2, k / 2),
            groups: 1,
        };
        let bn = BnParams::<f32> {
            gamma: rand_tensor(&[co], &mut rng, 0.3, 1.5),
            beta: rand_tensor(&[co], &mut rng, -0.5, 0.5),
            running_mean: rand_tensor(&[co], &mut rng, -0.5, 0.5),
            running_var: rand_tensor(&[co], &mut rng, 0.2, 2.0),
            eps: 1e-5,
            momentum: 0.1,
        };
        let folded = fold_bn(&conv, &bn).unwrap();
        let x = rand_tensor::<f32>(&[1, ci, 6, 6], &mut rng, -1.0, 1.0);
        let direct = kernels::conv2d(&x, &folded.weight, Some(&folded.bias), &conv.spec()).unwrap();
        let staged = kernels::bn_eval_forward(
            &kernels::conv2d(&x, &conv.weight, conv.bias.as_ref(), &conv.spec()).unwrap(),
            &bn.gamma,
            &bn.beta,
            &bn.running_mean,
            &bn.running_var,
            bn.eps,
        )
        .unwrap()
        .0;
        worst = worst.max(direct.max_abs_diff(&staged));
    }
    println!(
        "criterion 2 (BN folding golden values): {} — worked example exact, 100-layer oracle worst {:.3e} (<=1e-5)",
        if golden_ok && worst <= 1e-5 { "PASS" } else { "FAIL" },
        worst
    );
    assert!(golden_ok);
    assert!(worst <= 1e-5, "fold-vs-staged worst {}", worst);
}

/// Central finite differences of a scalar graph against analytic gradients.
/// Entries where both sides sit below the fd noise floor are skipped.
fn fd_check(
    shapes: &[Vec<usize>],
    seed: u64,
    lo: f64,
    hi: f64,
    build: &dyn Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
) -> f64 {
    let h = 1e-5;
    let mut rng = stream_rng(seed, &[3]);
    let inputs: Vec<Tensor<f64>> = shapes
        .iter()
        .map(|s| rand_tensor(s, &mut rng, lo, hi))
        .collect();
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = vals.iter().map(|v| g.leaf(v.clone(), true)).collect();
        let root = build(&mut g, &ids);
        g.value(root).item()
    };
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|v| g.leaf(v.clone(), true)).collect();
    let root = build(&mut g, &ids);
    g.backward(root).unwrap();

    let mut worst = 0f64;
    for (vi, input) in inputs.iter().enumerate() {
        let analytic = g
            .grad(ids[vi])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        for ei in 0..input.numel() {
            let mut plus = inputs.clone();
            plus[vi].data_mut()[ei] += h;
            let mut minus = inputs.clone();
            minus[vi].data_mut()[ei] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = analytic.data()[ei];
            if an.abs().max(fd.abs()) < 1e-7 {
                continue;
            }
            worst = worst.max((an - fd).abs() / an.abs().max(fd.abs()).max(1e-3));
        }
    }
    worst
}

#[test]
fn criterion_03_gradient_correctness() {
    let _g = lock();
    let trials = 20u64;
    let mut report = Vec::new();

    let mut run = |name: &str, f: &dyn Fn(u64) -> f64| {
        let mut worst = 0f64;
        for t in 0..trials {
            worst = worst.max(f(t));
        }
        report.push((name.to_string(), worst));
        assert!(worst <= 1e-3, "{} gradient error {}", name, worst);
    };

    run("conv2d", &|t| {
        let spec = ConvSpec::new((1, 1), (1, 1), 1);
        fd_check(
            &[vec![1, 2, 5, 5], vec![3, 2, 3, 3], vec![3]],
            100 + t,
            -1.0,
            1.0,
            &|g, ids| {
                let y = g.conv2d(ids[0], ids[1], Some(ids[2]), spec).unwrap();
                let p = g.global_avg_pool(y).unwrap();
                g.cross_entropy(p, &[t as usize % 3]).unwrap()
            },
        )
    });
    run("batchnorm-train", &|t| {
        fd_check(&[vec![2, 2, 3, 3], vec![2], vec![2]], 200 + t, -1.0, 1.0, &|g, ids| {
            let (y, _, _) = g.batchnorm_train(ids[0], ids[1], ids[2], 1e-5).unwrap();
            let r = g.relu(y);
            let p = g.global_avg_pool(r).unwrap();
            g.cross_entropy(p, &[0, 1]).unwrap()
        })
    });
    run("softmax_t", &|t| {
        fd_check(&[vec![2, 5]], 300 + t, -1.0, 1.0, &|g, ids| {
            let p = g.softmax_t(ids[0], 0.7).unwrap();
            let mut rng = stream_rng(900 + t, &[4]);
            let q = kernels::softmax_t(&rand_tensor::<f64>(&[2, 5], &mut rng, -1.0, 1.0), 1.0)
                .unwrap();
            let qn = g.constant(q);
            g.kl_divergence(p, qn).unwrap()
        })
    });
    run("cross_entropy", &|t| {
        fd_check(&[vec![3, 6]], 400 + t, -2.0, 2.0, &|g, ids| {
            g.cross_entropy(ids[0], &[t as usize % 6, 1, 4]).unwrap()
        })
    });
    run("kl_divergence", &|t| {
        // parameterize the model distribution through a softmax so the
        // row-sum precondition survives the perturbation
        fd_check(&[vec![2, 4]], 500 + t, -1.5, 1.5, &|g, ids| {
            let p = g.softmax_t(ids[0], 1.0).unwrap();
            let mut rng = stream_rng(700 + t, &[5]);
            let q = kernels::softmax_t(&rand_tensor::<f64>(&[2, 4], &mut rng, -1.0, 1.0), 1.0)
                .unwrap();
            let qn = g.constant(q);
            g.kl_divergence(p, qn).unwrap()
        })
    });
    run("distill_loss", &|t| {
        fd_check(&[vec![2, 10]], 600 + t, -1.0, 1.0, &|g, ids| {
            let mut rng = stream_rng(800 + t, &[6]);
            let teachers = vec![
                rand_tensor::<f64>(&[2, 10], &mut rng, -1.0, 1.0),
                rand_tensor::<f64>(&[2, 10], &mut rng, -1.0, 1.0),
            ];
            let cfg = DistillConfig {
                lambda: 0.5,
                tau: 0.1,
            };
            distill_loss_graph(g, ids[0], &teachers, &[3, 7], &cfg).unwrap()
        })
    });

    let detail: Vec<String> = report
        .iter()
        .map(|(n, w)| format!("{} {:.2e}", n, w))
        .collect();
    println!(
        "criterion 3 (gradient correctness, 20 trials each): PASS — worst rel err: {}",
        detail.join(", ")
    );
}

#[test]
fn criterion_04_distillation_loss_endpoints() {
    let _g = lock();
    let student =
        Tensor::<f64>::from_vec(&[2, 10], (0..20).map(|i| (i as f64) * 0.17 - 1.3).collect())
            .unwrap();
    let teacher = Tensor::<f64>::full(&[2, 10], 0.4);
    let labels = [2usize, 9];

    // lambda = 1 reduces to plain cross-entropy exactly
    let l1 = distill_loss(
        &student,
        &[teacher.clone()],
        &labels,
        &DistillConfig { lambda: 1.0, tau: 0.1 },
    )
    .unwrap();
    let (ce, _) = kernels::cross_entropy(&student, &labels).unwrap();
    let exact_ce = l1 == ce;

    // lambda = 0 with student == teachers gives ~0
    let l0 = distill_loss(
        &student,
        &[student.clone(), student.clone()],
        &labels,
        &DistillConfig { lambda: 0.0, tau: 0.1 },
    )
    .unwrap();

    // the K=2 hand-computed blend (teacher1 = student, teacher2 = uniform)
    let one_hot =
        Tensor::<f64>::from_vec(&[1, 10], {
            let mut v = vec![0.0; 10];
            v[0] = 1.0;
            v
        })
        .unwrap();
    let uniform = Tensor::<f64>::zeros(&[1, 10]);
    let blended = distill_loss(
        &one_hot,
        &[one_hot.clone(), uniform],
        &[0],
        &DistillConfig { lambda: 0.5, tau: 0.1 },
    )
    .unwrap();
    let expect = {
        let mut e: Vec<f64> = (0..10).map(|i| (one_hot.data()[i] / 0.1 - 10.0).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter_mut().for_each(|v| *v /= z);
        let kl2: f64 = (0..10).map(|i| 0.1 * (0.1f64 / e[i]).ln()).sum();
        let ez: f64 = (0..10).map(|i| one_hot.data()[i].exp()).sum();
        let ce = -(one_hot.data()[0].exp() / ez).ln();
        0.5 * ce + 0.5 * kl2 / 2.0
    };
    let blend_ok = (blended - expect).abs() <= 1e-6;

    println!(
        "criterion 4 (distillation endpoints): {} — lambda=1 exact CE: {}, lambda=0 matched loss {:.2e} (<=1e-9), K=2 blend |err| {:.2e} (<=1e-6)",
        if exact_ce && l0.abs() <= 1e-9 && blend_ok { "PASS" } else { "FAIL" },
        exact_ce,
        l0,
        (blended - expect).abs()
    );
    assert!(exact_ce);
    assert!(l0.abs() <= 1e-9);
    assert!(blend_ok);
}

#[test]
fn criterion_05_cache_replay() {
    let _g = lock();
    let dir = tempfile::tempdir().unwrap();
    let spec = repmobile::data::SyntheticSceneSpec {
        seed: 55,
        ..Default::default()
    };
    // 50 samples, 3 epochs, the built-in wide single-branch teacher
    let index = repmobile::data::gen_split(&spec, 5, repmobile::data::Split::Train, dir.path()).unwrap();
    let data = repmobile::data::LoadedDataset::load(index).unwrap();
    let teacher = ModelTeacher::new(
        "builtin-teacher",
        build_model::<f32>(96, &[BranchShape::K3x3], 5).unwrap(),
    );
    let handles: Vec<&dyn TeacherHandle> = vec![&teacher];
    let cfg = repmobile::train::TrainConfig {
        batch_size: 16,
        seed: 99,
        ..Default::default()
    };
    let cache = cache_teachers(&handles, &data, None, 3, &cfg).unwrap();
    assert_eq!(cache.len(), 150);
    let path = dir.path().join("logits.rlgc");
    cache.write(&path).unwrap();
    let cache = repmobile::distill::LogitsCache::read(&path).unwrap();

    let frontend = Frontend::new(FrontendConfig::default(), SAMPLE_RATE);
    let worst = replay_cache(&cache, &handles, &data, &frontend).unwrap();
    println!(
        "criterion 5 (cache replay, 150 records): {} — worst logit deviation {:.3e} (<=1e-5)",
        if worst <= 1e-5 { "PASS" } else { "FAIL" },
        worst
    );
    assert!(worst <= 1e-5, "replay deviation {}", worst);
}

#[test]
fn criterion_06_mac_param_accounting() {
    let _g = lock();
    let conv = ConvParams::<f32> {
        weight: Tensor::zeros(&[8, 3, 3, 3]),
        bias: Some(Tensor::zeros(&[8])),
        stride: (1, 1),
        padding: (1, 1),
        groups: 1,
    };
    let params_ok = conv_params_count(&conv) == 224;
    let macs_ok = conv_macs(&conv, 32, 32).unwrap() == 221_184;

    let mut neutral = true;
    let mut strict = true;
    for width in [32usize, 64, 96] {
        let multi = build_model::<f32>(width, &BranchShape::ALL, 1).unwrap();
        let single = build_model::<f32>(width, &[BranchShape::K3x3], 1).unwrap();
        let merged = reparameterize_model(&multi).unwrap();
        let single_merged = reparameterize_model(&single).unwrap();
        neutral &= count_macs(&merged, 256, 57).unwrap()
            == count_macs(&single_merged, 256, 57).unwrap();
        strict &= count_macs(&multi, 256, 57).unwrap() > count_macs(&merged, 256, 57).unwrap();
    }
    println!(
        "criterion 6 (MAC/param accounting): {} — 224 params exact: {}, 221184 MACs exact: {}, merged == single-branch inference MACs at 32/64/96: {}, multi-branch train form strictly greater: {}",
        if params_ok && macs_ok && neutral && strict { "PASS" } else { "FAIL" },
        params_ok,
        macs_ok,
        neutral,
        strict
    );
    assert!(params_ok && macs_ok && neutral && strict);
}

#[test]
fn criterion_07_pruning_soundness() {
    let _g = lock();
    let m96 = build_model::<f32>(96, &BranchShape::ALL, 7).unwrap();
    let m64 = prune_to_width(&m96, 64).unwrap();
    let m32 = prune_to_width(&m64, 32).unwrap();
    let counts_ok = count_params(&m64) == count_params(&build_model::<f32>(64, &BranchShape::ALL, 7).unwrap())
        && count_params(&m32) == count_params(&build_model::<f32>(32, &BranchShape::ALL, 7).unwrap());
    let monotone = count_params(&m96) > count_params(&m64)
        && count_params(&m64) > count_params(&m32)
        && count_macs(&m96, 256, 57).unwrap() > count_macs(&m64, 256, 57).unwrap()
        && count_macs(&m64, 256, 57).unwrap() > count_macs(&m32, 256, 57).unwrap();

    // zero-channel exactness at 96 -> 64: zero the producing weights of the
    // channels that will be dropped (fresh model BNs are already identity)
    let mut prepared = build_model::<f32>(96, &BranchShape::ALL, 8).unwrap();
    let w0 = 96usize;
    let target = 64usize;
    let zero_rows = |t: &mut Tensor<f32>, drop: &[usize]| {
        let per = t.numel() / t.shape()[0];
        for &c in drop {
            t.data_mut()[c * per..(c + 1) * per].fill(0.0);
        }
    };
    let drop_tail = |n: usize, keep: usize| (keep..n).collect::<Vec<_>>();
    zero_rows(&mut prepared.stem[0].conv.weight, &drop_tail(w0 / 4, target / 4));
    let d1 = drop_tail(w0, target);
    let d2 = drop_tail(2 * w0, 2 * target);
    zero_rows(&mut prepared.stem[1].conv.weight, &d1);
    for i in 0..prepared.blocks.len() {
        let (inc, outc, hidden) = (
            prepared.blocks[i].in_channels,
            prepared.blocks[i].out_channels,
            prepared.blocks[i].hidden_channels,
        );
        let dh = drop_tail(hidden, repmobile::model::EXPANSION * (inc / w0) * target);
        zero_rows(&mut prepared.blocks[i].expand.conv.weight, &dh);
        for br in &mut prepared.blocks[i].dw_branches {
            zero_rows(&mut br.conv.weight, &dh);
        }
        let dout: &[usize] = if outc == w0 { &d1 } else { &d2 };
        zero_rows(&mut prepared.blocks[i].project.conv.weight, dout);
    }
    let pruned = prune_to_width(&prepared, target).unwrap();
    let mut rng = stream_rng(9, &[7]);
    let x = rand_tensor::<f32>(&[2, 1, 64, 25], &mut rng, -1.0, 1.0);
    let a = prepared.forward_eval(&x).unwrap();
    let b = pruned.forward_eval(&x).unwrap();
    let zero_exact = a.max_abs_diff(&b) <= 1e-5;

    println!(
        "criterion 7 (pruning soundness): {} — 96->64->32 counts match fresh builds: {}, params/MACs strictly decrease: {}, zero-channel exactness diff {:.3e} (<=1e-5)",
        if counts_ok && monotone && zero_exact { "PASS" } else { "FAIL" },
        counts_ok,
        monotone,
        a.max_abs_diff(&b)
    );
    assert!(counts_ok && monotone && zero_exact);
}

#[test]
fn criterion_08_lr_schedule() {
    let _g = lock();
    let e = 30.0;
    let at0 = lr_schedule(0.0, e, 5.0, 0.01);
    let at5 = lr_schedule(5.0, e, 5.0, 0.01);
    let mid = lr_schedule((5.0 + e) / 2.0, e, 5.0, 0.01);
    let at_end = lr_schedule(e, e, 5.0, 0.01);
    let jump = (lr_schedule(5.0 - 1e-9, e, 5.0, 0.01) - lr_schedule(5.0 + 1e-9, e, 5.0, 0.01)).abs();
    let ok = at0 == 0.0
        && (at5 - 0.01).abs() < 1e-15
        && (mid - 0.005).abs() < 1e-15
        && at_end.abs() < 1e-17
        && jump <= 1e-12;
    println!(
        "criterion 8 (LR schedule): {} — lr(0)={}, lr(5)={}, midpoint={}, lr(E)={:.1e}, warmup-boundary jump {:.1e} (<=1e-12)",
        if ok { "PASS" } else { "FAIL" },
        at0,
        at5,
        mid,
        at_end,
        jump
    );
    assert!(ok);
}

#[test]
fn criterion_09_subset_protocol() {
    let _g = lock();
    // 1000-sample balanced synthetic index: 10 classes x 100, 3 devices
    let mut samples = Vec::new();
    for class in 0..10u32 {
        for j in 0..100usize {
            samples.push(SampleMeta {
                id: (class as u64) * 100 + j as u64,
                class,
                device: (j % 3) as u32,
                seed: 0,
                file: String::new(),
            });
        }
    }
    let fractions = [1.0, 0.5, 0.25, 0.1, 0.05];
    let manifests = make_subsets(&samples, &fractions, 17).unwrap();
    let nested = check_nesting(&manifests);

    let mut dev_total = [0f64; 3];
    for s in &samples {
        dev_total[s.device as usize] += 1.0;
    }
    let mut stratified = true;
    let mut worst_dev = 0f64;
    for m in &manifests {
        let mut per_class = [0f64; 10];
        let mut per_device = [0f64; 3];
        for id in &m.ids {
            let s = samples.iter().find(|s| s.id == *id).unwrap();
            per_class[s.class as usize] += 1.0;
            per_device[s.device as usize] += 1.0;
        }
        for c in 0..10 {
            let dev = (per_class[c] - m.fraction * 100.0).abs();
            worst_dev = worst_dev.max(dev);
            stratified &= dev <= 1.0;
        }
        for d in 0..3 {
            let dev = (per_device[d] - m.fraction * dev_total[d]).abs();
            worst_dev = worst_dev.max(dev);
            stratified &= dev <= 1.0;
        }
    }
    println!(
        "criterion 9 (subset protocol, 1000-sample index): {} — nesting 5%⊂10%⊂25%⊂50%⊂100%: {}, worst class/device deviation {:.1} (<=1)",
        if nested && stratified { "PASS" } else { "FAIL" },
        nested,
        worst_dev
    );
    assert!(nested && stratified);
}

#[test]
fn criterion_10_end_to_end_pipeline_and_11_determinism() {
    let _g = lock();
    let cfg = PipelineConfig {
        seed: 2024,
        fractions: vec![1.0],
        ..PipelineConfig::default()
    };

    let dir_a = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let summary_a = run_pipeline(&cfg, dir_a.path()).unwrap();
    let elapsed = start.elapsed().as_secs_f64();

    let final_row = format!("pruned-c{}", summary_a.final_width);
    let merged_row = format!("merged-c{}", summary_a.final_width);
    let final_acc = summary_a.accuracy(&merged_row, 0).unwrap();
    let trainform_acc = summary_a.accuracy(&final_row, 0).unwrap();
    let within_budget = elapsed <= 1800.0;
    let accurate = final_acc >= 0.30;
    let merged_exact = summary_a.merged_matches_trainform && final_acc == trainform_acc;
    println!(
        "criterion 10 (end-to-end desk pipeline): {} — merged c{} accuracy {:.1}% (>=30%), merged == train-form accuracy: {}, {:.0}s (<=1800s)",
        if within_budget && accurate && merged_exact && summary_a.final_width == 32 {
            "PASS"
        } else {
            "FAIL"
        },
        summary_a.final_width,
        final_acc * 100.0,
        merged_exact,
        elapsed
    );
    assert_eq!(summary_a.final_width, 32);
    assert!(accurate, "final accuracy {:.3} below 0.30", final_acc);
    assert!(merged_exact, "merged accuracy must equal train-form accuracy exactly");
    assert!(within_budget, "pipeline took {:.0}s", elapsed);

    // criterion 11: same master seed reproduces the results grid bitwise
    let dir_b = tempfile::tempdir().unwrap();
    let summary_b = run_pipeline(&cfg, dir_b.path()).unwrap();
    let grid_a = std::fs::read(dir_a.path().join("results_grid.csv")).unwrap();
    let grid_b = std::fs::read(dir_b.path().join("results_grid.csv")).unwrap();
    let identical = grid_a == grid_b;
    println!(
        "criterion 11 (pipeline determinism): {} — repeated run reproduces results_grid.csv bitwise: {}",
        if identical { "PASS" } else { "FAIL" },
        identical
    );
    assert!(identical);
    let _ = summary_b;
}
