//! Lossless (eval-mode) transformation of multi-branch train-form blocks into
//! single-kernel inference blocks: zero-pad kernels to 3x3, fold each BN into
//! its conv, sum the branches.
//!
//! Folding arithmetic runs at 64-bit internally and casts to the model dtype
//! at the end, keeping accumulation error in the gamma/sigma scaling small.

use crate::error::{Error, Result};
use crate::model::{BnParams, ConvParams, ModelGraph, ModelMode};
use crate::tensor::{Element, Tensor};

/// A convolution with its batch norm absorbed: weights plus bias, no BN.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldedConv<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Zero-pad a `[C, 1, K0, K1]` depthwise kernel to `[C, 1, 3, 3]`, centering
/// the original taps (a 1x1 tap lands at (1,1), a 1x3 row at row 1, a 3x1
/// column at column 1).
pub fn pad_kernel<T: Element>(weight: &Tensor<T>, target: (usize, usize)) -> Result<Tensor<T>> {
    let s = weight.shape();
    if s.len() != 4 {
        return Err(Error::Dimension(format!("pad_kernel expects 4-d weights, got {:?}", s)));
    }
    let (c, cig, k0, k1) = (s[0], s[1], s[2], s[3]);
    if k0 % 2 == 0 || k1 % 2 == 0 || target.0 % 2 == 0 || target.1 % 2 == 0 {
        return Err(Error::Config(
            "pad_kernel supports odd kernel sizes only".into(),
        ));
    }
    if k0 > target.0 || k1 > target.1 {
        return Err(Error::Dimension(format!(
            "kernel {}x{} does not fit into target {}x{}",
            k0, k1, target.0, target.1
        )));
    }
    let (o0, o1) = ((target.0 - k0) / 2, (target.1 - k1) / 2);
    let mut out = Tensor::zeros(&[c, cig, target.0, target.1]);
    for ci in 0..c * cig {
        for i in 0..k0 {
            for j in 0..k1 {
                out.data_mut()[(ci * target.0 + o0 + i) * target.1 + o1 + j] =
                    weight.data()[(ci * k0 + i) * k1 + j];
            }
        }
    }
    Ok(out)
}

/// Fold eval-mode batch norm into the preceding convolution:
/// `W_hat[c] = W[c] * gamma[c]/sigma[c]`,
/// `b_hat[c] = (b[c] - mu[c]) * gamma[c]/sigma[c] + beta[c]`,
/// with `sigma = sqrt(running_var + eps)`.
pub fn fold_bn<T: Element>(conv: &ConvParams<T>, bn: &BnParams<T>) -> Result<FoldedConv<T>> {
    let co = conv.out_channels();
    if bn.channels() != co {
        return Err(Error::Dimension(format!(
            "batch norm has {} channels, conv produces {}",
            bn.channels(),
            co
        )));
    }
    if bn.running_var.data().iter().any(|v| *v < T::zero()) {
        return Err(Error::Data("negative running variance".into()));
    }
    let per_channel = conv.weight.numel() / co;
    let mut weight = Tensor::zeros(conv.weight.shape());
    let mut bias = Tensor::zeros(&[co]);
    for c in 0..co {
        let gamma = bn.gamma.data()[c].to_f64_();
        let sigma = (bn.running_var.data()[c].to_f64_() + bn.eps).sqrt();
        let scale = gamma / sigma;
        let mu = bn.running_mean.data()[c].to_f64_();
        let beta = bn.beta.data()[c].to_f64_();
        let b = conv.bias.as_ref().map_or(0.0, |b| b.data()[c].to_f64_());
        for i in 0..per_channel {
            let idx = c * per_channel + i;
            weight.data_mut()[idx] = T::from_f64_(conv.weight.data()[idx].to_f64_() * scale);
        }
        bias.data_mut()[c] = T::from_f64_((b - mu) * scale + beta);
    }
    Ok(FoldedConv { weight, bias })
}

/// Merge depthwise branches into one 3x3 kernel: fold each branch's BN, pad
/// every kernel to 3x3, sum weights and biases elementwise.
pub fn merge_branches<T: Element>(
    branches: &[(&ConvParams<T>, &BnParams<T>)],
) -> Result<FoldedConv<T>> {
    if branches.is_empty() {
        return Err(Error::Config("cannot merge an empty branch list".into()));
    }
    let first = branches[0].0;
    let channels = first.out_channels();
    for (conv, _) in branches {
        if conv.stride != first.stride {
            return Err(Error::Config(format!(
                "branch stride mismatch: {:?} vs {:?}",
                conv.stride, first.stride
            )));
        }
        if conv.out_channels() != channels || conv.groups != channels {
            return Err(Error::Config(
                "branches must be depthwise with a shared channel count".into(),
            ));
        }
    }
    let mut weight = Tensor::<T>::zeros(&[channels, 1, 3, 3]);
    let mut bias = Tensor::<T>::zeros(&[channels]);
    for (conv, bn) in branches {
        let folded = fold_bn(conv, bn)?;
        let padded = pad_kernel(&folded.weight, (3, 3))?;
        for (acc, v) in weight.data_mut().iter_mut().zip(padded.data()) {
            *acc += *v;
        }
        for (acc, v) in bias.data_mut().iter_mut().zip(folded.bias.data()) {
            *acc += *v;
        }
    }
    Ok(FoldedConv { weight, bias })
}

/// Produce the merged inference model: every block's branch set becomes one
/// folded 3x3 depthwise conv, and the expand/project/stem/head BNs are folded
/// into their convolutions. Eval-mode outputs are preserved.
pub fn reparameterize_model<T: Element>(model: &ModelGraph<T>) -> Result<ModelGraph<T>> {
    if model.mode == ModelMode::Merged {
        return Err(Error::AlreadyMerged);
    }
    if model.mid_training {
        return Err(Error::MidTraining);
    }
    let mut out = ModelGraph::<T>::architecture(model.config.clone(), ModelMode::Merged)?;

    let fold_unit = |unit: &crate::model::ConvUnit<T>,
                     dst: &mut crate::model::ConvUnit<T>|
     -> Result<()> {
        let bn = unit
            .bn
            .as_ref()
            .ok_or_else(|| Error::Config("train-form unit is missing its batch norm".into()))?;
        let folded = fold_bn(&unit.conv, bn)?;
        dst.conv.weight = folded.weight;
        dst.conv.bias = Some(folded.bias);
        Ok(())
    };

    for (src, dst) in model.stem.iter().zip(out.stem.iter_mut()) {
        fold_unit(src, dst)?;
    }
    for (src, dst) in model.blocks.iter().zip(out.blocks.iter_mut()) {
        fold_unit(&src.expand, &mut dst.expand)?;
        let branches: Vec<(&ConvParams<T>, &BnParams<T>)> =
            src.dw_branches.iter().map(|b| (&b.conv, &b.bn)).collect();
        let merged = merge_branches(&branches)?;
        let dw = dst
            .dw_merged
            .as_mut()
            .expect("merged architecture has a dw slot");
        dw.weight = merged.weight;
        dw.bias = Some(merged.bias);
        fold_unit(&src.project, &mut dst.project)?;
    }
    fold_unit(&model.head, &mut out.head)?;
    Ok(out)
}

/// Outcome of an equivalence battery between two model forms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquivalenceReport {
    pub inputs: usize,
    pub worst_abs_diff: f64,
    pub max_logit_abs: f64,
    pub argmax_agree: bool,
}

impl EquivalenceReport {
    /// Absolute tolerance scaled by logit magnitude (floor 1.0), so the
    /// check tracks f32 rounding rather than raw activation scale.
    pub fn within(&self, tol: f64) -> bool {
        self.argmax_agree && self.worst_abs_diff <= tol * self.max_logit_abs.max(1.0)
    }
}

/// Run `n` random inputs through both forms and report the worst absolute
/// logit difference, the logit magnitude, and whether every argmax agreed.
pub fn verify_equivalence<T: Element>(
    train_form: &ModelGraph<T>,
    merged: &ModelGraph<T>,
    n: usize,
    seed: u64,
) -> Result<EquivalenceReport> {
    use rand::Rng;
    let mut worst = 0.0f64;
    let mut magnitude = 0.0f64;
    let mut agree = true;
    let batch = 50usize.min(n.max(1));
    let mut done = 0;
    let mut round = 0u64;
    while done < n {
        let take = batch.min(n - done);
        let mut rng = crate::rng::stream_rng(seed, &[0x5eed, round]);
        let mut x = Tensor::<T>::zeros(&[take, 1, 64, 25]);
        for v in x.data_mut() {
            *v = T::from_f64_(rng.random_range(-1.0..1.0));
        }
        let a = train_form.forward_eval(&x)?;
        let b = merged.forward_eval(&x)?;
        worst = worst.max(a.max_abs_diff(&b));
        magnitude = magnitude.max(a.max_abs());
        let classes = a.shape()[1];
        for row in 0..take {
            let am = argmax(&a.data()[row * classes..(row + 1) * classes]);
            let bm = argmax(&b.data()[row * classes..(row + 1) * classes]);
            if am != bm {
                agree = false;
            }
        }
        done += take;
        round += 1;
    }
    Ok(EquivalenceReport {
        inputs: n,
        worst_abs_diff: worst,
        max_logit_abs: magnitude,
        argmax_agree: agree,
    })
}

pub(crate) fn argmax<T: PartialOrd>(row: &[T]) -> usize {
    let mut best = 0;
    for i in 1..row.len() {
        if row[i] > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, BranchShape, BN_EPS};
    use crate::tensor::kernels::{self, ConvSpec};
    use rand::Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = crate::rng::stream_rng(seed, &[0xf01d]);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn pad_kernel_places_taps() {
        let w = Tensor::<f64>::from_vec(&[1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let p = pad_kernel(&w, (3, 3)).unwrap();
        assert_eq!(
            p.data(),
            &[0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 0.0, 0.0, 0.0]
        );
        let w = Tensor::<f64>::from_vec(&[1, 1, 1, 1], vec![7.0]).unwrap();
        let p = pad_kernel(&w, (3, 3)).unwrap();
        assert_eq!(p.data()[4], 7.0);
        assert_eq!(p.data().iter().filter(|v| **v != 0.0).count(), 1);
    }

    #[test]
    fn pad_kernel_rejects_even_sizes() {
        let w = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        assert!(matches!(pad_kernel(&w, (3, 3)), Err(Error::Config(_))));
    }

    #[test]
    fn padded_kernel_conv_equals_original() {
        // depthwise 1x3 with its own padding vs padded-to-3x3 with pad (1,1)
        let c = 4;
        let x = rand_t(&[2, c, 8, 8], 1);
        let w = rand_t(&[c, 1, 1, 3], 2);
        let orig = kernels::conv2d(&x, &w, None, &ConvSpec::new((1, 1), (0, 1), c)).unwrap();
        let padded = pad_kernel(&w, (3, 3)).unwrap();
        let alt = kernels::conv2d(&x, &padded, None, &ConvSpec::new((1, 1), (1, 1), c)).unwrap();
        assert!(orig.max_abs_diff(&alt) <= 1e-6);
    }

    fn bn_with(channels: usize, seed: u64) -> BnParams<f64> {
        let mut rng = crate::rng::stream_rng(seed, &[0xb4]);
        let mut bn = BnParams::<f64>::identity(channels);
        for v in bn.gamma.data_mut() {
            *v = rng.random_range(0.5..1.5);
        }
        for v in bn.beta.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        for v in bn.running_mean.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        for v in bn.running_var.data_mut() {
            *v = rng.random_range(0.2..2.0);
        }
        bn
    }

    #[test]
    fn fold_bn_golden_example() {
        // W = [[2.0]] 1x1 single channel, b=0, gamma=0.5, mu=1.0,
        // var=3.99999, eps=1e-5 (sigma=2.0), beta=0.1
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
        assert!((folded.weight.data()[0] - 0.5).abs() < 1e-9);
        assert!((folded.bias.data()[0] - (-0.15)).abs() < 1e-9);
    }

    #[test]
    fn fold_bn_identity_bn_is_identity() {
        let conv = ConvParams::<f64> {
            weight: rand_t(&[3, 2, 3, 3], 3),
            bias: None,
            stride: (1, 1),
            padding: (1, 1),
            groups: 1,
        };
        let mut bn = BnParams::<f64>::identity(3);
        for v in bn.running_var.data_mut() {
            *v = 1.0 - BN_EPS;
        }
        let folded = fold_bn(&conv, &bn).unwrap();
        assert!(folded.weight.max_abs_diff(&conv.weight) <= 1e-6);
        assert!(folded.bias.max_abs() <= 1e-6);
    }

    #[test]
    fn fold_bn_matches_conv_then_bn_operationally() {
        for trial in 0..100u64 {
            let conv = ConvParams::<f64> {
                weight: rand_t(&[3, 2, 3, 3], 100 + trial),
                bias: if trial % 2 == 0 {
                    Some(rand_t(&[3], 200 + trial))
                } else {
                    None
                },
                stride: (1, 1),
                padding: (1, 1),
                groups: 1,
            };
            let bn = bn_with(3, 300 + trial);
            let folded = fold_bn(&conv, &bn).unwrap();
            let x = rand_t(&[1, 2, 6, 6], 400 + trial);
            let direct = kernels::conv2d(&x, &folded.weight, Some(&folded.bias), &conv.spec())
                .unwrap();
            let staged = kernels::conv2d(&x, &conv.weight, conv.bias.as_ref(), &conv.spec())
                .and_then(|y| {
                    kernels::bn_eval_forward(
                        &y,
                        &bn.gamma,
                        &bn.beta,
                        &bn.running_mean,
                        &bn.running_var,
                        bn.eps,
                    )
                })
                .unwrap()
                .0;
            assert!(
                direct.max_abs_diff(&staged) <= 1e-5,
                "trial {}: {}",
                trial,
                direct.max_abs_diff(&staged)
            );
        }
    }

    #[test]
    fn fold_bn_rejects_negative_variance() {
        let conv = ConvParams::<f64> {
            weight: rand_t(&[1, 1, 1, 1], 5),
            bias: None,
            stride: (1, 1),
            padding: (0, 0),
            groups: 1,
        };
        let mut bn = BnParams::<f64>::identity(1);
        bn.running_var.data_mut()[0] = -0.5;
        assert!(matches!(fold_bn(&conv, &bn), Err(Error::Data(_))));
    }

    fn dw_branch(c: usize, k: (usize, usize), seed: u64) -> (ConvParams<f64>, BnParams<f64>) {
        (
            ConvParams {
                weight: rand_t(&[c, 1, k.0, k.1], seed),
                bias: None,
                stride: (1, 1),
                padding: (k.0 / 2, k.1 / 2),
                groups: c,
            },
            bn_with(c, seed + 1),
        )
    }

    #[test]
    fn merge_singleton_equals_fold() {
        let (conv, bn) = dw_branch(4, (3, 3), 10);
        let merged = merge_branches(&[(&conv, &bn)]).unwrap();
        let folded = fold_bn(&conv, &bn).unwrap();
        assert_eq!(merged.weight, folded.weight);
        assert_eq!(merged.bias, folded.bias);
    }

    #[test]
    fn merge_two_identical_branches_doubles() {
        let (conv, bn) = dw_branch(4, (3, 3), 20);
        let merged = merge_branches(&[(&conv, &bn), (&conv, &bn)]).unwrap();
        let folded = fold_bn(&conv, &bn).unwrap();
        let doubled = crate::tensor::kernels::scale(&folded.weight, 2.0);
        assert!(merged.weight.max_abs_diff(&doubled) <= 1e-12);
    }

    #[test]
    fn merge_rejects_stride_mismatch() {
        let (a_conv, a_bn) = dw_branch(4, (3, 3), 30);
        let (mut b_conv, b_bn) = dw_branch(4, (1, 1), 32);
        b_conv.stride = (2, 1);
        let err = merge_branches(&[(&a_conv, &a_bn), (&b_conv, &b_bn)]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn four_branch_merge_is_operationally_equivalent() {
        let c = 6;
        let shapes = [(3, 3), (1, 1), (3, 1), (1, 3)];
        let branches: Vec<(ConvParams<f64>, BnParams<f64>)> = shapes
            .iter()
            .enumerate()
            .map(|(i, k)| dw_branch(c, *k, 40 + 2 * i as u64))
            .collect();
        let refs: Vec<(&ConvParams<f64>, &BnParams<f64>)> =
            branches.iter().map(|(c, b)| (c, b)).collect();
        let merged = merge_branches(&refs).unwrap();
        for trial in 0..100u64 {
            let x = rand_t(&[1, c, 7, 5], 900 + trial);
            let mut sum: Option<Tensor<f64>> = None;
            for (conv, bn) in &branches {
                let y = kernels::conv2d(&x, &conv.weight, None, &conv.spec()).unwrap();
                let y = kernels::bn_eval_forward(
                    &y,
                    &bn.gamma,
                    &bn.beta,
                    &bn.running_mean,
                    &bn.running_var,
                    bn.eps,
                )
                .unwrap()
                .0;
                sum = Some(match sum {
                    None => y,
                    Some(a) => kernels::add(&a, &y).unwrap(),
                });
            }
            let direct = kernels::conv2d(
                &x,
                &merged.weight,
                Some(&merged.bias),
                &ConvSpec::new((1, 1), (1, 1), c),
            )
            .unwrap();
            assert!(direct.max_abs_diff(&sum.unwrap()) <= 1e-5);
        }
    }

    #[test]
    fn merge_is_homomorphic_under_ablation() {
        let c = 6;
        let branches: Vec<(ConvParams<f64>, BnParams<f64>)> = [(3, 3), (1, 1), (3, 1)]
            .iter()
            .enumerate()
            .map(|(i, k)| dw_branch(c, *k, 60 + 2 * i as u64))
            .collect();
        let all: Vec<_> = branches.iter().map(|(c, b)| (c, b)).collect();
        let without_last: Vec<_> = branches[..2].iter().map(|(c, b)| (c, b)).collect();
        let merged_all = merge_branches(&all).unwrap();
        let merged_subset = merge_branches(&without_last).unwrap();
        let folded_last = fold_bn(&branches[2].0, &branches[2].1).unwrap();
        let padded_last = pad_kernel(&folded_last.weight, (3, 3)).unwrap();
        for i in 0..merged_all.weight.numel() {
            let lhs = merged_subset.weight.data()[i];
            let rhs = merged_all.weight.data()[i] - padded_last.data()[i];
            assert!((lhs - rhs).abs() <= 1e-6);
        }
    }

    #[test]
    fn reparameterize_preserves_eval_outputs() {
        // a freshly initialized model has identity running stats, so branch
        // sums amplify activations; tolerance tracks the logit magnitude
        let model = build_model::<f32>(16, &BranchShape::ALL, 77).unwrap();
        let merged = reparameterize_model(&model).unwrap();
        assert_eq!(merged.mode, ModelMode::Merged);
        let report = verify_equivalence(&model, &merged, 50, 3).unwrap();
        assert!(report.within(1e-5), "{:?}", report);

        // at 64-bit the same battery is tighter by the precision ratio
        let model64 = build_model::<f64>(16, &BranchShape::ALL, 77).unwrap();
        let merged64 = reparameterize_model(&model64).unwrap();
        let report64 = verify_equivalence(&model64, &merged64, 50, 3).unwrap();
        assert!(report64.within(1e-12), "{:?}", report64);
    }

    #[test]
    fn reparameterize_refuses_merged_and_mid_training() {
        let model = build_model::<f32>(16, &BranchShape::ALL, 78).unwrap();
        let merged = reparameterize_model(&model).unwrap();
        assert!(matches!(reparameterize_model(&merged), Err(Error::AlreadyMerged)));
        let mut mid = model.clone();
        mid.mid_training = true;
        assert!(matches!(reparameterize_model(&mid), Err(Error::MidTraining)));
    }

    #[test]
    fn ablate_then_merge_matches_merge_of_ablated_construction() {
        let model = build_model::<f32>(16, &BranchShape::ALL, 79).unwrap();
        let reduced = model
            .ablate_branch(BranchShape::K3x1)
            .unwrap()
            .ablate_branch(BranchShape::K1x3)
            .unwrap();
        let fresh = build_model::<f32>(16, &[BranchShape::K3x3, BranchShape::K1x1], 79).unwrap();
        // shared parameters initialize identically from the same seed
        let a = reparameterize_model(&reduced).unwrap();
        let b = reparameterize_model(&fresh).unwrap();
        let mut worst = 0.0f64;
        let mut tensors_b = std::collections::HashMap::new();
        b.for_each_tensor(&mut |n, t| {
            tensors_b.insert(n.to_string(), t.clone());
        });
        a.for_each_tensor(&mut |n, t| {
            let other = &tensors_b[n];
            worst = worst.max(t.max_abs_diff(other));
        });
        assert!(worst <= 1e-5, "worst tensor diff {}", worst);
    }
}
