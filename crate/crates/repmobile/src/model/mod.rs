//! The Rep-Mobile network: multi-branch depthwise blocks inside an
//! inverted-residual CNN, parameterized by a base channel width.
//!
//! Layout at base width `C`: a two-conv stem (widths `C/4` then `C`, both
//! 3x3 stride 2), three stages of two blocks each at widths `C`, `2C`
//! (first block frequency-stride 2) and `2C`, and a 1x1 convolutional head
//! into the class logits via global average pooling. Blocks expand by 3x on
//! their input width, filter depthwise through the branch set, and project
//! back; residual connections exist exactly where stride is 1 and widths
//! match.

pub mod serialize;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{label_key, stream_rng};
use crate::tensor::kernels::{self, ConvSpec};
use crate::tensor::{Element, Graph, NodeId, Tensor};

/// Depthwise branch kernel shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BranchShape {
    #[serde(rename = "3x3")]
    K3x3,
    #[serde(rename = "1x1")]
    K1x1,
    #[serde(rename = "3x1")]
    K3x1,
    #[serde(rename = "1x3")]
    K1x3,
}

impl BranchShape {
    pub const ALL: [BranchShape; 4] = [
        BranchShape::K3x3,
        BranchShape::K1x1,
        BranchShape::K3x1,
        BranchShape::K1x3,
    ];

    pub fn kernel(self) -> (usize, usize) {
        match self {
            BranchShape::K3x3 => (3, 3),
            BranchShape::K1x1 => (1, 1),
            BranchShape::K3x1 => (3, 1),
            BranchShape::K1x3 => (1, 3),
        }
    }

    /// Padding that keeps all branches spatially aligned.
    pub fn padding(self) -> (usize, usize) {
        let (k0, k1) = self.kernel();
        (k0 / 2, k1 / 2)
    }

    pub fn label(self) -> &'static str {
        match self {
            BranchShape::K3x3 => "3x3",
            BranchShape::K1x1 => "1x1",
            BranchShape::K3x1 => "3x1",
            BranchShape::K1x3 => "1x3",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "3x3" => Ok(BranchShape::K3x3),
            "1x1" => Ok(BranchShape::K1x1),
            "3x1" => Ok(BranchShape::K3x1),
            "1x3" => Ok(BranchShape::K1x3),
            other => Err(Error::Config(format!(
                "unknown branch shape '{}' (expected 3x3, 1x1, 3x1 or 1x3)",
                other
            ))),
        }
    }
}

/// Convolution weights plus geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl<T: Element> ConvParams<T> {
    pub fn spec(&self) -> ConvSpec {
        ConvSpec::new(self.stride, self.padding, self.groups)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Per-channel batch-norm parameters and running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl<T: Element> BnParams<T> {
    pub fn identity(channels: usize) -> Self {
        BnParams {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape()[0]
    }

    fn update_running(&mut self, batch_mean: &Tensor<T>, batch_var: &Tensor<T>) {
        let m = T::from_f64_(self.momentum);
        let one = T::one();
        for (r, b) in self
            .running_mean
            .data_mut()
            .iter_mut()
            .zip(batch_mean.data())
        {
            *r = (one - m) * *r + m * *b;
        }
        for (r, b) in self.running_var.data_mut().iter_mut().zip(batch_var.data()) {
            *r = (one - m) * *r + m * *b;
        }
    }
}

/// Convolution with an optional batch norm behind it (train form keeps the
/// BN; merged form folds it into the conv bias).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvUnit<T> {
    pub conv: ConvParams<T>,
    pub bn: Option<BnParams<T>>,
}

/// One depthwise branch of a block: bias-free conv plus its own BN.
#[derive(Debug, Clone, PartialEq)]
pub struct RepBranch<T> {
    pub shape: BranchShape,
    pub conv: ConvParams<T>,
    pub bn: BnParams<T>,
}

/// Inverted-residual block with a multi-branch depthwise stage.
#[derive(Debug, Clone, PartialEq)]
pub struct RepBlock<T> {
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub out_channels: usize,
    pub stride: (usize, usize),
    pub residual: bool,
    pub expand: ConvUnit<T>,
    /// Train form: one or more branches, summed then relu'd.
    pub dw_branches: Vec<RepBranch<T>>,
    /// Merged form: the single folded 3x3 depthwise kernel.
    pub dw_merged: Option<ConvParams<T>>,
    pub project: ConvUnit<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelMode {
    Train,
    Merged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub branch_set: Vec<BranchShape>,
    pub num_classes: usize,
    pub seed: u64,
}

/// Expansion ratio of every block.
pub const EXPANSION: usize = 3;

/// The full network description plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph<T> {
    pub config: ModelConfig,
    pub mode: ModelMode,
    /// Set while a training loop is feeding batch statistics through the
    /// BNs; reparameterization refuses to run until training is finalized.
    pub mid_training: bool,
    pub stem: Vec<ConvUnit<T>>,
    pub blocks: Vec<RepBlock<T>>,
    pub head: ConvUnit<T>,
}

/// Per-block geometry of the pinned stage layout.
pub(crate) struct BlockPlan {
    pub in_mult: usize,
    pub out_mult: usize,
    pub stride: (usize, usize),
}

pub(crate) fn stage_plan() -> Vec<BlockPlan> {
    vec![
        BlockPlan { in_mult: 1, out_mult: 1, stride: (1, 1) },
        BlockPlan { in_mult: 1, out_mult: 1, stride: (1, 1) },
        BlockPlan { in_mult: 1, out_mult: 2, stride: (2, 1) },
        BlockPlan { in_mult: 2, out_mult: 2, stride: (1, 1) },
        BlockPlan { in_mult: 2, out_mult: 2, stride: (1, 1) },
        BlockPlan { in_mult: 2, out_mult: 2, stride: (1, 1) },
    ]
}

fn canonical_branch_set(branches: &[BranchShape]) -> Result<Vec<BranchShape>> {
    let set: Vec<BranchShape> = BranchShape::ALL
        .iter()
        .copied()
        .filter(|b| branches.contains(b))
        .collect();
    if !set.contains(&BranchShape::K3x3) {
        return Err(Error::Config(
            "branch set must contain the 3x3 main branch".into(),
        ));
    }
    Ok(set)
}

fn validate_width(base_channels: usize) -> Result<()> {
    if base_channels < 8 || base_channels % 4 != 0 {
        return Err(Error::Config(format!(
            "base channels must be >= 8 and divisible by 4, got {}",
            base_channels
        )));
    }
    Ok(())
}

impl<T: Element> ModelGraph<T> {
    /// Zero-initialized architecture for a config and mode; weights come
    /// from [`ModelGraph::init_parameters`] or from a loaded container.
    pub fn architecture(config: ModelConfig, mode: ModelMode) -> Result<Self> {
        validate_width(config.base_channels)?;
        let branch_set = canonical_branch_set(&config.branch_set)?;
        let config = ModelConfig { branch_set, ..config };
        let c = config.base_channels;
        let merged = mode == ModelMode::Merged;

        let conv = |co: usize,
                    ci: usize,
                    k: (usize, usize),
                    stride,
                    padding,
                    groups: usize| ConvParams {
            weight: Tensor::zeros(&[co, ci / groups, k.0, k.1]),
            bias: merged.then(|| Tensor::zeros(&[co])),
            stride,
            padding,
            groups,
        };
        let unit = |co: usize, ci: usize, k: (usize, usize), stride, padding| ConvUnit {
            conv: conv(co, ci, k, stride, padding, 1),
            bn: (!merged).then(|| BnParams::identity(co)),
        };

        let stem = vec![
            unit(c / 4, 1, (3, 3), (2, 2), (1, 1)),
            unit(c, c / 4, (3, 3), (2, 2), (1, 1)),
        ];

        let mut blocks = Vec::new();
        for plan in stage_plan() {
            let cin = plan.in_mult * c;
            let cout = plan.out_mult * c;
            let hidden = EXPANSION * cin;
            let dw_branches = if merged {
                Vec::new()
            } else {
                config
                    .branch_set
                    .iter()
                    .map(|&shape| RepBranch {
                        shape,
                        conv: ConvParams {
                            weight: Tensor::zeros(&[hidden, 1, shape.kernel().0, shape.kernel().1]),
                            bias: None,
                            stride: plan.stride,
                            padding: shape.padding(),
                            groups: hidden,
                        },
                        bn: BnParams::identity(hidden),
                    })
                    .collect()
            };
            let dw_merged = merged.then(|| ConvParams {
                weight: Tensor::zeros(&[hidden, 1, 3, 3]),
                bias: Some(Tensor::zeros(&[hidden])),
                stride: plan.stride,
                padding: (1, 1),
                groups: hidden,
            });
            blocks.push(RepBlock {
                in_channels: cin,
                hidden_channels: hidden,
                out_channels: cout,
                stride: plan.stride,
                residual: plan.stride == (1, 1) && cin == cout,
                expand: unit(hidden, cin, (1, 1), (1, 1), (0, 0)),
                dw_branches,
                dw_merged,
                project: unit(cout, hidden, (1, 1), (1, 1), (0, 0)),
            });
        }

        let head = unit(config.num_classes, 2 * c, (1, 1), (1, 1), (0, 0));
        Ok(ModelGraph {
            config,
            mode,
            mid_training: false,
            stem,
            blocks,
            head,
        })
    }

    /// Kaiming-uniform (fan-in) conv weights, identity BN, zero biases.
    /// Streams are keyed by tensor name, so two models built from the same
    /// seed share identical values on every tensor they have in common.
    pub fn init_parameters(&mut self) {
        let seed = self.config.seed;
        self.for_each_tensor_mut(&mut |name, tensor| {
            if name.ends_with(".weight") {
                let s = tensor.shape();
                let fan_in = s[1] * s[2] * s[3];
                let bound = (6.0 / fan_in as f64).sqrt();
                let mut rng = stream_rng(seed, &[label_key(name)]);
                for v in tensor.data_mut() {
                    use rand::Rng;
                    *v = T::from_f64_((rng.random::<f64>() * 2.0 - 1.0) * bound);
                }
            }
            // biases stay zero; BN fields already hold identity values
        });
    }

    pub fn base_channels(&self) -> usize {
        self.config.base_channels
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Width of the head input (the last stage), `2 * base_channels`.
    pub fn head_in_channels(&self) -> usize {
        self.head.conv.weight.shape()[1]
    }

    /// Visit every tensor (including running statistics) in canonical order.
    pub fn for_each_tensor(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        let conv = |prefix: &str, c: &ConvParams<T>, f: &mut dyn FnMut(&str, &Tensor<T>)| {
            f(&format!("{}.weight", prefix), &c.weight);
            if let Some(b) = &c.bias {
                f(&format!("{}.bias", prefix), b);
            }
        };
        let bn = |prefix: &str, b: &BnParams<T>, f: &mut dyn FnMut(&str, &Tensor<T>)| {
            f(&format!("{}.gamma", prefix), &b.gamma);
            f(&format!("{}.beta", prefix), &b.beta);
            f(&format!("{}.running_mean", prefix), &b.running_mean);
            f(&format!("{}.running_var", prefix), &b.running_var);
        };
        let unit = |prefix: &str, u: &ConvUnit<T>, f: &mut dyn FnMut(&str, &Tensor<T>)| {
            conv(&format!("{}.conv", prefix), &u.conv, f);
            if let Some(b) = &u.bn {
                bn(&format!("{}.bn", prefix), b, f);
            }
        };
        for (i, s) in self.stem.iter().enumerate() {
            unit(&format!("stem.{}", i), s, f);
        }
        for (i, blk) in self.blocks.iter().enumerate() {
            unit(&format!("blocks.{}.expand", i), &blk.expand, f);
            for br in &blk.dw_branches {
                let p = format!("blocks.{}.dw.{}", i, br.shape.label());
                conv(&format!("{}.conv", p), &br.conv, f);
                bn(&format!("{}.bn", p), &br.bn, f);
            }
            if let Some(m) = &blk.dw_merged {
                conv(&format!("blocks.{}.dw.conv", i), m, f);
            }
            unit(&format!("blocks.{}.project", i), &blk.project, f);
        }
        unit("head", &self.head, f);
    }

    /// Mutable variant of [`ModelGraph::for_each_tensor`], same order.
    pub fn for_each_tensor_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        let conv =
            |prefix: &str, c: &mut ConvParams<T>, f: &mut dyn FnMut(&str, &mut Tensor<T>)| {
                f(&format!("{}.weight", prefix), &mut c.weight);
                if let Some(b) = &mut c.bias {
                    f(&format!("{}.bias", prefix), b);
                }
            };
        let bn = |prefix: &str, b: &mut BnParams<T>, f: &mut dyn FnMut(&str, &mut Tensor<T>)| {
            f(&format!("{}.gamma", prefix), &mut b.gamma);
            f(&format!("{}.beta", prefix), &mut b.beta);
            f(&format!("{}.running_mean", prefix), &mut b.running_mean);
            f(&format!("{}.running_var", prefix), &mut b.running_var);
        };
        let unit = |prefix: &str, u: &mut ConvUnit<T>, f: &mut dyn FnMut(&str, &mut Tensor<T>)| {
            conv(&format!("{}.conv", prefix), &mut u.conv, f);
            if let Some(b) = &mut u.bn {
                bn(&format!("{}.bn", prefix), b, f);
            }
        };
        for (i, s) in self.stem.iter_mut().enumerate() {
            unit(&format!("stem.{}", i), s, f);
        }
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            unit(&format!("blocks.{}.expand", i), &mut blk.expand, f);
            for br in &mut blk.dw_branches {
                let p = format!("blocks.{}.dw.{}", i, br.shape.label());
                conv(&format!("{}.conv", p), &mut br.conv, f);
                bn(&format!("{}.bn", p), &mut br.bn, f);
            }
            if let Some(m) = &mut blk.dw_merged {
                conv(&format!("blocks.{}.dw.conv", i), m, f);
            }
            unit(&format!("blocks.{}.project", i), &mut blk.project, f);
        }
        unit("head", &mut self.head, f);
    }

    /// Whether a tensor name denotes a trainable parameter (running
    /// statistics are not).
    pub fn is_trainable(name: &str) -> bool {
        !name.ends_with(".running_mean") && !name.ends_with(".running_var")
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::Dimension(format!(
                "model input must be [N,1,F,T], got {:?}",
                s
            )));
        }
        if s[2] < 16 || s[3] < 16 {
            return Err(Error::Dimension(format!(
                "input spatial dims must be at least 16x16, got {}x{}",
                s[2], s[3]
            )));
        }
        Ok(())
    }

    fn unit_eval(u: &ConvUnit<T>, x: &Tensor<T>, apply_relu: bool) -> Result<Tensor<T>> {
        let mut y = kernels::conv2d(x, &u.conv.weight, u.conv.bias.as_ref(), &u.conv.spec())?;
        if let Some(bn) = &u.bn {
            y = kernels::bn_eval_forward(
                &y,
                &bn.gamma,
                &bn.beta,
                &bn.running_mean,
                &bn.running_var,
                bn.eps,
            )?
            .0;
        }
        Ok(if apply_relu { kernels::relu(&y) } else { y })
    }

    pub(crate) fn block_eval(blk: &RepBlock<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = Self::unit_eval(&blk.expand, x, true)?;
        let dw = if let Some(m) = &blk.dw_merged {
            kernels::conv2d(&h, &m.weight, m.bias.as_ref(), &m.spec())?
        } else {
            let mut acc: Option<Tensor<T>> = None;
            for br in &blk.dw_branches {
                let y = kernels::conv2d(&h, &br.conv.weight, None, &br.conv.spec())?;
                let y = kernels::bn_eval_forward(
                    &y,
                    &br.bn.gamma,
                    &br.bn.beta,
                    &br.bn.running_mean,
                    &br.bn.running_var,
                    br.bn.eps,
                )?
                .0;
                acc = Some(match acc {
                    None => y,
                    Some(a) => kernels::add(&a, &y)?,
                });
            }
            acc.ok_or_else(|| Error::Config("block has no depthwise branches".into()))?
        };
        let dw = kernels::relu(&dw);
        let p = Self::unit_eval(&blk.project, &dw, false)?;
        if blk.residual {
            kernels::add(&p, x)
        } else {
            Ok(p)
        }
    }

    /// Deterministic eval-mode forward: running BN statistics in train form,
    /// plain biased convolutions in merged form. Pure in `self`.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut y = x.clone();
        for s in &self.stem {
            y = Self::unit_eval(s, &y, true)?;
        }
        for blk in &self.blocks {
            y = Self::block_eval(blk, &y)?;
        }
        let y = Self::unit_eval(&self.head, &y, false)?;
        kernels::global_avg_pool(&y)
    }

    fn unit_train(
        g: &mut Graph<T>,
        u: &mut ConvUnit<T>,
        prefix: &str,
        x: NodeId,
        apply_relu: bool,
        binding: &mut Vec<(String, NodeId)>,
    ) -> Result<NodeId> {
        let w = g.leaf(u.conv.weight.clone(), true);
        binding.push((format!("{}.conv.weight", prefix), w));
        let b = u.conv.bias.as_ref().map(|b| {
            let id = g.leaf(b.clone(), true);
            binding.push((format!("{}.conv.bias", prefix), id));
            id
        });
        let mut y = g.conv2d(x, w, b, u.conv.spec())?;
        if let Some(bn) = &mut u.bn {
            let gamma = g.leaf(bn.gamma.clone(), true);
            let beta = g.leaf(bn.beta.clone(), true);
            binding.push((format!("{}.bn.gamma", prefix), gamma));
            binding.push((format!("{}.bn.beta", prefix), beta));
            let (node, mean, var) = g.batchnorm_train(y, gamma, beta, bn.eps)?;
            bn.update_running(&mean, &var);
            y = node;
        }
        Ok(if apply_relu { g.relu(y) } else { y })
    }

    /// Train-mode forward on an autodiff graph: batch BN statistics, running
    /// stats updated with momentum. Returns the logits node and the
    /// name-to-leaf binding for the optimizer.
    pub fn forward_train(
        &mut self,
        g: &mut Graph<T>,
        x: Tensor<T>,
    ) -> Result<(NodeId, Vec<(String, NodeId)>)> {
        if self.mode != ModelMode::Train {
            return Err(Error::Config(
                "train-mode forward requires a train-form model".into(),
            ));
        }
        self.check_input(&x)?;
        self.mid_training = true;
        let mut binding = Vec::new();
        let mut y = g.leaf(x, false);
        for (i, s) in self.stem.iter_mut().enumerate() {
            y = Self::unit_train(g, s, &format!("stem.{}", i), y, true, &mut binding)?;
        }
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            let input = y;
            let h = Self::unit_train(
                g,
                &mut blk.expand,
                &format!("blocks.{}.expand", i),
                input,
                true,
                &mut binding,
            )?;
            let mut acc: Option<NodeId> = None;
            for br in &mut blk.dw_branches {
                let p = format!("blocks.{}.dw.{}", i, br.shape.label());
                let w = g.leaf(br.conv.weight.clone(), true);
                binding.push((format!("{}.conv.weight", p), w));
                let c = g.conv2d(h, w, None, br.conv.spec())?;
                let gamma = g.leaf(br.bn.gamma.clone(), true);
                let beta = g.leaf(br.bn.beta.clone(), true);
                binding.push((format!("{}.bn.gamma", p), gamma));
                binding.push((format!("{}.bn.beta", p), beta));
                let (node, mean, var) = g.batchnorm_train(c, gamma, beta, br.bn.eps)?;
                br.bn.update_running(&mean, &var);
                acc = Some(match acc {
                    None => node,
                    Some(a) => g.add(a, node)?,
                });
            }
            let dw = g.relu(acc.ok_or_else(|| Error::Config("block has no branches".into()))?);
            let p = Self::unit_train(
                g,
                &mut blk.project,
                &format!("blocks.{}.project", i),
                dw,
                false,
                &mut binding,
            )?;
            y = if blk.residual { g.add(p, input)? } else { p };
        }
        let y = Self::unit_train(g, &mut self.head, "head", y, false, &mut binding)?;
        let logits = g.global_avg_pool(y)?;
        Ok((logits, binding))
    }

    /// One-off train-mode forward that returns the logits tensor (updates
    /// running statistics as a side effect, like any train-mode pass).
    pub fn forward_train_collect(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let (logits, _) = self.forward_train(&mut g, x.clone())?;
        Ok(g.value(logits).clone())
    }

    /// Mark the end of a training phase: running statistics are final.
    pub fn finalize_training(&mut self) {
        self.mid_training = false;
    }

    /// Copy gradients out of a finished backward pass and step the
    /// optimizer against this model's parameters, in canonical order.
    pub fn apply_gradients(
        &mut self,
        g: &Graph<T>,
        binding: &[(String, NodeId)],
        adam: &mut crate::tensor::Adam<T>,
        lr: f64,
    ) {
        use std::collections::HashMap;
        let grads: HashMap<&str, &Tensor<T>> = binding
            .iter()
            .filter_map(|(name, id)| g.grad(*id).map(|t| (name.as_str(), t)))
            .collect();
        adam.begin_step();
        self.for_each_tensor_mut(&mut |name, tensor| {
            if let Some(grad) = grads.get(name) {
                adam.update(name, tensor, grad, lr);
            }
        });
    }

    /// Remove one branch shape from every block.
    pub fn ablate_branch(&self, shape: BranchShape) -> Result<ModelGraph<T>> {
        if self.mode != ModelMode::Train {
            return Err(Error::Config(
                "branch ablation applies to train-form models".into(),
            ));
        }
        if shape == BranchShape::K3x3 {
            return Err(Error::Config(
                "the 3x3 main branch is mandatory and cannot be removed".into(),
            ));
        }
        if !self.config.branch_set.contains(&shape) {
            return Err(Error::Config(format!(
                "branch {} is not present in this model",
                shape.label()
            )));
        }
        let mut out = self.clone();
        out.config.branch_set.retain(|b| *b != shape);
        for blk in &mut out.blocks {
            blk.dw_branches.retain(|br| br.shape != shape);
        }
        Ok(out)
    }
}

/// Build a freshly initialized train-form model.
pub fn build_model<T: Element>(
    base_channels: usize,
    branch_set: &[BranchShape],
    seed: u64,
) -> Result<ModelGraph<T>> {
    let config = ModelConfig {
        base_channels,
        branch_set: branch_set.to_vec(),
        num_classes: 10,
        seed,
    };
    let mut model = ModelGraph::architecture(config, ModelMode::Train)?;
    model.init_parameters();
    Ok(model)
}
