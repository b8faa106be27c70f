//! Reverse-mode autodiff over a flat tape.
//!
//! Nodes are appended in construction order, which is already a topological
//! order, so the backward pass is a single reverse sweep that visits each
//! node exactly once.

use super::kernels::{self, ConvSpec};
use super::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op<T: Element> {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        spec: ConvSpec,
    },
    BatchNormTrain {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Tensor<T>,
        inv_std: Tensor<T>,
    },
    BatchNormEval {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Tensor<T>,
        inv_std: Tensor<T>,
    },
    Relu {
        input: NodeId,
    },
    Add {
        lhs: NodeId,
        rhs: NodeId,
    },
    Scale {
        input: NodeId,
        factor: T,
    },
    GlobalAvgPool {
        input: NodeId,
    },
    SoftmaxT {
        input: NodeId,
        tau: f64,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
    /// KL(q || p); gradient flows to the model distribution `p` only.
    KlDiv {
        p: NodeId,
        q: NodeId,
    },
}

struct Node<T: Element> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Computation tape. Parameter tensors enter as leaves with
/// `requires_grad = true`; inputs and constants as plain leaves.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of a node (usually a parameter leaf).
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        spec: ConvSpec,
    ) -> Result<NodeId> {
        let out = kernels::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &spec,
        )?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            },
        ))
    }

    /// Batch-statistics normalization; returns the node plus the batch mean
    /// and variance so the caller can update running statistics.
    pub fn batchnorm_train(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, Tensor<T>, Tensor<T>)> {
        let (y, mean, inv_std) = kernels::bn_train_forward(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            eps,
        )?;
        // biased batch variance recovered from inv_std
        let eps_t = T::from_f64_(eps);
        let var = inv_std.map(|s| (s * s).recip() - eps_t);
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let id = self.push(
            y,
            rg,
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                mean: mean.clone(),
                inv_std,
            },
        );
        Ok((id, mean, var))
    }

    pub fn batchnorm_eval(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: f64,
    ) -> Result<NodeId> {
        let (y, inv_std) = kernels::bn_eval_forward(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            eps,
        )?;
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            y,
            rg,
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                mean: running_mean.clone(),
                inv_std,
            },
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let y = kernels::relu(self.value(input));
        let rg = self.rg(input);
        self.push(y, rg, Op::Relu { input })
    }

    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let y = kernels::add(self.value(lhs), self.value(rhs))?;
        let rg = self.rg(lhs) || self.rg(rhs);
        Ok(self.push(y, rg, Op::Add { lhs, rhs }))
    }

    pub fn scale(&mut self, input: NodeId, factor: T) -> NodeId {
        let y = kernels::scale(self.value(input), factor);
        let rg = self.rg(input);
        self.push(y, rg, Op::Scale { input, factor })
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let y = kernels::global_avg_pool(self.value(input))?;
        let rg = self.rg(input);
        Ok(self.push(y, rg, Op::GlobalAvgPool { input }))
    }

    pub fn softmax_t(&mut self, input: NodeId, tau: f64) -> Result<NodeId> {
        let y = kernels::softmax_t(self.value(input), tau)?;
        let rg = self.rg(input);
        Ok(self.push(y, rg, Op::SoftmaxT { input, tau }))
    }

    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (loss, probs) = kernels::cross_entropy(self.value(logits), labels)?;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn kl_divergence(&mut self, p: NodeId, q: NodeId) -> Result<NodeId> {
        let loss = kernels::kl_divergence(self.value(p), self.value(q))?;
        let rg = self.rg(p);
        Ok(self.push(Tensor::scalar(loss), rg, Op::KlDiv { p, q }))
    }

    fn accumulate(&mut self, id: NodeId, grad: Tensor<T>) {
        debug_assert_eq!(self.nodes[id.0].value.shape(), grad.shape());
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.nodes[id.0].grad {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(grad.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(grad),
        }
    }

    /// Reverse sweep from a scalar root. Leaf gradients stay retrievable via
    /// [`Graph::grad`]; interior gradients are dropped as soon as propagated.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Dimension(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Err(Error::Config("backward root does not depend on any parameter".into()));
        }
        self.nodes[root.0].grad = Some(Tensor::scalar(T::one()));

        for i in (0..=root.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            if is_leaf {
                continue;
            }
            let gout = self.nodes[i].grad.take().unwrap();
            match &self.nodes[i].op {
                Op::Leaf => unreachable!(),
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    spec,
                } => {
                    let (input, weight, bias, spec) = (*input, *weight, *bias, *spec);
                    let need_dx = self.rg(input);
                    let need_db = bias.is_some_and(|b| self.rg(b));
                    let (dx, dw, db) = kernels::conv2d_backward(
                        self.value(input),
                        self.value(weight),
                        &spec,
                        &gout,
                        need_dx,
                        need_db,
                    )?;
                    if let Some(dx) = dx {
                        self.accumulate(input, dx);
                    }
                    self.accumulate(weight, dw);
                    if let (Some(b), Some(db)) = (bias, db) {
                        self.accumulate(b, db);
                    }
                }
                Op::BatchNormTrain {
                    input,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                } => {
                    let (input, gamma, beta) = (*input, *gamma, *beta);
                    let (mean, inv_std) = (mean.clone(), inv_std.clone());
                    let (dx, dgamma, dbeta) = kernels::bn_train_backward(
                        self.value(input),
                        self.value(gamma),
                        &mean,
                        &inv_std,
                        &gout,
                    );
                    self.accumulate(input, dx);
                    self.accumulate(gamma, dgamma);
                    self.accumulate(beta, dbeta);
                }
                Op::BatchNormEval {
                    input,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                } => {
                    let (input, gamma, beta) = (*input, *gamma, *beta);
                    let (mean, inv_std) = (mean.clone(), inv_std.clone());
                    let (dx, dgamma, dbeta) = kernels::bn_eval_backward(
                        self.value(input),
                        self.value(gamma),
                        &mean,
                        &inv_std,
                        &gout,
                    );
                    self.accumulate(input, dx);
                    self.accumulate(gamma, dgamma);
                    self.accumulate(beta, dbeta);
                }
                Op::Relu { input } => {
                    let input = *input;
                    let dx = kernels::relu_backward(self.value(input), &gout);
                    self.accumulate(input, dx);
                }
                Op::Add { lhs, rhs } => {
                    let (lhs, rhs) = (*lhs, *rhs);
                    self.accumulate(lhs, gout.clone());
                    self.accumulate(rhs, gout);
                }
                Op::Scale { input, factor } => {
                    let (input, factor) = (*input, *factor);
                    self.accumulate(input, kernels::scale(&gout, factor));
                }
                Op::GlobalAvgPool { input } => {
                    let input = *input;
                    let shape = self.value(input).shape().to_vec();
                    let dx = kernels::global_avg_pool_backward(&shape, &gout);
                    self.accumulate(input, dx);
                }
                Op::SoftmaxT { input, tau } => {
                    let (input, tau) = (*input, *tau);
                    let dx = kernels::softmax_t_backward(&self.nodes[i].value, tau, &gout);
                    self.accumulate(input, dx);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let logits = *logits;
                    let dx = kernels::cross_entropy_backward(probs, labels, gout.item());
                    self.accumulate(logits, dx);
                }
                Op::KlDiv { p, q } => {
                    let (p, q) = (*p, *q);
                    let dp =
                        kernels::kl_divergence_backward(self.value(p), self.value(q), gout.item());
                    self.accumulate(p, dp);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = crate::rng::stream_rng(seed, &[0xadd]);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central finite differences of `f` w.r.t. one leaf against the analytic
    /// gradient. `build` constructs the scalar loss from fresh leaf values.
    pub(crate) fn fd_check(
        shapes: &[Vec<usize>],
        seed: u64,
        build: impl Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
    ) -> f64 {
        let h = 1e-5;
        let inputs: Vec<Tensor<f64>> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| rand_tensor(s, seed * 1000 + i as u64))
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

        let mut worst: f64 = 0.0;
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
                let denom = an.abs().max(fd.abs());
                if denom < 1e-7 {
                    continue; // both effectively zero at fd resolution
                }
                worst = worst.max((an - fd).abs() / denom.max(1e-3));
            }
        }
        worst
    }

    #[test]
    fn scale_gradient_is_factor() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = g.scale(x, 2.5);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 2.5);
    }

    #[test]
    fn conv_gradient_matches_fd() {
        let spec = ConvSpec::new((1, 1), (1, 1), 1);
        let err = fd_check(&[vec![1, 2, 6, 6], vec![3, 2, 3, 3], vec![3]], 1, |g, ids| {
            let y = g.conv2d(ids[0], ids[1], Some(ids[2]), spec).unwrap();
            let p = g.global_avg_pool(y).unwrap();
            g.cross_entropy(p, &[0]).unwrap()
        });
        assert!(err <= 1e-3, "relative error {}", err);
    }

    #[test]
    fn bn_train_gradient_matches_fd() {
        let err = fd_check(&[vec![2, 3, 4, 4], vec![3], vec![3]], 2, |g, ids| {
            let shifted = ids[1];
            let (y, _, _) = g.batchnorm_train(ids[0], shifted, ids[2], 1e-5).unwrap();
            let r = g.relu(y);
            let p = g.global_avg_pool(r).unwrap();
            g.cross_entropy(p, &[1, 2]).unwrap()
        });
        assert!(err <= 1e-3, "relative error {}", err);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::<f64>::zeros(&[2, 2]), true);
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(Error::Dimension(_))));
    }
}
