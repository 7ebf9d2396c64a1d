//! Dynamic reverse-mode tape.
//!
//! Nodes are appended in execution order, so a node's inputs always have
//! smaller ids and a single reverse sweep visits each node once after all of
//! its consumers. Adjoints from multiple consumers are summed.

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, norm, ops, pool, BatchNormSaved, RunningStats};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(0);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    tape: u64,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }
}

/// User-supplied gradient rule for [`Tape::record`].
pub trait BackwardRule: Send {
    fn name(&self) -> &str;

    /// Adjoint of every input, in input order.
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], output: &Tensor) -> Result<Vec<Tensor>>;
}

pub enum Op {
    Leaf,
    Param,
    Conv2d { stride: usize, pad: usize },
    BatchNorm { saved: BatchNormSaved },
    Relu,
    Add,
    Concat { channels: Vec<usize> },
    MaxPool2 { argmax: Vec<usize> },
    AvgPool2,
    GlobalAvgPool,
    Linear,
    /// `mask` already carries the inverted-dropout scale.
    Dropout { mask: Vec<f64> },
    SoftmaxCrossEntropy { labels: Vec<usize>, probs: Tensor },
    Sum,
    Dot { weights: Tensor },
    Custom(Box<dyn BackwardRule>),
}

impl Op {
    pub fn kind(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::Relu => "relu",
            Op::Add => "add",
            Op::Concat { .. } => "concat_channels",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::AvgPool2 => "avg_pool2",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Linear => "linear",
            Op::Dropout { .. } => "dropout",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Sum => "sum",
            Op::Dot { .. } => "dot",
            Op::Custom(rule) => rule.name(),
        }
    }
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kind())
    }
}

#[derive(Debug)]
pub struct Node {
    pub id: usize,
    pub op: Op,
    pub inputs: Vec<usize>,
    pub value: Tensor,
    pub requires_grad: bool,
}

/// Batch-norm evaluation mode for [`Tape::batchnorm2d`].
pub enum BatchNormMode<'a> {
    Train,
    Eval(&'a RunningStats),
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    params: Vec<usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), params: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Active branch of every piecewise-linear op on the tape: the sign
    /// pattern of each ReLU input and the selected element of each max-pool
    /// window. Two evaluations with equal patterns lie on the same smooth piece.
    pub fn branch_pattern(&self) -> Vec<u64> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu => {
                    let input = &self.nodes[node.inputs[0]].value;
                    for chunk in input.data().chunks(64) {
                        let bits = chunk.iter().enumerate().fold(0u64, |acc, (i, &v)| acc | (u64::from(v > 0.0) << i));
                        out.push(bits);
                    }
                }
                Op::MaxPool2 { argmax } => out.extend(argmax.iter().map(|&i| i as u64)),
                _ => {}
            }
        }
        out
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn param_ids(&self) -> &[usize] {
        &self.params
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape == self.id && v.id < self.nodes.len() {
            Ok(v.id)
        } else {
            Err(Error::ForeignNode(v.id))
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from a different tape");
        &self.nodes[v.id].value
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Tensor) -> Var {
        let requires_grad = match op {
            Op::Leaf | Op::Param => true,
            _ => inputs.iter().any(|&i| self.nodes[i].requires_grad),
        };
        let id = self.nodes.len();
        self.nodes.push(Node { id, op, inputs, value, requires_grad });
        Var { id, tape: self.id }
    }

    /// A differentiable leaf whose gradient is reported by [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, vec![], value)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { id, op: Op::Leaf, inputs: vec![], value, requires_grad: false });
        Var { id, tape: self.id }
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(Op::Param, vec![], value);
        self.params.push(v.id);
        v
    }

    /// Append a node computed outside the tape with a caller-provided gradient rule.
    pub fn record(&mut self, inputs: &[Var], value: Tensor, rule: Box<dyn BackwardRule>) -> Result<Var> {
        let ids = inputs.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        Ok(self.push(Op::Custom(rule), ids, value))
    }

    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let mut ids = vec![self.check(x)?, self.check(weight)?];
        if let Some(b) = bias {
            ids.push(self.check(b)?);
        }
        let value = kernels::conv2d(
            &self.nodes[ids[0]].value,
            &self.nodes[ids[1]].value,
            ids.get(2).map(|&b| &self.nodes[b].value),
            stride,
            pad,
        )?;
        Ok(self.push(Op::Conv2d { stride, pad }, ids, value))
    }

    /// Returns the output and, in training mode, the batch statistics so the
    /// caller can decide whether to fold them into its running averages.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mode: BatchNormMode<'_>,
    ) -> Result<(Var, Option<norm::BatchStats>)> {
        let ids = vec![self.check(x)?, self.check(gamma)?, self.check(beta)?];
        let (input, g, b) = (&self.nodes[ids[0]].value, &self.nodes[ids[1]].value, &self.nodes[ids[2]].value);
        let (value, saved, stats) = match mode {
            BatchNormMode::Train => {
                let (v, s, st) = norm::batchnorm2d_train(input, g, b, eps)?;
                (v, s, Some(st))
            }
            BatchNormMode::Eval(running) => {
                let (v, s) = norm::batchnorm2d_eval(input, g, b, running, eps)?;
                (v, s, None)
            }
        };
        Ok((self.push(Op::BatchNorm { saved }, ids, value), stats))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let id = self.check(x)?;
        let value = ops::relu(&self.nodes[id].value);
        Ok(self.push(Op::Relu, vec![id], value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = ops::add(&self.nodes[ia].value, &self.nodes[ib].value)?;
        Ok(self.push(Op::Add, vec![ia, ib], value))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let ids = parts.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        let tensors: Vec<&Tensor> = ids.iter().map(|&i| &self.nodes[i].value).collect();
        let (value, _) = ops::concat_channels(&tensors)?;
        let channels = tensors.iter().map(|t| t.dims()[1]).collect();
        Ok(self.push(Op::Concat { channels }, ids, value))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let id = self.check(x)?;
        let (value, argmax) = pool::max_pool2(&self.nodes[id].value)?;
        Ok(self.push(Op::MaxPool2 { argmax }, vec![id], value))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let id = self.check(x)?;
        let value = pool::avg_pool2(&self.nodes[id].value)?;
        Ok(self.push(Op::AvgPool2, vec![id], value))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let id = self.check(x)?;
        let value = pool::global_avg_pool(&self.nodes[id].value)?;
        Ok(self.push(Op::GlobalAvgPool, vec![id], value))
    }

    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let ids = vec![self.check(x)?, self.check(weight)?, self.check(bias)?];
        let value = ops::linear(&self.nodes[ids[0]].value, &self.nodes[ids[1]].value, Some(&self.nodes[ids[2]].value))?;
        Ok(self.push(Op::Linear, ids, value))
    }

    /// Inverted dropout: kept units are scaled by `1 / (1 - p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        let id = self.check(x)?;
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.nodes[id].value.numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mut value = self.nodes[id].value.clone();
        value.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
        Ok(self.push(Op::Dropout { mask }, vec![id], value))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let id = self.check(logits)?;
        let (loss, probs) = ops::softmax_cross_entropy(&self.nodes[id].value, labels)?;
        Ok(self.push(
            Op::SoftmaxCrossEntropy { labels: labels.to_vec(), probs },
            vec![id],
            Tensor::scalar(loss),
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let id = self.check(x)?;
        let value = Tensor::scalar(self.nodes[id].value.sum());
        Ok(self.push(Op::Sum, vec![id], value))
    }

    /// `sum(x * weights)` for a constant `weights` of the same shape.
    pub fn dot(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        let id = self.check(x)?;
        let xv = &self.nodes[id].value;
        xv.expect_same_shape(&weights, "dot")?;
        let value = Tensor::scalar(xv.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum());
        Ok(self.push(Op::Dot { weights }, vec![id], value))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.check(loss)?;
        if self.nodes[root].value.numel() != 1 {
            return Err(Error::NotScalar(self.nodes[root].value.shape().clone()));
        }
        let mut adj: Vec<Option<Tensor>> = (0..=root).map(|_| None).collect();
        adj[root] = Some(Tensor::full(self.nodes[root].value.dims().to_vec(), 1.0)?);
        let mut leaves = HashMap::new();

        for id in (0..=root).rev() {
            let Some(grad) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf | Op::Param) {
                leaves.insert(id, grad);
                continue;
            }
            let input_grads = self.node_backward(node, &grad)?;
            for (&input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input].requires_grad {
                    continue;
                }
                match &mut adj[input] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        for &p in &self.params {
            if p <= root {
                leaves.entry(p).or_insert_with(|| Tensor::zeros_like(&self.nodes[p].value));
            }
        }
        Ok(Gradients { tape: self.id, grads: leaves })
    }

    fn node_backward(&self, node: &Node, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let input = |i: usize| &self.nodes[node.inputs[i]].value;
        let out = match &node.op {
            Op::Leaf | Op::Param => vec![],
            Op::Conv2d { stride, pad } => {
                let g = kernels::conv2d_backward(grad, input(0), input(1), *stride, *pad)?;
                let mut v = vec![Some(g.input), Some(g.weight)];
                if node.inputs.len() == 3 {
                    v.push(Some(g.bias));
                }
                v
            }
            Op::BatchNorm { saved } => {
                let g = norm::batchnorm2d_backward(grad, saved, input(1))?;
                vec![Some(g.input), Some(g.gamma), Some(g.beta)]
            }
            Op::Relu => vec![Some(ops::relu_backward(grad, input(0))?)],
            Op::Add => vec![Some(grad.clone()), Some(grad.clone())],
            Op::Concat { channels } => ops::split_channels(grad, channels)?.into_iter().map(Some).collect(),
            Op::MaxPool2 { argmax } => vec![Some(pool::max_pool2_backward(grad, argmax, input(0).dims())?)],
            Op::AvgPool2 => vec![Some(pool::avg_pool2_backward(grad, input(0).dims())?)],
            Op::GlobalAvgPool => vec![Some(pool::global_avg_pool_backward(grad, input(0).dims())?)],
            Op::Linear => {
                let (gi, gw, gb) = ops::linear_backward(grad, input(0), input(1))?;
                vec![Some(gi), Some(gw), Some(gb)]
            }
            Op::Dropout { mask } => {
                let mut g = grad.clone();
                g.data_mut().iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
                vec![Some(g)]
            }
            Op::SoftmaxCrossEntropy { labels, probs } => {
                vec![Some(ops::softmax_cross_entropy_backward(probs, labels, grad.item()?))]
            }
            Op::Sum => vec![Some(Tensor::full(input(0).dims().to_vec(), grad.item()?)?)],
            Op::Dot { weights } => {
                let mut g = weights.clone();
                g.scale(grad.item()?);
                vec![Some(g)]
            }
            Op::Custom(rule) => {
                let inputs: Vec<&Tensor> = (0..node.inputs.len()).map(input).collect();
                let grads = rule.backward(grad, &inputs, &node.value)?;
                if grads.len() != inputs.len() {
                    return Err(Error::InvalidShape(format!(
                        "{}: backward returned {} gradients for {} inputs",
                        rule.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                for (g, x) in grads.iter().zip(&inputs) {
                    g.expect_same_shape(x, "custom backward")?;
                }
                grads.into_iter().map(Some).collect()
            }
        };
        Ok(out)
    }
}

/// Gradients of leaves and parameters, keyed by node id.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(&v.id)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.remove(&v.id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
