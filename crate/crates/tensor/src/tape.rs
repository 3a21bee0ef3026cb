//! Append-only Wengert tape.
//!
//! Every op appends a node holding its output value and the input ids it
//! read. Inputs always precede the node, so reverse append order is a valid
//! topological order for the backward pass.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use ndarray::{ArrayD, Axis, IxDyn, Slice};

use crate::error::{invalid, shape_err, Result, TensorError};
use crate::kernels::{self, sum_to_shape};
use crate::tensor::Tensor;

/// Operation kind recorded on a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    MatMul,
    Conv2d,
    Reshape,
    Permute,
    Narrow,
    Concat,
    Sum,
    Relu,
    Sigmoid,
    Abs,
    Softmax,
    AdaptivePool,
    LayerNorm,
    BatchNorm,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Conv2d {
        input: usize,
        kernel: usize,
        stride: (usize, usize),
        padding: (usize, usize),
    },
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Narrow {
        input: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    /// `axis == None` sums everything to a scalar.
    Sum {
        input: usize,
        axis: Option<usize>,
        keepdim: bool,
    },
    Relu(usize),
    Sigmoid(usize),
    Abs(usize),
    Softmax(usize, usize),
    AdaptivePool(usize),
    LayerNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        normalized: Tensor,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        normalized: Tensor,
        inv_std: Vec<f64>,
        train: bool,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Permute(..) => OpKind::Permute,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Concat { .. } => OpKind::Concat,
            Op::Sum { .. } => OpKind::Sum,
            Op::Relu(..) => OpKind::Relu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Abs(..) => OpKind::Abs,
            Op::Softmax(..) => OpKind::Softmax,
            Op::AdaptivePool(..) => OpKind::AdaptivePool,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Multiplies every input gradient produced by nodes of `op` by `scale`.
///
/// Exists so verification tooling can prove it notices a broken backward.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackwardFault {
    pub op: OpKind,
    pub scale: f64,
}

/// Recording of a forward computation. Confined to one thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    fault: Cell<Option<BackwardFault>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients of a scalar loss, indexed by tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Input the loss is not differentiated against.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn set_backward_fault(&self, fault: Option<BackwardFault>) {
        self.fault.set(fault);
    }

    fn push_raw(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var<'_>> {
        let kind = op.kind();
        let value = value.ensure_finite(op_name(kind))?;
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, vars: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let Some(first) = vars.first() else {
            return Err(invalid("concat", "no inputs"));
        };
        let values: Vec<Rc<Tensor>> = vars.iter().map(|v| v.value()).collect();
        let rank = first.shape().len();
        if axis >= rank {
            return Err(invalid("concat", format!("axis {axis} out of range")));
        }
        for v in &values[1..] {
            let (a, b) = (values[0].shape(), v.shape());
            if a.len() != b.len()
                || a.iter()
                    .zip(b)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(shape_err("concat", format!("{a:?} vs {b:?} on axis {axis}")));
            }
        }
        let views: Vec<_> = values.iter().map(|v| v.array().view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views)
            .map_err(|e| shape_err("concat", e.to_string()))?;
        let ids: Vec<usize> = vars.iter().map(|v| v.id).collect();
        self.push(
            Tensor::from_array(out),
            Op::Concat {
                inputs: ids.clone(),
                axis,
            },
            &ids,
        )
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Visits every node at most once, in reverse append order, so repeated
    /// calls on the same tape yield bit-identical gradients.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(TensorError::DetachedLoss);
        }
        let fault = self.fault.get();
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut contributions = input_grads(&nodes, node, &g);
            if let Some(f) = fault.filter(|f| f.op == node.op.kind()) {
                for (_, t) in contributions.iter_mut() {
                    *t = t.map(|v| v * f.scale);
                }
            }
            for (input, gi) in contributions {
                if !nodes[input].requires_grad {
                    continue;
                }
                grads[input] = Some(match grads[input].take() {
                    None => gi,
                    Some(acc) => Tensor::from_array(acc.into_array() + gi.array()),
                });
            }
            // Leaves keep their gradient for the caller.
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

fn op_name(kind: OpKind) -> &'static str {
    match kind {
        OpKind::Leaf => "leaf",
        OpKind::Add => "add",
        OpKind::Sub => "sub",
        OpKind::Mul => "mul",
        OpKind::Scale => "scale",
        OpKind::AddScalar => "add_scalar",
        OpKind::MatMul => "matmul",
        OpKind::Conv2d => "conv2d",
        OpKind::Reshape => "reshape",
        OpKind::Permute => "permute",
        OpKind::Narrow => "narrow",
        OpKind::Concat => "concat",
        OpKind::Sum => "sum",
        OpKind::Relu => "relu",
        OpKind::Sigmoid => "sigmoid",
        OpKind::Abs => "abs",
        OpKind::Softmax => "softmax",
        OpKind::AdaptivePool => "adaptive_avg_pool_time",
        OpKind::LayerNorm => "layer_norm",
        OpKind::BatchNorm => "batch_norm",
    }
}

fn input_grads(nodes: &[Node], node: &Node, g: &Tensor) -> Vec<(usize, Tensor)> {
    let val = |i: usize| &*nodes[i].value;
    let reduce = |t: ArrayD<f64>, i: usize| Tensor::from_array(sum_to_shape(&t, val(i).shape()));
    match &node.op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b) => vec![
            (*a, reduce(g.array().clone(), *a)),
            (*b, reduce(g.array().clone(), *b)),
        ],
        Op::Sub(a, b) => vec![
            (*a, reduce(g.array().clone(), *a)),
            (*b, reduce(-g.array(), *b)),
        ],
        Op::Mul(a, b) => vec![
            (*a, reduce(g.array() * val(*b).array(), *a)),
            (*b, reduce(g.array() * val(*a).array(), *b)),
        ],
        Op::Scale(a, s) => vec![(*a, g.map(|v| v * s))],
        Op::AddScalar(a) => vec![(*a, g.clone())],
        Op::MatMul(a, b) => {
            let (ga, gb) = kernels::matmul_backward(val(*a), val(*b), g);
            vec![(*a, ga), (*b, gb)]
        }
        Op::Conv2d {
            input,
            kernel,
            stride,
            padding,
        } => {
            let (gx, gk) =
                kernels::conv2d_backward(val(*input), val(*kernel), g, *stride, *padding);
            vec![(*input, gx), (*kernel, gk)]
        }
        Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape()).expect("same size"))],
        Op::Permute(a, axes) => {
            let mut inverse = vec![0; axes.len()];
            for (i, &ax) in axes.iter().enumerate() {
                inverse[ax] = i;
            }
            vec![(*a, Tensor::from_array(g.array().clone().permuted_axes(inverse)))]
        }
        Op::Narrow { input, axis, start } => {
            let mut gx = ArrayD::zeros(IxDyn(val(*input).shape()));
            let len = g.shape()[*axis];
            gx.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + len))
                .assign(g.array());
            vec![(*input, Tensor::from_array(gx))]
        }
        Op::Concat { inputs, axis } => {
            let mut offset = 0;
            inputs
                .iter()
                .map(|&i| {
                    let len = val(i).shape()[*axis];
                    let part = g
                        .array()
                        .slice_axis(Axis(*axis), Slice::from(offset..offset + len))
                        .to_owned();
                    offset += len;
                    (i, Tensor::from_array(part))
                })
                .collect()
        }
        Op::Sum {
            input,
            axis,
            keepdim,
        } => {
            let shape = val(*input).shape();
            let expanded = match axis {
                None => Tensor::full(shape, g.data()[0]),
                Some(ax) => {
                    let ga = if *keepdim {
                        g.array().clone()
                    } else {
                        g.array().clone().insert_axis(Axis(*ax))
                    };
                    Tensor::from_array(ga.broadcast(IxDyn(shape)).unwrap().to_owned())
                }
            };
            vec![(*input, expanded)]
        }
        Op::Relu(a) => {
            let mut gx = g.clone();
            for (o, &x) in gx.data_mut().iter_mut().zip(val(*a).data()) {
                if x <= 0.0 {
                    *o = 0.0;
                }
            }
            vec![(*a, gx)]
        }
        Op::Sigmoid(a) => {
            let y = &node.value;
            let mut gx = g.clone();
            for (o, &yv) in gx.data_mut().iter_mut().zip(y.data()) {
                *o *= yv * (1.0 - yv);
            }
            vec![(*a, gx)]
        }
        Op::Abs(a) => {
            let mut gx = g.clone();
            for (o, &x) in gx.data_mut().iter_mut().zip(val(*a).data()) {
                *o *= if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                };
            }
            vec![(*a, gx)]
        }
        Op::Softmax(a, axis) => vec![(*a, kernels::softmax_backward(&node.value, g, *axis))],
        Op::AdaptivePool(a) => vec![(*a, kernels::adaptive_avg_pool_backward(val(*a).shape(), g))],
        Op::LayerNorm {
            input,
            gamma,
            beta,
            normalized,
            inv_std,
        } => {
            let (gx, gg, gb) = kernels::layer_norm_backward(normalized, inv_std, val(*gamma), g);
            vec![(*input, gx), (*gamma, gg), (*beta, gb)]
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            normalized,
            inv_std,
            train,
        } => {
            let (gx, gg, gb) =
                kernels::batch_norm_backward(normalized, inv_std, val(*gamma), g, *train);
            vec![(*input, gx), (*gamma, gg), (*beta, gb)]
        }
    }
}

/// Batch-norm running statistics, one entry per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let out = kernels::add(&self.value(), &other.value())?;
        self.tape.push(out, Op::Add(self.id, other.id), &[self.id, other.id])
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let out = kernels::sub(&self.value(), &other.value())?;
        self.tape.push(out, Op::Sub(self.id, other.id), &[self.id, other.id])
    }

    /// Elementwise product with broadcasting.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let out = kernels::mul(&self.value(), &other.value())?;
        self.tape.push(out, Op::Mul(self.id, other.id), &[self.id, other.id])
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.mul(self)
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>> {
        let out = self.value().map(|v| v * s);
        self.tape.push(out, Op::Scale(self.id, s), &[self.id])
    }

    pub fn add_scalar(self, s: f64) -> Result<Var<'t>> {
        let out = self.value().map(|v| v + s);
        self.tape.push(out, Op::AddScalar(self.id), &[self.id])
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let out = kernels::matmul(&self.value(), &other.value())?;
        self.tape
            .push(out, Op::MatMul(self.id, other.id), &[self.id, other.id])
    }

    pub fn conv2d(
        self,
        kernel: Var<'t>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var<'t>> {
        self.same_tape(&kernel);
        let out = kernels::conv2d(&self.value(), &kernel.value(), stride, padding)?;
        self.tape.push(
            out,
            Op::Conv2d {
                input: self.id,
                kernel: kernel.id,
                stride,
                padding,
            },
            &[self.id, kernel.id],
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        self.tape.push(out, Op::Reshape(self.id), &[self.id])
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let value = self.value();
        let mut seen = vec![false; value.ndim()];
        if axes.len() != value.ndim() || axes.iter().any(|&a| a >= seen.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(invalid(
                "permute",
                format!("{axes:?} is not a permutation of {} axes", value.ndim()),
            ));
        }
        let out = Tensor::from_array(value.array().clone().permuted_axes(axes.to_vec()));
        self.tape
            .push(out, Op::Permute(self.id, axes.to_vec()), &[self.id])
    }

    /// Swaps two axes.
    pub fn transpose(self, a: usize, b: usize) -> Result<Var<'t>> {
        let mut axes: Vec<usize> = (0..self.value().ndim()).collect();
        if a >= axes.len() || b >= axes.len() {
            return Err(invalid("transpose", format!("axes ({a}, {b}) out of range")));
        }
        axes.swap(a, b);
        self.permute(&axes)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let value = self.value();
        if axis >= value.ndim() || len == 0 || start + len > value.shape()[axis] {
            return Err(invalid(
                "narrow",
                format!(
                    "[{start}, {}) on axis {axis} of {:?}",
                    start + len,
                    value.shape()
                ),
            ));
        }
        let out = value
            .array()
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.tape.push(
            Tensor::from_array(out),
            Op::Narrow {
                input: self.id,
                axis,
                start,
            },
            &[self.id],
        )
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let out = Tensor::scalar(self.value().sum());
        self.tape.push(
            out,
            Op::Sum {
                input: self.id,
                axis: None,
                keepdim: false,
            },
            &[self.id],
        )
    }

    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t>> {
        let value = self.value();
        if axis >= value.ndim() {
            return Err(invalid("sum_axis", format!("axis {axis} out of range")));
        }
        let mut out = value.array().sum_axis(Axis(axis));
        if keepdim {
            out = out.insert_axis(Axis(axis));
        }
        self.tape.push(
            Tensor::from_array(out),
            Op::Sum {
                input: self.id,
                axis: Some(axis),
                keepdim,
            },
            &[self.id],
        )
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().len() as f64;
        self.sum()?.scale(1.0 / n)
    }

    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t>> {
        let n = self
            .value()
            .shape()
            .get(axis)
            .copied()
            .ok_or_else(|| invalid("mean_axis", format!("axis {axis} out of range")))?;
        self.sum_axis(axis, keepdim)?.scale(1.0 / n as f64)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        let out = self.value().map(|v| v.max(0.0));
        self.tape.push(out, Op::Relu(self.id), &[self.id])
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        let out = self.value().map(sigmoid);
        self.tape.push(out, Op::Sigmoid(self.id), &[self.id])
    }

    pub fn abs(self) -> Result<Var<'t>> {
        let out = self.value().map(f64::abs);
        self.tape.push(out, Op::Abs(self.id), &[self.id])
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let out = kernels::softmax(&self.value(), axis)?;
        self.tape.push(out, Op::Softmax(self.id, axis), &[self.id])
    }

    pub fn adaptive_avg_pool_time(self, t_out: usize) -> Result<Var<'t>> {
        let out = kernels::adaptive_avg_pool_time(&self.value(), t_out)?;
        self.tape.push(out, Op::AdaptivePool(self.id), &[self.id])
    }

    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let f = kernels::layer_norm(&self.value(), &gamma.value(), &beta.value(), eps)?;
        self.tape.push(
            f.output,
            Op::LayerNorm {
                input: self.id,
                gamma: gamma.id,
                beta: beta.id,
                normalized: f.normalized,
                inv_std: f.inv_std,
            },
            &[self.id, gamma.id, beta.id],
        )
    }

    /// Batch normalization over axis 1 of `[B, C, ...]`.
    ///
    /// Train mode normalizes with batch statistics and returns the updated
    /// running statistics; eval mode reads `stats` and returns `None`.
    pub fn batch_norm(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        stats: &RunningStats,
        mode: NormMode,
        momentum: f64,
        eps: f64,
    ) -> Result<(Var<'t>, Option<RunningStats>)> {
        let train = mode == NormMode::Train;
        let running = (!train).then_some((&stats.mean, &stats.var));
        let f = kernels::batch_norm(&self.value(), &gamma.value(), &beta.value(), running, eps)?;
        let updated = train.then(|| {
            let blend = |old: &Tensor, new: &[f64]| {
                Tensor::from_fn(old.shape(), |i| (1.0 - momentum) * old.data()[i] + momentum * new[i])
            };
            RunningStats {
                mean: blend(&stats.mean, &f.mean),
                var: blend(&stats.var, &f.var_unbiased),
            }
        });
        let out = self.tape.push(
            f.output,
            Op::BatchNorm {
                input: self.id,
                gamma: gamma.id,
                beta: beta.id,
                normalized: f.normalized,
                inv_std: f.inv_std,
                train,
            },
            &[self.id, gamma.id, beta.id],
        )?;
        Ok((out, updated))
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
