use super::{Element, Result, Tensor, TensorError};
use crate::dcls::KernelGeometry;

use super::conv::ConvGeometry;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
    },
    ChannelBias {
        input: Var,
        bias: Var,
    },
    Relu {
        input: Var,
    },
    StarRelu {
        input: Var,
        scale: Var,
        bias: Var,
    },
    GlobalAvgPool {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Pick {
        input: Var,
        index: usize,
    },
    Reshape {
        input: Var,
    },
    SoftmaxPick {
        input: Var,
        index: usize,
        probs: Vec<f64>,
    },
    DclsKernel {
        weights: Var,
        positions: Var,
        sigma: Option<Var>,
        geom: KernelGeometry,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::ChannelBias { input, bias } => vec![*input, *bias],
            Op::Relu { input } | Op::GlobalAvgPool { input } => vec![*input],
            Op::StarRelu { input, scale, bias } => vec![*input, *scale, *bias],
            Op::Linear { input, weight, bias } => vec![*input, *weight, *bias],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::Pick { input, .. } | Op::SoftmaxPick { input, .. } | Op::Reshape { input } => vec![*input],
            Op::DclsKernel {
                weights,
                positions,
                sigma,
                ..
            } => {
                let mut v = vec![*weights, *positions];
                v.extend(*sigma);
                v
            }
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ChannelBias { .. } => "channel_bias",
            Op::Relu { .. } => "relu",
            Op::StarRelu { .. } => "star_relu",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Linear { .. } => "linear",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Pick { .. } => "pick",
            Op::Reshape { .. } => "reshape",
            Op::SoftmaxPick { .. } => "softmax_pick",
            Op::DclsKernel { .. } => "dcls_kernel",
        }
    }
}

/// One recorded operation: its output value, the op with its input
/// references and whatever the backward rule saved.
#[derive(Debug, Clone)]
pub struct TapePoint<E: Element> {
    pub(crate) value: Tensor<E>,
    pub(crate) op: Op,
    pub(crate) needs_grad: bool,
}

impl<E: Element> TapePoint<E> {
    pub fn op_name(&self) -> &'static str {
        self.op.name()
    }
}

/// Single-use reverse-mode tape. Points are appended in execution order,
/// which is a valid topological order for the reverse sweep.
#[derive(Debug, Clone, Default)]
pub struct Tape<E: Element = f32> {
    points: Vec<TapePoint<E>>,
    grads: Vec<Option<Vec<E>>>,
    backward_done: bool,
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self {
            points: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.push_leaf(value, false)
    }

    /// Learnable leaf; backward fills its gradient.
    pub fn param(&mut self, value: Tensor<E>) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, mut value: Tensor<E>, needs_grad: bool) -> Var {
        value.grad = None;
        self.points.push(TapePoint {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.points.len() - 1)
    }

    /// Force gradient retention at `var`. Must be called before any op
    /// consumes `var`, otherwise downstream points were recorded as
    /// gradient-free.
    pub fn watch(&mut self, var: Var) {
        self.points[var.0].needs_grad = true;
    }

    pub(crate) fn push(&mut self, value: Tensor<E>, op: Op) -> Result<Var> {
        value.check_finite(op.name())?;
        let needs_grad = op.inputs().iter().any(|v| self.points[v.0].needs_grad);
        self.points.push(TapePoint {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Ok(Var(self.points.len() - 1))
    }

    pub fn value(&self, var: Var) -> &Tensor<E> {
        &self.points[var.0].value
    }

    pub fn point(&self, var: Var) -> &TapePoint<E> {
        &self.points[var.0]
    }

    pub fn grad(&self, var: Var) -> Option<&[E]> {
        self.grads[var.0].as_deref()
    }

    /// Value of `var` with its gradient buffer attached (zeros when no
    /// gradient reached it).
    pub fn tensor_with_grad(&self, var: Var) -> Tensor<E> {
        let mut t = self.points[var.0].value.clone();
        let g = self.grads[var.0]
            .clone()
            .unwrap_or_else(|| vec![E::zero(); t.numel()]);
        t.grad = Some(g);
        t
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    /// Reverse sweep from a scalar loss. Running it twice without
    /// [`Tape::zero_grad`] is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let shape = self.points[loss.0].value.shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![E::one()]);
        for i in (0..=loss.0).rev() {
            if !self.points[i].needs_grad {
                continue;
            }
            let Some(upstream) = self.grads[i].take() else {
                continue;
            };
            let contributions = self.backward_point(i, &upstream);
            self.grads[i] = Some(upstream);
            for (var, g) in contributions {
                self.accumulate(var, g);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, var: Var, g: Vec<E>) {
        if !self.points[var.0].needs_grad {
            return;
        }
        match &mut self.grads[var.0] {
            Some(existing) => existing.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
            slot @ None => *slot = Some(g),
        }
    }

    pub(crate) fn wants(&self, var: Var) -> bool {
        self.points[var.0].needs_grad
    }

    fn backward_point(&self, i: usize, upstream: &[E]) -> Vec<(Var, Vec<E>)> {
        let point = &self.points[i];
        match &point.op {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                kernel,
                geom,
            } => super::conv::conv2d_backward(self, *input, *kernel, *geom, upstream),
            Op::ChannelBias { input, bias } => {
                super::ops::channel_bias_backward(self, *input, *bias, upstream)
            }
            Op::Relu { input } => super::ops::relu_backward(self, *input, upstream),
            Op::StarRelu { input, scale, bias } => {
                super::ops::star_relu_backward(self, *input, *scale, *bias, upstream)
            }
            Op::GlobalAvgPool { input } => super::ops::gap_backward(self, *input, upstream),
            Op::Linear {
                input,
                weight,
                bias,
            } => super::ops::linear_backward(self, *input, *weight, *bias, upstream),
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => super::ops::ce_backward(*logits, labels, probs, upstream),
            Op::Pick { input, index } => {
                let mut g = vec![E::zero(); self.value(*input).numel()];
                g[*index] = upstream[0];
                vec![(*input, g)]
            }
            Op::Reshape { input } => vec![(*input, upstream.to_vec())],
            Op::SoftmaxPick {
                input,
                index,
                probs,
            } => super::ops::softmax_pick_backward(*input, *index, probs, upstream),
            Op::DclsKernel {
                weights,
                positions,
                sigma,
                geom,
            } => crate::dcls::kernel_backward(self, *weights, *positions, *sigma, *geom, upstream),
        }
    }
}
