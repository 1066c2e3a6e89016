//! Differentiable operations. Forward passes live in `impl Var` blocks in
//! the submodules; [`vjp`] maps an output gradient back onto the inputs.

pub mod conv;
pub mod elementwise;
pub mod linalg;
pub mod loss;
pub mod norm;
pub mod resample;
pub mod shape;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tape::{Node, Op};

/// Vector-Jacobian product of node `id` for upstream gradient `grad`.
pub(crate) fn vjp<T: Scalar>(nodes: &[Node<T>], id: usize, grad: &[T]) -> Result<Vec<(usize, Vec<T>)>> {
    let node = &nodes[id];
    let val = |i: usize| &nodes[i].value;
    let needs = |i: usize| nodes[i].requires_grad;
    let out = match &node.op {
        Op::Leaf => Vec::new(),
        &Op::Binary { kind, lhs, rhs } => {
            let (ga, gb) = elementwise::binary_backward(kind, val(lhs), val(rhs), grad, node.value.shape());
            vec![(lhs, ga), (rhs, gb)]
        }
        &Op::Unary { kind, input } => {
            vec![(input, elementwise::unary_backward(kind, val(input), &node.value, grad))]
        }
        &Op::Sum(input) => vec![(input, vec![grad[0]; val(input).numel()])],
        &Op::Mean(input) => {
            let n = val(input).numel();
            vec![(input, vec![grad[0] / T::from_f64(n as f64); n])]
        }
        &Op::MatMul(a, b) => {
            let (ga, gb) = linalg::matmul_backward(val(a), val(b), grad, needs(a), needs(b));
            let mut v = Vec::new();
            if let Some(g) = ga {
                v.push((a, g));
            }
            if let Some(g) = gb {
                v.push((b, g));
            }
            v
        }
        &Op::Conv2d {
            input,
            kernel,
            stride,
            pad,
        } => {
            let geom = conv::geometry(val(input).shape(), val(kernel).shape(), stride, pad)?;
            let (gx, gk) = conv::conv2d_backward(val(input), val(kernel), &geom, grad, needs(input), needs(kernel));
            let mut v = Vec::new();
            if let Some(g) = gx {
                v.push((input, g));
            }
            if let Some(g) = gk {
                v.push((kernel, g));
            }
            v
        }
        &Op::Upsample { input, factor } => {
            vec![(input, resample::upsample_backward(val(input).shape(), factor, grad))]
        }
        &Op::AvgDown { input, factor } => {
            vec![(input, resample::avg_down_backward(val(input).shape(), factor, grad))]
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let (gx, gg, gb) =
                norm::bn_backward(val(*input).shape(), val(*gamma), xhat, inv_std, *batch_stats, grad);
            vec![(*input, gx), (*gamma, gg), (*beta, gb)]
        }
        &Op::Mse(a, b) => {
            let (ga, gb) = loss::mse_backward(val(a), val(b), grad[0]);
            vec![(a, ga), (b, gb)]
        }
        Op::BceLogits { logits, targets } => {
            vec![(*logits, loss::bce_backward(val(*logits), targets, grad[0]))]
        }
        Op::CrossEntropy {
            logits,
            targets,
            ignore,
            probs,
            count,
        } => vec![(
            *logits,
            loss::cross_entropy_backward(probs, targets, *ignore, *count, grad[0]),
        )],
        &Op::Reshape(input) => vec![(input, grad.to_vec())],
        Op::Concat { inputs, axis } => {
            let shapes: Vec<Vec<usize>> = inputs.iter().map(|&i| val(i).shape().to_vec()).collect();
            inputs
                .iter()
                .copied()
                .zip(shape::concat_backward(&shapes, *axis, grad))
                .collect()
        }
        &Op::Narrow { input, axis, start } => {
            let len = node.value.shape()[axis];
            vec![(input, shape::narrow_backward(val(input).shape(), axis, start, len, grad))]
        }
        &Op::Replicate { input, height, width } => {
            vec![(input, shape::replicate_backward(val(input).numel(), height * width, grad))]
        }
        Op::Embedding { table, ids } => {
            vec![(*table, shape::embedding_backward(val(*table).shape(), ids, grad))]
        }
    };
    Ok(out)
}
