use crate::error::{invalid, Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Op, Var};
use crate::tensor::Tensor;

/// Which statistics a batch-norm layer normalizes with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Batch statistics; running statistics are left untouched. Used when a
    /// network takes part in another network's update step.
    BatchStats,
    /// Running statistics.
    Eval,
}

impl BnMode {
    pub fn uses_batch_stats(self) -> bool {
        !matches!(self, BnMode::Eval)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNormOpts {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormOpts {
    fn default() -> Self {
        Self {
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

pub(crate) struct BnForward<T> {
    pub out: Tensor<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn bn_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &mut RunningStats<T>,
    mode: BnMode,
    opts: BatchNormOpts,
) -> Result<BnForward<T>> {
    let &[n, c, h, w] = x.shape() else {
        return Err(invalid("batchnorm2d", format!("expected N×C×H×W, got {:?}", x.shape())));
    };
    for p in [gamma, beta] {
        if p.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "batchnorm2d",
                lhs: x.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    if running.mean.len() != c || running.var.len() != c {
        return Err(invalid("batchnorm2d", "running statistics do not match channel count"));
    }
    if mode.uses_batch_stats() && n < 2 {
        return Err(invalid("batchnorm2d", "batch statistics need a batch of at least 2"));
    }
    let plane = h * w;
    let count = n * plane;
    let eps = T::from_f64(opts.eps);
    let xd = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    if mode.uses_batch_stats() {
        let inv_m = T::one() / T::from_f64(count as f64);
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                s = s + xd[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().copied().sum::<T>();
            }
            let mu = s * inv_m;
            let mut sq = T::zero();
            for b in 0..n {
                for &v in &xd[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                    sq = sq + (v - mu) * (v - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = sq * inv_m;
        }
        if mode == BnMode::Train {
            let m = T::from_f64(opts.momentum);
            let unbias = T::from_f64(count as f64 / (count as f64 - 1.0).max(1.0));
            for ch in 0..c {
                running.mean[ch] = (T::one() - m) * running.mean[ch] + m * mean[ch];
                running.var[ch] = (T::one() - m) * running.var[ch] + m * var[ch] * unbias;
            }
        }
    } else {
        mean.copy_from_slice(&running.mean);
        var.copy_from_slice(&running.var);
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    let (gd, bd) = (gamma.data(), beta.data());
    for b in 0..n {
        for ch in 0..c {
            let range = (b * c + ch) * plane..(b * c + ch + 1) * plane;
            for i in range {
                let xh = (xd[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                out[i] = gd[ch] * xh + bd[ch];
            }
        }
    }
    Ok(BnForward {
        out: Tensor::from_parts(x.shape().to_vec(), out),
        xhat,
        inv_std,
    })
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn bn_backward<T: Scalar>(
    shape: &[usize],
    gamma: &Tensor<T>,
    xhat: &[T],
    inv_std: &[T],
    batch_stats: bool,
    grad: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let count = T::from_f64((n * plane) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            for i in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                dbeta[ch] = dbeta[ch] + grad[i];
                dgamma[ch] = dgamma[ch] + grad[i] * xhat[i];
            }
        }
    }
    let gd = gamma.data();
    let mut dx = vec![T::zero(); grad.len()];
    for b in 0..n {
        for ch in 0..c {
            let scale = gd[ch] * inv_std[ch];
            for i in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                dx[i] = if batch_stats {
                    scale * (grad[i] - (dbeta[ch] + xhat[i] * dgamma[ch]) / count)
                } else {
                    scale * grad[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Per-channel batch normalization of an `N×C×H×W` input.
    pub fn batchnorm2d(
        self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        running: &mut RunningStats<T>,
        mode: BnMode,
        opts: BatchNormOpts,
    ) -> Result<Var<'t, T>> {
        let fwd = bn_forward(&self.value(), &gamma.value(), &beta.value(), running, mode, opts)?;
        self.tape.push(
            "batchnorm2d",
            fwd.out,
            Op::BatchNorm {
                input: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat: fwd.xhat,
                inv_std: fwd.inv_std,
                batch_stats: mode.uses_batch_stats(),
            },
            &[self.id, gamma.id, beta.id],
        )
    }
}
