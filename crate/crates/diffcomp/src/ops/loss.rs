use crate::error::{invalid, Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Op, Var};
use crate::tensor::Tensor;

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

/// `max(x, 0) − x·t + ln(1 + e^{−|x|})`, the overflow-free form of
/// `−t·ln σ(x) − (1 − t)·ln(1 − σ(x))`.
pub fn bce_with_logits_value(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn log_softmax_rows<T: Scalar>(logits: &[T], classes: usize) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for (row, dst) in logits.chunks(classes).zip(out.chunks_mut(classes)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = v - lse;
        }
    }
    out
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Mean over all elements of `(self − target)²`.
    pub fn mse(self, target: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), target.value());
        same_shape("mse", a.shape(), b.shape())?;
        let total: T = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let value = Tensor::scalar(total / T::from_f64(a.numel() as f64));
        self.tape
            .push("mse", value, Op::Mse(self.id, target.id), &[self.id, target.id])
    }

    /// Mean binary cross-entropy between `sigmoid(self)` and `targets`.
    pub fn bce_with_logits(self, targets: &Tensor<T>) -> Result<Var<'t, T>> {
        let x = self.value();
        same_shape("bce_with_logits", x.shape(), targets.shape())?;
        let total: f64 = x
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&l, &t)| bce_with_logits_value(l.as_f64(), t.as_f64()))
            .sum();
        let value = Tensor::scalar(T::from_f64(total / x.numel() as f64));
        self.tape.push(
            "bce_with_logits",
            value,
            Op::BceLogits {
                logits: self.id,
                targets: targets.clone(),
            },
            &[self.id],
        )
    }

    /// Mean negative log-softmax of the target class for each row of an
    /// `N×C` logit matrix. Rows whose target equals `ignore` are skipped.
    pub fn cross_entropy(self, targets: &[usize], ignore: Option<usize>) -> Result<Var<'t, T>> {
        let x = self.value();
        let &[rows, classes] = x.shape() else {
            return Err(invalid("cross_entropy", format!("expected N×C logits, got {:?}", x.shape())));
        };
        if targets.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: x.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let logp = log_softmax_rows(x.data(), classes);
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if Some(t) == ignore {
                continue;
            }
            if t >= classes {
                return Err(TensorError::InvalidClass { index: t, classes });
            }
            total = total - logp[r * classes + t];
            count += 1;
        }
        if count == 0 {
            return Err(invalid("cross_entropy", "every target is ignored"));
        }
        let value = Tensor::scalar(total / T::from_f64(count as f64));
        let probs = logp.iter().map(|v| v.exp()).collect();
        self.tape.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
            &[self.id],
        )
    }
}

pub(crate) fn mse_backward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, g: T) -> (Vec<T>, Vec<T>) {
    let scale = g * T::from_f64(2.0 / a.numel() as f64);
    let ga: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * scale).collect();
    let gb = ga.iter().map(|&v| -v).collect();
    (ga, gb)
}

pub(crate) fn bce_backward<T: Scalar>(x: &Tensor<T>, targets: &Tensor<T>, g: T) -> Vec<T> {
    let scale = g / T::from_f64(x.numel() as f64);
    x.data()
        .iter()
        .zip(targets.data())
        .map(|(&l, &t)| {
            let s = if l >= T::zero() {
                T::one() / (T::one() + (-l).exp())
            } else {
                let e = l.exp();
                e / (T::one() + e)
            };
            (s - t) * scale
        })
        .collect()
}

pub(crate) fn cross_entropy_backward<T: Scalar>(
    probs: &[T],
    targets: &[usize],
    ignore: Option<usize>,
    count: usize,
    g: T,
) -> Vec<T> {
    let classes = probs.len() / targets.len();
    let scale = g / T::from_f64(count as f64);
    let mut out = vec![T::zero(); probs.len()];
    for (r, &t) in targets.iter().enumerate() {
        if Some(t) == ignore {
            continue;
        }
        for c in 0..classes {
            let onehot = if c == t { T::one() } else { T::zero() };
            out[r * classes + c] = (probs[r * classes + c] - onehot) * scale;
        }
    }
    out
}
