use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{BinaryKind, Op, UnaryKind, Var};
use crate::tensor::{numel, Tensor};

/// Trailing-dimension broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed at `out`'s rank, zero along broadcast axes.
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut stride = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[i + offset] = stride;
        }
        stride *= shape[i];
    }
    strides
}

fn for_each_pair(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    let n = numel(out);
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for i in 0..n {
        f(i, ia, ib);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn apply<T: Scalar>(kind: BinaryKind, x: T, y: T) -> T {
    match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Sub => x - y,
        BinaryKind::Mul => x * y,
    }
}

pub(crate) fn binary_forward<T: Scalar>(kind: BinaryKind, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| apply(kind, x, y))
            .collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let out = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| TensorError::ShapeMismatch {
        op: "broadcast",
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })?;
    let sa = aligned_strides(a.shape(), &out);
    let sb = aligned_strides(b.shape(), &out);
    let mut data = vec![T::zero(); numel(&out)];
    let (ad, bd) = (a.data(), b.data());
    for_each_pair(&out, &sa, &sb, |i, ia, ib| data[i] = apply(kind, ad[ia], bd[ib]));
    Ok(Tensor::from_parts(out, data))
}

pub(crate) fn binary_backward<T: Scalar>(
    kind: BinaryKind,
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad: &[T],
    out_shape: &[usize],
) -> (Vec<T>, Vec<T>) {
    let mut ga = vec![T::zero(); a.numel()];
    let mut gb = vec![T::zero(); b.numel()];
    let (ad, bd) = (a.data(), b.data());
    let mut visit = |i: usize, ia: usize, ib: usize| {
        let g = grad[i];
        match kind {
            BinaryKind::Add => {
                ga[ia] = ga[ia] + g;
                gb[ib] = gb[ib] + g;
            }
            BinaryKind::Sub => {
                ga[ia] = ga[ia] + g;
                gb[ib] = gb[ib] - g;
            }
            BinaryKind::Mul => {
                ga[ia] = ga[ia] + g * bd[ib];
                gb[ib] = gb[ib] + g * ad[ia];
            }
        }
    };
    if a.shape() == b.shape() {
        for i in 0..grad.len() {
            visit(i, i, i);
        }
    } else {
        let sa = aligned_strides(a.shape(), out_shape);
        let sb = aligned_strides(b.shape(), out_shape);
        for_each_pair(out_shape, &sa, &sb, visit);
    }
    (ga, gb)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn unary_forward<T: Scalar>(kind: UnaryKind<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if kind == UnaryKind::Log {
        if let Some(bad) = x.data().iter().find(|v| **v <= T::zero()) {
            return Err(TensorError::LogDomain(bad.as_f64()));
        }
    }
    let f = |v: T| -> T {
        match kind {
            UnaryKind::Neg => -v,
            UnaryKind::Exp => v.exp(),
            UnaryKind::Log => v.ln(),
            UnaryKind::Tanh => v.tanh(),
            UnaryKind::Sigmoid => sigmoid(v),
            UnaryKind::Relu => v.max(T::zero()),
            UnaryKind::LeakyRelu(slope) => {
                if v > T::zero() {
                    v
                } else {
                    v * slope
                }
            }
            UnaryKind::Square => v * v,
            UnaryKind::Scale(s) => v * s,
            UnaryKind::AddScalar => v,
        }
    };
    Ok(x.map(f))
}

pub(crate) fn unary_backward<T: Scalar>(kind: UnaryKind<T>, x: &Tensor<T>, y: &Tensor<T>, grad: &[T]) -> Vec<T> {
    let two = T::one() + T::one();
    x.data()
        .iter()
        .zip(y.data())
        .zip(grad)
        .map(|((&xv, &yv), &g)| match kind {
            UnaryKind::Neg => -g,
            UnaryKind::Exp => g * yv,
            UnaryKind::Log => g / xv,
            UnaryKind::Tanh => g * (T::one() - yv * yv),
            UnaryKind::Sigmoid => g * yv * (T::one() - yv),
            UnaryKind::Relu => {
                if xv > T::zero() {
                    g
                } else {
                    T::zero()
                }
            }
            UnaryKind::LeakyRelu(slope) => {
                if xv > T::zero() {
                    g
                } else {
                    g * slope
                }
            }
            UnaryKind::Square => g * two * xv,
            UnaryKind::Scale(s) => g * s,
            UnaryKind::AddScalar => g,
        })
        .collect()
}

impl<'t, T: Scalar> Var<'t, T> {
    fn binary(self, kind: BinaryKind, name: &'static str, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let value = binary_forward(kind, &self.value(), &rhs.value()).map_err(|e| match e {
            TensorError::ShapeMismatch { lhs, rhs, .. } => TensorError::ShapeMismatch { op: name, lhs, rhs },
            other => other,
        })?;
        self.tape.push(
            name,
            value,
            Op::Binary {
                kind,
                lhs: self.id,
                rhs: rhs.id,
            },
            &[self.id, rhs.id],
        )
    }

    fn unary(self, kind: UnaryKind<T>, name: &'static str) -> Result<Var<'t, T>> {
        let value = unary_forward(kind, &self.value())?;
        self.tape.push(name, value, Op::Unary { kind, input: self.id }, &[self.id])
    }

    /// Broadcasting sum.
    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(BinaryKind::Add, "add", rhs)
    }

    /// Broadcasting difference.
    pub fn sub(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(BinaryKind::Sub, "sub", rhs)
    }

    /// Broadcasting elementwise product.
    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(BinaryKind::Mul, "mul", rhs)
    }

    pub fn neg(self) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::Neg, "neg")
    }

    pub fn exp(self) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::Exp, "exp")
    }

    /// Natural log; errors on non-positive entries.
    pub fn log(self) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::Log, "log")
    }

    pub fn tanh(self) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::Tanh, "tanh")
    }

    pub fn sigmoid(self) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::Sigmoid, "sigmoid")
    }

    pub fn relu(self) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::Relu, "relu")
    }

    pub fn leaky_relu(self, slope: f64) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::LeakyRelu(T::from_f64(slope)), "leaky_relu")
    }

    pub fn square(self) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::Square, "square")
    }

    pub fn scale(self, factor: f64) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::Scale(T::from_f64(factor)), "scale")
    }

    pub fn add_scalar(self, offset: f64) -> Result<Var<'t, T>> {
        let c = T::from_f64(offset);
        let value = self.value().map(|v| v + c);
        self.tape.push(
            "add_scalar",
            value,
            Op::Unary {
                kind: UnaryKind::AddScalar,
                input: self.id,
            },
            &[self.id],
        )
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(self) -> Result<Var<'t, T>> {
        let total = self.value().data().iter().copied().sum();
        self.tape.push("sum", Tensor::scalar(total), Op::Sum(self.id), &[self.id])
    }

    /// Mean of all entries, as a rank-0 tensor.
    pub fn mean(self) -> Result<Var<'t, T>> {
        let v = self.value();
        let total: T = v.data().iter().copied().sum();
        let mean = total / T::from_f64(v.numel() as f64);
        self.tape.push("mean", Tensor::scalar(mean), Op::Mean(self.id), &[self.id])
    }
}
