use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Op, Var};
use crate::tensor::Tensor;

pub(crate) fn matmul_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k, n) = check(a.shape(), b.shape())?;
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, a.data(), (k as isize, 1), b.data(), (n as isize, 1), T::zero(), &mut out);
    Ok(Tensor::from_parts(vec![m, n], out))
}

fn check(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok((a[0], a[1], b[1]))
}

/// `dA = dC·Bᵀ`, `dB = Aᵀ·dC`.
pub(crate) fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad: &[T],
    need_a: bool,
    need_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let ga = need_a.then(|| {
        let mut ga = vec![T::zero(); m * k];
        T::gemm(m, n, k, grad, (n as isize, 1), b.data(), (1, n as isize), T::zero(), &mut ga);
        ga
    });
    let gb = need_b.then(|| {
        let mut gb = vec![T::zero(); k * n];
        T::gemm(k, m, n, a.data(), (1, k as isize), grad, (n as isize, 1), T::zero(), &mut gb);
        gb
    });
    (ga, gb)
}

impl<'t, T: Scalar> Var<'t, T> {
    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let value = matmul_forward(&self.value(), &rhs.value())?;
        self.tape
            .push("matmul", value, Op::MatMul(self.id, rhs.id), &[self.id, rhs.id])
    }
}
