use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

/// Dense row-major tensor value. Cloning is cheap: the buffer is shared
/// until one of the copies is mutated.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) || numel(shape) != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::from_f64(v)).collect())
    }

    /// Standard-normal entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Self::from_parts(shape.to_vec(), data)
    }

    /// Entries uniform in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| T::from_f64(rng.random_range(lo..hi)))
            .collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(crate::error::invalid(
                "item",
                format!("tensor of shape {:?} is not a scalar", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        )
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows `[start, start + len)` along the leading axis.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        let rows = *self.shape.first().unwrap_or(&1);
        if self.rank() == 0 || len == 0 || start + len > rows {
            return Err(crate::error::invalid(
                "slice_rows",
                format!("rows {start}..{} of {rows}", start + len),
            ));
        }
        let stride = self.numel() / rows;
        let mut shape = self.shape.clone();
        shape[0] = len;
        Ok(Self::from_parts(
            shape,
            self.data[start * stride..(start + len) * stride].to_vec(),
        ))
    }

    /// Gathers rows along the leading axis in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let n = *self.shape.first().unwrap_or(&1);
        if self.rank() == 0 || rows.is_empty() {
            return Err(crate::error::invalid("select_rows", "empty selection"));
        }
        let stride = self.numel() / n;
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= n {
                return Err(crate::error::invalid(
                    "select_rows",
                    format!("row {r} out of range for {n}"),
                ));
            }
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Self::from_parts(shape, data))
    }

    /// Concatenates tensors along the leading axis.
    pub fn stack_rows(parts: &[Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| crate::error::invalid("stack_rows", "no tensors"))?;
        let tail = &first.shape()[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.rank() == 0 || &p.shape()[1..] != tail {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_rows",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            rows += p.shape[0];
            data.extend_from_slice(p.data());
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Self::from_parts(shape, data))
    }
}
