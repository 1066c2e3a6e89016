use crate::error::{invalid, Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Op, Var};
use crate::tensor::{numel, Tensor};

/// `(outer, axis, inner)` extents around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

pub(crate) fn concat_backward<T: Scalar>(shapes: &[Vec<usize>], axis: usize, grad: &[T]) -> Vec<Vec<T>> {
    let outer = numel(&shapes[0][..axis]);
    let inner = numel(&shapes[0][axis + 1..]);
    let total: usize = shapes.iter().map(|s| s[axis]).sum();
    let mut out = Vec::with_capacity(shapes.len());
    let mut offset = 0;
    for s in shapes {
        let len = s[axis] * inner;
        let mut g = Vec::with_capacity(outer * len);
        for o in 0..outer {
            let start = o * total * inner + offset;
            g.extend_from_slice(&grad[start..start + len]);
        }
        offset += len;
        out.push(g);
    }
    out
}

pub(crate) fn narrow_backward<T: Scalar>(
    in_shape: &[usize],
    axis: usize,
    start: usize,
    len: usize,
    grad: &[T],
) -> Vec<T> {
    let (outer, size, inner) = split_at_axis(in_shape, axis);
    let mut out = vec![T::zero(); numel(in_shape)];
    for o in 0..outer {
        let dst = o * size * inner + start * inner;
        out[dst..dst + len * inner].copy_from_slice(&grad[o * len * inner..(o + 1) * len * inner]);
    }
    out
}

pub(crate) fn replicate_backward<T: Scalar>(rows: usize, plane: usize, grad: &[T]) -> Vec<T> {
    (0..rows)
        .map(|r| grad[r * plane..(r + 1) * plane].iter().copied().sum())
        .collect()
}

pub(crate) fn embedding_backward<T: Scalar>(table_shape: &[usize], ids: &[usize], grad: &[T]) -> Vec<T> {
    let dim = table_shape[1];
    let mut out = vec![T::zero(); numel(table_shape)];
    for (r, &id) in ids.iter().enumerate() {
        for k in 0..dim {
            out[id * dim + k] = out[id * dim + k] + grad[r * dim + k];
        }
    }
    out
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let value = self.value().reshape(shape)?;
        self.tape.push("reshape", value, Op::Reshape(self.id), &[self.id])
    }

    /// Flattens everything after the leading axis.
    pub fn flatten(self) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let rows = *shape.first().ok_or_else(|| invalid("flatten", "rank-0 tensor"))?;
        self.reshape(&[rows, numel(&shape[1..])])
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let values: Vec<Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        first.tape.push(
            "concat",
            Tensor::from_parts(shape, data),
            Op::Concat {
                inputs: ids.clone(),
                axis,
            },
            &ids,
        )
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let v = self.value();
        let shape = v.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(invalid(
                "narrow",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, size, inner) = split_at_axis(shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let src = o * size * inner + start * inner;
            data.extend_from_slice(&v.data()[src..src + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        self.tape.push(
            "narrow",
            Tensor::from_parts(out_shape, data),
            Op::Narrow {
                input: self.id,
                axis,
                start,
            },
            &[self.id],
        )
    }

    /// Tiles an `N×C` matrix over space into `N×C×height×width`.
    pub fn replicate_spatial(self, height: usize, width: usize) -> Result<Var<'t, T>> {
        let v = self.value();
        let &[n, c] = v.shape() else {
            return Err(invalid("replicate_spatial", format!("expected N×C, got {:?}", v.shape())));
        };
        if height == 0 || width == 0 {
            return Err(invalid("replicate_spatial", "empty spatial extent"));
        }
        let plane = height * width;
        let mut data = Vec::with_capacity(n * c * plane);
        for &x in v.data() {
            data.extend(std::iter::repeat_n(x, plane));
        }
        self.tape.push(
            "replicate_spatial",
            Tensor::from_parts(vec![n, c, height, width], data),
            Op::Replicate {
                input: self.id,
                height,
                width,
            },
            &[self.id],
        )
    }

    /// Looks up rows of a `V×E` table.
    pub fn embedding(self, ids: &[usize]) -> Result<Var<'t, T>> {
        let table = self.value();
        let &[vocab, dim] = table.shape() else {
            return Err(invalid("embedding", format!("expected V×E table, got {:?}", table.shape())));
        };
        if ids.is_empty() {
            return Err(invalid("embedding", "no ids"));
        }
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::InvalidClass { index: id, classes: vocab });
            }
            data.extend_from_slice(&table.data()[id * dim..(id + 1) * dim]);
        }
        self.tape.push(
            "embedding",
            Tensor::from_parts(vec![ids.len(), dim], data),
            Op::Embedding {
                table: self.id,
                ids: ids.to_vec(),
            },
            &[self.id],
        )
    }
}
