use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tape::{Op, Var};
use crate::tensor::Tensor;

fn nchw(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match shape {
        &[n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(invalid(op, format!("expected N×C×H×W, got {shape:?}"))),
    }
}

pub(crate) fn upsample_forward<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor < 1 {
        return Err(invalid("upsample_nearest", "factor must be at least 1"));
    }
    let (n, c, h, w) = nchw(x.shape(), "upsample_nearest")?;
    let (oh, ow) = (h * factor, w * factor);
    let src = x.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for plane in 0..n * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let d = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..oh {
            let row = &s[(y / factor) * w..(y / factor + 1) * w];
            for (xo, v) in d[y * ow..(y + 1) * ow].iter_mut().enumerate() {
                *v = row[xo / factor];
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

/// Sums each `factor×factor` block of `grad` (shape of the upsampled output).
fn block_sum<T: Scalar>(grad: &[T], in_shape: &[usize], factor: usize) -> Vec<T> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let g = &grad[plane * oh * ow..(plane + 1) * oh * ow];
        let d = &mut out[plane * h * w..(plane + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let v = &mut d[(y / factor) * w + x / factor];
                *v = *v + g[y * ow + x];
            }
        }
    }
    out
}

pub(crate) fn upsample_backward<T: Scalar>(in_shape: &[usize], factor: usize, grad: &[T]) -> Vec<T> {
    block_sum(grad, in_shape, factor)
}

pub(crate) fn avg_down_forward<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = nchw(x.shape(), "avg_downsample")?;
    if factor < 1 || h % factor != 0 || w % factor != 0 {
        return Err(invalid(
            "avg_downsample",
            format!("{h}×{w} is not divisible by factor {factor}"),
        ));
    }
    let (oh, ow) = (h / factor, w / factor);
    let out_shape = [n, c, oh, ow];
    let mut sums = block_sum(x.data(), &out_shape, factor);
    let inv = T::one() / T::from_f64((factor * factor) as f64);
    for v in &mut sums {
        *v = *v * inv;
    }
    Ok(Tensor::from_parts(out_shape.to_vec(), sums))
}

pub(crate) fn avg_down_backward<T: Scalar>(in_shape: &[usize], factor: usize, grad: &[T]) -> Vec<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (oh, ow) = (h / factor, w / factor);
    let inv = T::one() / T::from_f64((factor * factor) as f64);
    let planes = in_shape[0] * in_shape[1];
    let mut out = vec![T::zero(); planes * h * w];
    for plane in 0..planes {
        let g = &grad[plane * oh * ow..(plane + 1) * oh * ow];
        let d = &mut out[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                d[y * w + x] = g[(y / factor) * ow + x / factor] * inv;
            }
        }
    }
    out
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Nearest-neighbour upsampling: every pixel becomes a `factor×factor` block.
    pub fn upsample_nearest(self, factor: usize) -> Result<Var<'t, T>> {
        let value = upsample_forward(&self.value(), factor)?;
        self.tape.push(
            "upsample_nearest",
            value,
            Op::Upsample {
                input: self.id,
                factor,
            },
            &[self.id],
        )
    }

    /// Block-mean downsampling; height and width must divide by `factor`.
    pub fn avg_downsample(self, factor: usize) -> Result<Var<'t, T>> {
        let value = avg_down_forward(&self.value(), factor)?;
        self.tape.push(
            "avg_downsample",
            value,
            Op::AvgDown {
                input: self.id,
                factor,
            },
            &[self.id],
        )
    }
}
