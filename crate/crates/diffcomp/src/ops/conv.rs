//! 2-D convolution through an unrolled-patch matrix product.

use crate::error::{invalid, Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Op, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

fn out_dim(size: usize, k: usize, stride: usize, pad: usize, axis: &str) -> Result<usize> {
    let padded = size + 2 * pad;
    if k > padded {
        return Err(invalid("conv2d", format!("kernel {k} larger than padded {axis} {padded}")));
    }
    if (padded - k) % stride != 0 {
        return Err(invalid(
            "conv2d",
            format!("{axis}: ({size} + 2·{pad} − {k}) is not divisible by stride {stride}"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

pub(crate) fn geometry(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    if input.len() != 4 || kernel.len() != 4 || input[1] != kernel[1] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: input.to_vec(),
            rhs: kernel.to_vec(),
        });
    }
    if stride == 0 {
        return Err(invalid("conv2d", "stride must be positive"));
    }
    let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
    let (f, kh, kw) = (kernel[0], kernel[2], kernel[3]);
    let oh = out_dim(h, kh, stride, pad, "height")?;
    let ow = out_dim(w, kw, stride, pad, "width")?;
    Ok(ConvGeom {
        n,
        c,
        h,
        w,
        f,
        kh,
        kw,
        stride,
        pad,
        oh,
        ow,
    })
}

/// Input position along one axis for an output index and kernel tap.
#[inline]
fn source(out: usize, tap: usize, g: &ConvGeom, size: usize) -> Option<usize> {
    let pos = (out * g.stride + tap) as isize - g.pad as isize;
    (pos >= 0 && (pos as usize) < size).then_some(pos as usize)
}

/// Output columns `[lo, hi)` whose tap `kj` lands inside the input row.
#[inline]
fn valid_cols(kj: usize, g: &ConvGeom) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).div_ceil(g.stride);
    let hi = if g.w + g.pad > kj {
        ((g.w + g.pad - kj - 1) / g.stride + 1).min(g.ow)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// `[C·kh·kw] × [N·oh·ow]` patch matrix.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let cols = g.cols();
    let plane = g.oh * g.ow;
    let mut out = vec![T::zero(); g.patch() * cols];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                let (lo, hi) = valid_cols(kj, g);
                for b in 0..g.n {
                    let src = &x[(b * g.c + c) * g.h * g.w..(b * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.oh {
                        let Some(iy) = source(oy, ki, g, g.h) else { continue };
                        let base = b * plane + oy * g.ow;
                        let row_in = &src[iy * g.w..(iy + 1) * g.w];
                        let first = lo * g.stride + kj - g.pad;
                        if g.stride == 1 {
                            dst[base + lo..base + hi].copy_from_slice(&row_in[first..first + hi - lo]);
                        } else {
                            for (o, d) in dst[base + lo..base + hi].iter_mut().enumerate() {
                                *d = row_in[first + o * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: Scalar>(cols_data: &[T], g: &ConvGeom) -> Vec<T> {
    let cols = g.cols();
    let plane = g.oh * g.ow;
    let mut dx = vec![T::zero(); g.n * g.c * g.h * g.w];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols_data[row * cols..(row + 1) * cols];
                let (lo, hi) = valid_cols(kj, g);
                for b in 0..g.n {
                    let dst = &mut dx[(b * g.c + c) * g.h * g.w..(b * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.oh {
                        let Some(iy) = source(oy, ki, g, g.h) else { continue };
                        let base = b * plane + oy * g.ow;
                        let first = lo * g.stride + kj - g.pad;
                        let row_out = &mut dst[iy * g.w..(iy + 1) * g.w];
                        for (o, &v) in src[base + lo..base + hi].iter().enumerate() {
                            let d = &mut row_out[first + o * g.stride];
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
    dx
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let cols = im2col(x.data(), g);
    let np = g.cols();
    let mut tmp = vec![T::zero(); g.f * np];
    T::gemm(
        g.f,
        g.patch(),
        np,
        k.data(),
        (g.patch() as isize, 1),
        &cols,
        (np as isize, 1),
        T::zero(),
        &mut tmp,
    );
    // [F × N·P] → [N × F × P]
    let plane = g.oh * g.ow;
    let mut out = vec![T::zero(); g.n * g.f * plane];
    for f in 0..g.f {
        for b in 0..g.n {
            out[(b * g.f + f) * plane..(b * g.f + f + 1) * plane]
                .copy_from_slice(&tmp[f * np + b * plane..f * np + (b + 1) * plane]);
        }
    }
    Tensor::from_parts(vec![g.n, g.f, g.oh, g.ow], out)
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    g: &ConvGeom,
    grad: &[T],
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let plane = g.oh * g.ow;
    let np = g.cols();
    let mut g2 = vec![T::zero(); g.f * np];
    for b in 0..g.n {
        for f in 0..g.f {
            g2[f * np + b * plane..f * np + (b + 1) * plane]
                .copy_from_slice(&grad[(b * g.f + f) * plane..(b * g.f + f + 1) * plane]);
        }
    }
    let dk = need_kernel.then(|| {
        let cols = im2col(x.data(), g);
        let mut dk = vec![T::zero(); g.f * g.patch()];
        T::gemm(
            g.f,
            np,
            g.patch(),
            &g2,
            (np as isize, 1),
            &cols,
            (1, np as isize),
            T::zero(),
            &mut dk,
        );
        dk
    });
    let dx = need_input.then(|| {
        let mut dcols = vec![T::zero(); g.patch() * np];
        T::gemm(
            g.patch(),
            g.f,
            np,
            k.data(),
            (1, g.patch() as isize),
            &g2,
            (np as isize, 1),
            T::zero(),
            &mut dcols,
        );
        col2im(&dcols, g)
    });
    (dx, dk)
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Zero-padded convolution of `N×C×H×W` by `F×C×kh×kw`. The output size
    /// must come out integral; there is no implicit flooring.
    pub fn conv2d(self, kernel: Var<'t, T>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        let (x, k) = (self.value(), kernel.value());
        let g = geometry(x.shape(), k.shape(), stride, pad)?;
        let value = conv2d_forward(&x, &k, &g);
        self.tape.push(
            "conv2d",
            value,
            Op::Conv2d {
                input: self.id,
                kernel: kernel.id,
                stride,
                pad,
            },
            &[self.id, kernel.id],
        )
    }
}
