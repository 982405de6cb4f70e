use rayon::prelude::*;

use super::{
    backward_samples, expect_same_shape, nhwc, spatial_out, spatial_shape, ConvParams, GradRequest,
    LayerGrads, ParamRole,
};
use crate::error::{Error, Result};
use crate::tensor::{fmt_shape, gemm, Scalar, Tensor, Trans};

/// Spatial bookkeeping shared by forward and backward.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    pad_top: usize,
    pad_left: usize,
}

impl Geometry {
    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// A 1×1 stride-1 unpadded kernel reads the input as its own im2col matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }

    /// Input coordinate hit by output `o` and kernel tap `k`, if in bounds.
    #[inline]
    fn source(o: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
        let pos = (o * stride + k).checked_sub(pad)?;
        (pos < len).then_some(pos)
    }

    /// Unfolds one sample into `[oh·ow, kh·kw·cin]`, zero-filling the padding.
    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let plen = self.patch_len();
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &mut cols[(oy * self.ow + ox) * plen..][..plen];
                for ky in 0..self.kh {
                    let iy = Self::source(oy, ky, self.stride, self.pad_top, self.h);
                    for kx in 0..self.kw {
                        let dst = &mut row[(ky * self.kw + kx) * self.cin..][..self.cin];
                        match (iy, Self::source(ox, kx, self.stride, self.pad_left, self.w)) {
                            (Some(iy), Some(ix)) => dst
                                .copy_from_slice(&x[(iy * self.w + ix) * self.cin..][..self.cin]),
                            _ => dst.fill(T::zero()),
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `[oh·ow, kh·kw·cin]` patch gradients back onto the input.
    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let plen = self.patch_len();
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &cols[(oy * self.ow + ox) * plen..][..plen];
                for ky in 0..self.kh {
                    let Some(iy) = Self::source(oy, ky, self.stride, self.pad_top, self.h) else {
                        continue;
                    };
                    for kx in 0..self.kw {
                        let Some(ix) = Self::source(ox, kx, self.stride, self.pad_left, self.w)
                        else {
                            continue;
                        };
                        let src = &row[(ky * self.kw + kx) * self.cin..][..self.cin];
                        let dst = &mut dx[(iy * self.w + ix) * self.cin..][..self.cin];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

fn geometry<T: Scalar>(
    input: &Tensor<T>,
    p: &ConvParams<T>,
    op: &str,
) -> Result<(usize, usize, Geometry)> {
    p.check_stride()?;
    let (n, h, w, cin) = nhwc(input, op)?;
    let [kh, kw, kin, cout] = *p.kernel.shape() else {
        return Err(Error::Shape(format!(
            "{op} kernel must be kh×kw×inC×outC, got {}",
            fmt_shape(p.kernel.shape())
        )));
    };
    if kin != cin {
        return Err(Error::Shape(format!(
            "{op}: input has {cin} channels but kernel {} expects {kin}",
            fmt_shape(p.kernel.shape())
        )));
    }
    p.check_bias(cout)?;
    let (oh, pad_top) = spatial_out(h, kh, p.stride, p.padding)?;
    let (ow, pad_left) = spatial_out(w, kw, p.stride, p.padding)?;
    Ok((
        n,
        cout,
        Geometry {
            h,
            w,
            cin,
            kh,
            kw,
            stride: p.stride,
            oh,
            ow,
            pad_top,
            pad_left,
        },
    ))
}

/// Cross-correlation of an `H×W×inC` input with a `kh×kw×inC×outC` kernel.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let (n, cout, g) = geometry(input, p, "conv2d")?;
    let in_len = g.h * g.w * g.cin;
    let out_len = g.positions() * cout;
    let kernel = p.kernel.data();
    let x = input.data();
    let mut out = vec![T::zero(); n * out_len];
    out.par_chunks_mut(out_len)
        .enumerate()
        .for_each_init(Vec::new, |cols, (s, y)| {
            let xs = &x[s * in_len..][..in_len];
            if g.is_pointwise() {
                gemm(g.positions(), g.cin, cout, xs, Trans::No, kernel, Trans::No, y, false);
            } else {
                cols.resize(g.positions() * g.patch_len(), T::zero());
                g.im2col(xs, cols);
                gemm(
                    g.positions(),
                    g.patch_len(),
                    cout,
                    cols,
                    Trans::No,
                    kernel,
                    Trans::No,
                    y,
                    false,
                );
            }
            if let Some(b) = &p.bias {
                for row in y.chunks_exact_mut(cout) {
                    for (v, &bv) in row.iter_mut().zip(b.data()) {
                        *v += bv;
                    }
                }
            }
        });
    Ok(Tensor::from_parts(
        spatial_shape(input.rank(), n, g.oh, g.ow, cout),
        out,
    ))
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor<T>,
    want: GradRequest,
) -> Result<LayerGrads<T>> {
    let (n, cout, g) = geometry(input, p, "conv2d")?;
    expect_same_shape(
        grad_out,
        &spatial_shape(input.rank(), n, g.oh, g.ow, cout),
        "conv2d",
    )?;
    let in_len = g.h * g.w * g.cin;
    let out_len = g.positions() * cout;
    let k_len = p.kernel.len();
    let has_bias = p.bias.is_some();
    let grad_len = if want.params {
        k_len + if has_bias { cout } else { 0 }
    } else {
        0
    };
    let (x, dy_all, kernel) = (input.data(), grad_out.data(), p.kernel.data());
    let (dx, grads) = backward_samples(n, in_len, grad_len, want.input, |s, dx, acc| {
        let xs = &x[s * in_len..][..in_len];
        let dy = &dy_all[s * out_len..][..out_len];
        let pointwise = g.is_pointwise();
        let cols_buf;
        let cols: &[T] = if pointwise || !want.params {
            xs
        } else {
            let mut c = vec![T::zero(); g.positions() * g.patch_len()];
            g.im2col(xs, &mut c);
            cols_buf = c;
            &cols_buf
        };
        if want.params {
            let (dk, db) = acc.split_at_mut(k_len);
            gemm(g.patch_len(), g.positions(), cout, cols, Trans::Yes, dy, Trans::No, dk, true);
            if has_bias {
                for row in dy.chunks_exact(cout) {
                    for (b, &v) in db.iter_mut().zip(row) {
                        *b += v;
                    }
                }
            }
        }
        if let Some(dx) = dx {
            if pointwise {
                gemm(g.positions(), cout, g.cin, dy, Trans::No, kernel, Trans::Yes, dx, false);
            } else {
                let mut dcols = vec![T::zero(); g.positions() * g.patch_len()];
                gemm(
                    g.positions(),
                    cout,
                    g.patch_len(),
                    dy,
                    Trans::No,
                    kernel,
                    Trans::Yes,
                    &mut dcols,
                    false,
                );
                g.col2im(&dcols, dx);
            }
        }
    });
    let mut params = Vec::new();
    if want.params {
        let mut grads = grads;
        let db = grads.split_off(k_len);
        params.push((
            ParamRole::Kernel,
            Tensor::from_parts(p.kernel.shape().to_vec(), grads),
        ));
        if has_bias {
            params.push((ParamRole::Bias, Tensor::from_parts(vec![cout], db)));
        }
    }
    Ok(LayerGrads {
        input: dx.map(|d| Tensor::from_parts(input.shape().to_vec(), d)),
        params,
    })
}

fn check_pointwise<T: Scalar>(p: &ConvParams<T>) -> Result<()> {
    match p.kernel.shape() {
        [1, 1, _, _] => Ok(()),
        other => Err(Error::Shape(format!(
            "pointwise kernel must be 1×1×inC×outC, got {}",
            fmt_shape(other)
        ))),
    }
}

/// 1×1 convolution: a matrix product over the channel axis.
pub fn pointwise_conv2d<T: Scalar>(input: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    check_pointwise(p)?;
    if p.stride != 1 {
        return conv2d(input, p);
    }
    let (n, h, w, cin) = nhwc(input, "pointwise_conv2d")?;
    let cout = p.kernel.shape()[3];
    if p.kernel.shape()[2] != cin {
        return Err(Error::Shape(format!(
            "pointwise_conv2d: input has {cin} channels but kernel {} expects {}",
            fmt_shape(p.kernel.shape()),
            p.kernel.shape()[2]
        )));
    }
    p.check_bias(cout)?;
    let rows = n * h * w;
    let mut out = vec![T::zero(); rows * cout];
    gemm(rows, cin, cout, input.data(), Trans::No, p.kernel.data(), Trans::No, &mut out, false);
    if let Some(b) = &p.bias {
        for row in out.chunks_exact_mut(cout) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
    }
    Ok(Tensor::from_parts(
        spatial_shape(input.rank(), n, h, w, cout),
        out,
    ))
}

pub fn pointwise_conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor<T>,
    want: GradRequest,
) -> Result<LayerGrads<T>> {
    check_pointwise(p)?;
    conv2d_backward(input, p, grad_out, want)
}
