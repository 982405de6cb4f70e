use rayon::prelude::*;

use super::{
    backward_samples, expect_same_shape, nhwc, spatial_out, spatial_shape, ConvParams, GradRequest,
    LayerGrads, ParamRole,
};
use crate::error::{Error, Result};
use crate::tensor::{fmt_shape, Scalar, Tensor};

struct Geometry {
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    pad_top: usize,
    pad_left: usize,
}

impl Geometry {
    /// Visits every (output pixel, kernel tap, input pixel) triple that lies
    /// inside the input, passing flat offsets of the channel vectors.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for oy in 0..self.oh {
            for ky in 0..self.kh {
                let Some(iy) = (oy * self.stride + ky)
                    .checked_sub(self.pad_top)
                    .filter(|&v| v < self.h)
                else {
                    continue;
                };
                for ox in 0..self.ow {
                    let out_off = (oy * self.ow + ox) * self.c;
                    for kx in 0..self.kw {
                        let Some(ix) = (ox * self.stride + kx)
                            .checked_sub(self.pad_left)
                            .filter(|&v| v < self.w)
                        else {
                            continue;
                        };
                        f(out_off, (ky * self.kw + kx) * self.c, (iy * self.w + ix) * self.c);
                    }
                }
            }
        }
    }
}

fn geometry<T: Scalar>(input: &Tensor<T>, p: &ConvParams<T>) -> Result<(usize, Geometry)> {
    p.check_stride()?;
    let (n, h, w, c) = nhwc(input, "depthwise_conv2d")?;
    let [kh, kw, kc] = *p.kernel.shape() else {
        return Err(Error::Shape(format!(
            "depthwise kernel must be kh×kw×C, got {}",
            fmt_shape(p.kernel.shape())
        )));
    };
    if kc != c {
        return Err(Error::Shape(format!(
            "depthwise_conv2d: input has {c} channels but kernel {} expects {kc}",
            fmt_shape(p.kernel.shape())
        )));
    }
    p.check_bias(c)?;
    let (oh, pad_top) = spatial_out(h, kh, p.stride, p.padding)?;
    let (ow, pad_left) = spatial_out(w, kw, p.stride, p.padding)?;
    Ok((
        n,
        Geometry {
            h,
            w,
            c,
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

/// Convolves each input channel with its own `kh×kw` filter.
pub fn depthwise_conv2d<T: Scalar>(input: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let (n, g) = geometry(input, p)?;
    let c = g.c;
    let in_len = g.h * g.w * c;
    let out_len = g.oh * g.ow * c;
    let (x, k) = (input.data(), p.kernel.data());
    let mut out = vec![T::zero(); n * out_len];
    out.par_chunks_mut(out_len).enumerate().for_each(|(s, y)| {
        let xs = &x[s * in_len..][..in_len];
        g.for_each_tap(|o, kt, i| {
            let (yo, xi, kk) = (&mut y[o..o + c], &xs[i..i + c], &k[kt..kt + c]);
            for ch in 0..c {
                yo[ch] += xi[ch] * kk[ch];
            }
        });
        if let Some(b) = &p.bias {
            for row in y.chunks_exact_mut(c) {
                for (v, &bv) in row.iter_mut().zip(b.data()) {
                    *v += bv;
                }
            }
        }
    });
    Ok(Tensor::from_parts(
        spatial_shape(input.rank(), n, g.oh, g.ow, c),
        out,
    ))
}

pub fn depthwise_conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor<T>,
    want: GradRequest,
) -> Result<LayerGrads<T>> {
    let (n, g) = geometry(input, p)?;
    let c = g.c;
    expect_same_shape(
        grad_out,
        &spatial_shape(input.rank(), n, g.oh, g.ow, c),
        "depthwise_conv2d",
    )?;
    let in_len = g.h * g.w * c;
    let out_len = g.oh * g.ow * c;
    let k_len = p.kernel.len();
    let has_bias = p.bias.is_some();
    let grad_len = if want.params {
        k_len + if has_bias { c } else { 0 }
    } else {
        0
    };
    let (x, dy_all, k) = (input.data(), grad_out.data(), p.kernel.data());
    let (dx, grads) = backward_samples(n, in_len, grad_len, want.input, |s, mut dx, acc| {
        let xs = &x[s * in_len..][..in_len];
        let dy = &dy_all[s * out_len..][..out_len];
        g.for_each_tap(|o, kt, i| {
            let dyo = &dy[o..o + c];
            if want.params {
                let (dk, xi) = (&mut acc[kt..kt + c], &xs[i..i + c]);
                for ch in 0..c {
                    dk[ch] += dyo[ch] * xi[ch];
                }
            }
            if let Some(dx) = dx.as_deref_mut() {
                let (dxi, kk) = (&mut dx[i..i + c], &k[kt..kt + c]);
                for ch in 0..c {
                    dxi[ch] += dyo[ch] * kk[ch];
                }
            }
        });
        if want.params && has_bias {
            let db = &mut acc[k_len..];
            for row in dy.chunks_exact(c) {
                for (b, &v) in db.iter_mut().zip(row) {
                    *b += v;
                }
            }
        }
    });
    let mut params = Vec::new();
    if want.params {
        let mut grads = grads;
        let db = grads.split_off(k_len);
        params.push((
            ParamRole::DepthwiseKernel,
            Tensor::from_parts(p.kernel.shape().to_vec(), grads),
        ));
        if has_bias {
            params.push((ParamRole::Bias, Tensor::from_parts(vec![c], db)));
        }
    }
    Ok(LayerGrads {
        input: dx.map(|d| Tensor::from_parts(input.shape().to_vec(), d)),
        params,
    })
}
