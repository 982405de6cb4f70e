use rayon::prelude::*;

use super::{expect_same_shape, nhwc, spatial_shape, LayerGrads};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Flat input offset of the winning element for every max-pool output.
#[derive(Debug, Clone)]
pub struct PoolCache {
    pub input_shape: Vec<usize>,
    pub argmax: Vec<usize>,
}

/// Channelwise maximum over `window×window` patches, no padding.
pub fn maxpool2d<T: Scalar>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, PoolCache)> {
    let (n, h, w, c) = nhwc(input, "maxpool2d")?;
    if window == 0 || stride == 0 {
        return Err(Error::Config("pool window and stride must be positive".into()));
    }
    if window > h || window > w {
        return Err(Error::Shape(format!(
            "pool window {window} larger than {h}×{w} input"
        )));
    }
    let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
    let (in_len, out_len) = (h * w * c, oh * ow * c);
    let x = input.data();
    let mut out = vec![T::zero(); n * out_len];
    let mut argmax = vec![0usize; n * out_len];
    out.par_chunks_mut(out_len)
        .zip(argmax.par_chunks_mut(out_len))
        .enumerate()
        .for_each(|(s, (y, am))| {
            let base = s * in_len;
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = base + ((oy * stride) * w + ox * stride) * c + ch;
                        for ky in 0..window {
                            for kx in 0..window {
                                let i = base + ((oy * stride + ky) * w + ox * stride + kx) * c + ch;
                                if x[i] > x[best] {
                                    best = i;
                                }
                            }
                        }
                        let o = (oy * ow + ox) * c + ch;
                        y[o] = x[best];
                        am[o] = best;
                    }
                }
            }
        });
    Ok((
        Tensor::from_parts(spatial_shape(input.rank(), n, oh, ow, c), out),
        PoolCache {
            input_shape: input.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool2d_backward<T: Scalar>(
    cache: &PoolCache,
    grad_out: &Tensor<T>,
) -> Result<LayerGrads<T>> {
    if grad_out.len() != cache.argmax.len() {
        return Err(Error::Shape(format!(
            "maxpool2d backward: gradient has {} elements, expected {}",
            grad_out.len(),
            cache.argmax.len()
        )));
    }
    let len: usize = cache.input_shape.iter().product();
    let mut dx = vec![T::zero(); len];
    for (&i, &g) in cache.argmax.iter().zip(grad_out.data()) {
        dx[i] += g;
    }
    Ok(LayerGrads {
        input: Some(Tensor::from_parts(cache.input_shape.clone(), dx)),
        params: Vec::new(),
    })
}

/// Per-channel spatial mean; `H×W×C` becomes `1×1×C`.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, h, w, c) = nhwc(input, "global_avg_pool")?;
    let area = T::of((h * w) as f64);
    let mut out = vec![T::zero(); n * c];
    for (s, y) in out.chunks_exact_mut(c).enumerate() {
        for px in input.data()[s * h * w * c..(s + 1) * h * w * c].chunks_exact(c) {
            for (acc, &v) in y.iter_mut().zip(px) {
                *acc += v;
            }
        }
        for v in y.iter_mut() {
            *v = *v / area;
        }
    }
    Ok(Tensor::from_parts(spatial_shape(input.rank(), n, 1, 1, c), out))
}

pub fn global_avg_pool_backward<T: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
) -> Result<LayerGrads<T>> {
    let (n, h, w, c) = match *input_shape {
        [h, w, c] => (1, h, w, c),
        [n, h, w, c] => (n, h, w, c),
        _ => return Err(Error::Shape("global_avg_pool backward needs rank 3 or 4".into())),
    };
    expect_same_shape(
        grad_out,
        &spatial_shape(input_shape.len(), n, 1, 1, c),
        "global_avg_pool",
    )?;
    let area = T::of((h * w) as f64);
    let mut dx = vec![T::zero(); n * h * w * c];
    for (s, g) in grad_out.data().chunks_exact(c).enumerate() {
        for px in dx[s * h * w * c..(s + 1) * h * w * c].chunks_exact_mut(c) {
            for (d, &gv) in px.iter_mut().zip(g) {
                *d = gv / area;
            }
        }
    }
    Ok(LayerGrads {
        input: Some(Tensor::from_parts(input_shape.to_vec(), dx)),
        params: Vec::new(),
    })
}
