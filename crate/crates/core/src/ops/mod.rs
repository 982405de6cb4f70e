//! Forward and backward kernels for every layer kind the models use.
//!
//! Spatial ops take `H×W×C` or batched `N×H×W×C` tensors and return the same
//! rank they were given. Backward functions are hand-derived; each returns a
//! [`LayerGrads`] with the input gradient and one tensor per parameter.
//!
//! Samples in a batch are processed in parallel. Parameter gradients are
//! reduced over fixed-size sample chunks in index order, so results do not
//! depend on the number of worker threads.

mod activation;
mod conv;
mod dense;
mod depthwise;
mod dropout;
mod norm;
mod pool;
mod softmax;

pub use activation::{activation, activation_backward, Activation};
pub use conv::{conv2d, conv2d_backward, pointwise_conv2d, pointwise_conv2d_backward};
pub use dense::{dense, dense_backward, DenseParams};
pub use depthwise::{depthwise_conv2d, depthwise_conv2d_backward};
pub use dropout::{dropout, dropout_backward, dropout_mask};
pub use norm::{
    batchnorm, batchnorm_backward, batchnorm_forward, BatchNormCache, BatchNormParams,
    MovingStats,
};
pub use pool::{global_avg_pool, global_avg_pool_backward, maxpool2d, maxpool2d_backward, PoolCache};
pub use softmax::{softmax, softmax_backward, softmax_cross_entropy_grad};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{fmt_shape, Scalar, Tensor};

/// Train mode uses batch statistics and stochastic dropout; infer mode is
/// deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding so that `out = ceil(in / stride)`.
    Same,
    /// No padding, `out = (in - k) / stride + 1`.
    Valid,
}

/// Kernel and stride for standard (`kh×kw×inC×outC`), depthwise (`kh×kw×C`)
/// and pointwise (`1×1×inC×outC`) convolutions.
#[derive(Debug, Clone)]
pub struct ConvParams<T = f32> {
    pub kernel: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: Padding,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(kernel: Tensor<T>, stride: usize, padding: Padding) -> Self {
        Self {
            kernel,
            bias: None,
            stride,
            padding,
        }
    }

    pub fn with_bias(mut self, bias: Tensor<T>) -> Self {
        self.bias = Some(bias);
        self
    }

    fn check_stride(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::Config("convolution stride must be positive".into()));
        }
        Ok(())
    }

    fn check_bias(&self, channels: usize) -> Result<()> {
        match &self.bias {
            Some(b) if b.len() != channels => Err(Error::Shape(format!(
                "bias {} does not match {channels} output channels",
                fmt_shape(b.shape())
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Kernel,
    DepthwiseKernel,
    Bias,
    Gamma,
    Beta,
    MovingMean,
    MovingVariance,
}

impl ParamRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamRole::Kernel => "kernel",
            ParamRole::DepthwiseKernel => "depthwise_kernel",
            ParamRole::Bias => "bias",
            ParamRole::Gamma => "gamma",
            ParamRole::Beta => "beta",
            ParamRole::MovingMean => "moving_mean",
            ParamRole::MovingVariance => "moving_variance",
        }
    }
}

/// Gradients produced by one backward call.
#[derive(Debug, Clone)]
pub struct LayerGrads<T = f32> {
    pub input: Option<Tensor<T>>,
    pub params: Vec<(ParamRole, Tensor<T>)>,
}

impl<T: Scalar> LayerGrads<T> {
    pub fn param(&self, role: ParamRole) -> Option<&Tensor<T>> {
        self.params.iter().find(|(r, _)| *r == role).map(|(_, t)| t)
    }

    pub fn input_grad(&self) -> Result<&Tensor<T>> {
        self.input
            .as_ref()
            .ok_or_else(|| Error::State("input gradient was not requested".into()))
    }
}

/// Which gradients a backward call should produce. Frozen layers skip the
/// parameter gradients; the first layer of a backward range skips the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradRequest {
    pub input: bool,
    pub params: bool,
}

impl GradRequest {
    pub const ALL: GradRequest = GradRequest {
        input: true,
        params: true,
    };
}

/// Output size and leading pad along one spatial axis.
pub(crate) fn spatial_out(
    len: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = len.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(len);
            Ok((out, total / 2))
        }
        Padding::Valid => {
            if kernel > len {
                return Err(Error::Shape(format!(
                    "kernel {kernel} larger than input extent {len} with valid padding"
                )));
            }
            Ok(((len - kernel) / stride + 1, 0))
        }
    }
}

/// `(n, h, w, c)` of a rank-3 or rank-4 tensor; rank 3 means one sample.
pub(crate) fn nhwc<T: Scalar>(t: &Tensor<T>, op: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [h, w, c] => Ok((1, h, w, c)),
        [n, h, w, c] => Ok((n, h, w, c)),
        _ => Err(Error::Shape(format!(
            "{op} expects H×W×C or N×H×W×C input, got {}",
            fmt_shape(t.shape())
        ))),
    }
}

pub(crate) fn spatial_shape(rank: usize, n: usize, h: usize, w: usize, c: usize) -> Vec<usize> {
    if rank == 3 {
        vec![h, w, c]
    } else {
        vec![n, h, w, c]
    }
}

pub(crate) fn expect_same_shape<T: Scalar>(
    grad: &Tensor<T>,
    want: &[usize],
    op: &str,
) -> Result<()> {
    if grad.shape() != want {
        return Err(Error::Shape(format!(
            "{op} backward: gradient {} does not match output {}",
            fmt_shape(grad.shape()),
            fmt_shape(want)
        )));
    }
    Ok(())
}

/// Samples per partial sum when reducing parameter gradients.
const GRAD_CHUNK: usize = 4;

/// Runs `f(sample, dx_slice, grad_acc)` over all samples. Input-gradient
/// slices are disjoint per sample; parameter gradients are accumulated per
/// chunk of [`GRAD_CHUNK`] samples and the partials summed in chunk order.
pub(crate) fn backward_samples<T, F>(
    n: usize,
    in_len: usize,
    grad_len: usize,
    want_input: bool,
    f: F,
) -> (Option<Vec<T>>, Vec<T>)
where
    T: Scalar,
    F: Fn(usize, Option<&mut [T]>, &mut [T]) + Sync,
{
    let chunks = n.div_ceil(GRAD_CHUNK);
    let run_chunk = |chunk: usize, mut dx: Option<&mut [T]>| {
        let mut acc = vec![T::zero(); grad_len];
        let first = chunk * GRAD_CHUNK;
        for s in first..n.min(first + GRAD_CHUNK) {
            let slot = dx
                .as_deref_mut()
                .map(|d| &mut d[(s - first) * in_len..(s - first + 1) * in_len]);
            f(s, slot, &mut acc);
        }
        acc
    };
    let (dx, partials): (Option<Vec<T>>, Vec<Vec<T>>) = if want_input {
        let mut dx = vec![T::zero(); n * in_len];
        let partials = dx
            .par_chunks_mut(GRAD_CHUNK * in_len)
            .enumerate()
            .map(|(chunk, d)| run_chunk(chunk, Some(d)))
            .collect();
        (Some(dx), partials)
    } else {
        let partials = (0..chunks)
            .into_par_iter()
            .map(|chunk| run_chunk(chunk, None))
            .collect();
        (None, partials)
    };
    let mut total = vec![T::zero(); grad_len];
    for p in &partials {
        for (t, &v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    (dx, total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_is_ceil_division() {
        for len in 1..40 {
            for stride in 1..=2 {
                for k in [1, 3] {
                    let (out, _) = spatial_out(len, k, stride, Padding::Same).unwrap();
                    assert_eq!(out, len.div_ceil(stride));
                }
            }
        }
        assert_eq!(spatial_out(224, 3, 2, Padding::Same).unwrap(), (112, 0));
        assert_eq!(spatial_out(112, 3, 1, Padding::Same).unwrap(), (112, 1));
        assert_eq!(spatial_out(5, 3, 1, Padding::Valid).unwrap(), (3, 0));
        assert!(spatial_out(2, 3, 1, Padding::Valid).is_err());
    }

    #[test]
    fn chunked_reduction_is_ordered() {
        let (dx, g) = backward_samples::<f64, _>(10, 2, 1, true, |s, dx, acc| {
            let dx = dx.unwrap();
            dx[0] = s as f64;
            dx[1] = -(s as f64);
            acc[0] += s as f64;
        });
        let dx = dx.unwrap();
        assert_eq!(dx[2 * 7], 7.0);
        assert_eq!(dx[2 * 7 + 1], -7.0);
        assert_eq!(g[0], 45.0);
    }
}
