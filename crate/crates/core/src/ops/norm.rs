use super::{expect_same_shape, GradRequest, LayerGrads, Mode, ParamRole};
use crate::error::{Error, Result};
use crate::tensor::{fmt_shape, Scalar, Tensor};

/// Per-channel affine normalization parameters and running statistics.
#[derive(Debug, Clone)]
pub struct BatchNormParams<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub moving_mean: Tensor<T>,
    pub moving_var: Tensor<T>,
    pub epsilon: T,
    /// Weight of the old running statistic in each train-mode update.
    pub momentum: T,
}

/// Batch statistics produced by a train-mode forward pass.
#[derive(Debug, Clone)]
pub struct MovingStats<T = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// What the backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T = f32> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mode: Mode,
}

impl<T: Scalar> BatchNormParams<T> {
    /// Identity statistics: unit scale, zero shift, zero mean, unit variance.
    pub fn identity(channels: usize, epsilon: T, momentum: T) -> Self {
        Self {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            moving_mean: Tensor::zeros(&[channels]),
            moving_var: Tensor::full(&[channels], T::one()),
            epsilon,
            momentum,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn validate(&self, channels: usize) -> Result<()> {
        let c = self.gamma.len();
        for (name, t) in [
            ("beta", &self.beta),
            ("moving_mean", &self.moving_mean),
            ("moving_var", &self.moving_var),
        ] {
            if t.len() != c {
                return Err(Error::Shape(format!(
                    "batchnorm {name} {} does not match gamma length {c}",
                    fmt_shape(t.shape())
                )));
            }
        }
        if c != channels {
            return Err(Error::Shape(format!(
                "batchnorm has {c} channels, input has {channels}"
            )));
        }
        if !(self.epsilon > T::zero()) {
            return Err(Error::Config("batchnorm epsilon must be positive".into()));
        }
        Ok(())
    }

    /// Folds batch statistics into the running mean and variance.
    pub fn apply_update(&mut self, stats: &MovingStats<T>) -> Result<()> {
        let m = self.momentum;
        let keep = T::one() - m;
        for (mm, &bm) in self.moving_mean.data_mut().iter_mut().zip(&stats.mean) {
            *mm = m * *mm + keep * bm;
        }
        for (i, (mv, &bv)) in self
            .moving_var
            .data_mut()
            .iter_mut()
            .zip(&stats.var)
            .enumerate()
        {
            *mv = m * *mv + keep * bv;
            if !mv.is_finite() || *mv + self.epsilon <= T::zero() {
                return Err(Error::Numeric(format!(
                    "batchnorm moving variance of channel {i} became {mv}"
                )));
            }
        }
        Ok(())
    }
}

/// Normalizes over every axis except the last (channel) one.
///
/// Train mode uses the batch statistics, which are returned so the caller
/// can fold them into the running averages. Infer mode uses the running
/// statistics and returns no update.
pub fn batchnorm_forward<T: Scalar>(
    input: &Tensor<T>,
    p: &BatchNormParams<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BatchNormCache<T>, Option<MovingStats<T>>)> {
    let c = *input
        .shape()
        .last()
        .ok_or_else(|| Error::Shape("batchnorm on a scalar".into()))?;
    p.validate(c)?;
    let x = input.data();
    let count = x.len() / c;

    let (mean, var, stats) = match mode {
        Mode::Train => {
            let mut sum = vec![0.0f64; c];
            for row in x.chunks_exact(c) {
                for (s, &v) in sum.iter_mut().zip(row) {
                    *s += v.to_f64_lossy();
                }
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
            let mut sq = vec![0.0f64; c];
            for row in x.chunks_exact(c) {
                for ((s, &v), &m) in sq.iter_mut().zip(row).zip(&mean) {
                    let d = v.to_f64_lossy() - m;
                    *s += d * d;
                }
            }
            let var: Vec<T> = sq.iter().map(|s| T::of(s / count as f64)).collect();
            let mean: Vec<T> = mean.into_iter().map(T::of).collect();
            let stats = MovingStats {
                mean: mean.clone(),
                var: var.clone(),
            };
            (mean, var, Some(stats))
        }
        Mode::Infer => (
            p.moving_mean.data().to_vec(),
            p.moving_var.data().to_vec(),
            None,
        ),
    };

    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| T::one() / (v + p.epsilon).sqrt())
        .collect();
    let mut normalized = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for ((xr, nr), yr) in x
        .chunks_exact(c)
        .zip(normalized.chunks_exact_mut(c))
        .zip(out.chunks_exact_mut(c))
    {
        for ch in 0..c {
            let xh = (xr[ch] - mean[ch]) * inv_std[ch];
            nr[ch] = xh;
            yr[ch] = xh * p.gamma.data()[ch] + p.beta.data()[ch];
        }
    }
    let out = Tensor::from_parts(input.shape().to_vec(), out);
    out.check_finite("batchnorm")?;
    Ok((
        out,
        BatchNormCache {
            normalized: Tensor::from_parts(input.shape().to_vec(), normalized),
            inv_std,
            mode,
        },
        stats,
    ))
}

/// Forward pass that also updates the running statistics in train mode.
pub fn batchnorm<T: Scalar>(
    input: &Tensor<T>,
    p: &mut BatchNormParams<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    let (out, _, stats) = batchnorm_forward(input, p, mode)?;
    if let Some(stats) = stats {
        p.apply_update(&stats)?;
    }
    Ok(out)
}

pub fn batchnorm_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
    want: GradRequest,
) -> Result<LayerGrads<T>> {
    expect_same_shape(grad_out, cache.normalized.shape(), "batchnorm")?;
    let c = gamma.len();
    let dy = grad_out.data();
    let xh = cache.normalized.data();
    let count = dy.len() / c;

    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (dr, xr) in dy.chunks_exact(c).zip(xh.chunks_exact(c)) {
        for ch in 0..c {
            dbeta[ch] += dr[ch];
            dgamma[ch] += dr[ch] * xr[ch];
        }
    }

    let input = want.input.then(|| {
        let g = gamma.data();
        let mut dx = vec![T::zero(); dy.len()];
        match cache.mode {
            Mode::Infer => {
                for (dxr, dr) in dx.chunks_exact_mut(c).zip(dy.chunks_exact(c)) {
                    for ch in 0..c {
                        dxr[ch] = dr[ch] * g[ch] * cache.inv_std[ch];
                    }
                }
            }
            Mode::Train => {
                let m = T::of(count as f64);
                for ((dxr, dr), xr) in dx
                    .chunks_exact_mut(c)
                    .zip(dy.chunks_exact(c))
                    .zip(xh.chunks_exact(c))
                {
                    for ch in 0..c {
                        dxr[ch] = g[ch] * cache.inv_std[ch] / m
                            * (m * dr[ch] - dbeta[ch] - xr[ch] * dgamma[ch]);
                    }
                }
            }
        }
        Tensor::from_parts(grad_out.shape().to_vec(), dx)
    });

    let params = if want.params {
        vec![
            (ParamRole::Gamma, Tensor::from_parts(vec![c], dgamma)),
            (ParamRole::Beta, Tensor::from_parts(vec![c], dbeta)),
        ]
    } else {
        Vec::new()
    };
    Ok(LayerGrads { input, params })
}
