use rand::Rng;

use super::{expect_same_shape, LayerGrads, Mode};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    Ok(())
}

/// Inverted-dropout multipliers: `0` with probability `rate`, otherwise
/// `1 / (1 − rate)`.
pub fn dropout_mask<T: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    rate: f64,
    rng: &mut R,
) -> Result<Tensor<T>> {
    check_rate(rate)?;
    let keep = T::of(1.0 / (1.0 - rate));
    Ok(Tensor::from_fn(shape, |_| {
        if rng.random::<f64>() < rate {
            T::zero()
        } else {
            keep
        }
    }))
}

/// Returns the output and, in train mode, the mask needed by the backward pass.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(
    input: &Tensor<T>,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    check_rate(rate)?;
    if mode == Mode::Infer || rate == 0.0 {
        return Ok((input.clone(), None));
    }
    let mask = dropout_mask(input.shape(), rate, rng)?;
    let out = input.zip_map(&mask, |x, m| x * m)?;
    Ok((out, Some(mask)))
}

pub fn dropout_backward<T: Scalar>(
    mask: Option<&Tensor<T>>,
    grad_out: &Tensor<T>,
) -> Result<LayerGrads<T>> {
    let input = match mask {
        Some(m) => {
            expect_same_shape(grad_out, m.shape(), "dropout")?;
            grad_out.zip_map(m, |g, m| g * m)?
        }
        None => grad_out.clone(),
    };
    Ok(LayerGrads {
        input: Some(input),
        params: Vec::new(),
    })
}
