use super::{GradRequest, LayerGrads, ParamRole};
use crate::error::{Error, Result};
use crate::tensor::{fmt_shape, gemm, Scalar, Tensor, Trans};

/// Fully connected layer acting on the last axis: `y = x·W + b`.
#[derive(Debug, Clone)]
pub struct DenseParams<T = f32> {
    /// `in×out`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> DenseParams<T> {
    fn dims(&self) -> Result<(usize, usize)> {
        match *self.weight.shape() {
            [i, o] if self.bias.len() == o => Ok((i, o)),
            _ => Err(Error::Shape(format!(
                "dense weight {} and bias {} are inconsistent",
                fmt_shape(self.weight.shape()),
                fmt_shape(self.bias.shape())
            ))),
        }
    }
}

fn rows_of<T: Scalar>(input: &Tensor<T>, fan_in: usize) -> Result<usize> {
    match input.shape().last() {
        Some(&last) if last == fan_in => Ok(input.len() / fan_in),
        _ => Err(Error::Shape(format!(
            "dense expects last axis {fan_in}, got input {}",
            fmt_shape(input.shape())
        ))),
    }
}

pub fn dense<T: Scalar>(input: &Tensor<T>, p: &DenseParams<T>) -> Result<Tensor<T>> {
    let (fan_in, fan_out) = p.dims()?;
    let rows = rows_of(input, fan_in)?;
    let mut out = vec![T::zero(); rows * fan_out];
    for row in out.chunks_exact_mut(fan_out) {
        row.copy_from_slice(p.bias.data());
    }
    gemm(rows, fan_in, fan_out, input.data(), Trans::No, p.weight.data(), Trans::No, &mut out, true);
    let mut shape = input.shape().to_vec();
    *shape.last_mut().expect("rank checked") = fan_out;
    Ok(Tensor::from_parts(shape, out))
}

pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    p: &DenseParams<T>,
    grad_out: &Tensor<T>,
    want: GradRequest,
) -> Result<LayerGrads<T>> {
    let (fan_in, fan_out) = p.dims()?;
    let rows = rows_of(input, fan_in)?;
    if grad_out.len() != rows * fan_out || grad_out.shape().last() != Some(&fan_out) {
        return Err(Error::Shape(format!(
            "dense backward: gradient {} does not match {rows} rows of {fan_out}",
            fmt_shape(grad_out.shape())
        )));
    }
    let dy = grad_out.data();
    let input_grad = want.input.then(|| {
        let mut dx = vec![T::zero(); rows * fan_in];
        gemm(rows, fan_out, fan_in, dy, Trans::No, p.weight.data(), Trans::Yes, &mut dx, false);
        Tensor::from_parts(input.shape().to_vec(), dx)
    });
    let mut params = Vec::new();
    if want.params {
        let mut dw = vec![T::zero(); fan_in * fan_out];
        gemm(fan_in, rows, fan_out, input.data(), Trans::Yes, dy, Trans::No, &mut dw, false);
        let mut db = vec![T::zero(); fan_out];
        for row in dy.chunks_exact(fan_out) {
            for (b, &v) in db.iter_mut().zip(row) {
                *b += v;
            }
        }
        params.push((ParamRole::Kernel, Tensor::from_parts(vec![fan_in, fan_out], dw)));
        params.push((ParamRole::Bias, Tensor::from_parts(vec![fan_out], db)));
    }
    Ok(LayerGrads {
        input: input_grad,
        params,
    })
}
