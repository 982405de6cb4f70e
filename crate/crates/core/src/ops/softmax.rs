use super::{expect_same_shape, LayerGrads};
use crate::error::{Error, Result};
use crate::tensor::{fmt_shape, Scalar, Tensor};

fn classes<T: Scalar>(t: &Tensor<T>) -> Result<usize> {
    match t.shape().last() {
        Some(&k) if k >= 2 => Ok(k),
        _ => Err(Error::Shape(format!(
            "softmax needs at least 2 classes on the last axis, got {}",
            fmt_shape(t.shape())
        ))),
    }
}

/// Max-subtracted softmax over the last axis.
pub fn softmax<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let k = classes(input)?;
    let mut out = input.data().to_vec();
    for row in out.chunks_exact_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    let out = Tensor::from_parts(input.shape().to_vec(), out);
    out.check_finite("softmax")?;
    Ok(out)
}

/// Vector-Jacobian product `dx = y ⊙ (dy − ⟨dy, y⟩)` per row.
pub fn softmax_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<LayerGrads<T>> {
    expect_same_shape(grad_out, output.shape(), "softmax")?;
    let k = classes(output)?;
    let mut dx = vec![T::zero(); output.len()];
    for ((d, y), g) in dx
        .chunks_exact_mut(k)
        .zip(output.data().chunks_exact(k))
        .zip(grad_out.data().chunks_exact(k))
    {
        let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
        for i in 0..k {
            d[i] = y[i] * (g[i] - dot);
        }
    }
    Ok(LayerGrads {
        input: Some(Tensor::from_parts(output.shape().to_vec(), dx)),
        params: Vec::new(),
    })
}

/// Gradient of mean categorical cross-entropy with respect to the logits
/// feeding a softmax: `(p − y) / B`.
pub fn softmax_cross_entropy_grad<T: Scalar>(
    probs: &Tensor<T>,
    onehot: &Tensor<T>,
) -> Result<Tensor<T>> {
    let k = classes(probs)?;
    let batch = T::of((probs.len() / k) as f64);
    probs.zip_map(onehot, |p, y| (p - y) / batch)
}
