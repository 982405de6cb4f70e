use serde::{Deserialize, Serialize};

use super::{expect_same_shape, LayerGrads};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// `min(max(0, x), 6)`
    Relu6,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Relu6 => x.max(T::zero()).min(T::of(6.0)),
        }
    }

    /// Derivative at `x`; zero at the kinks.
    #[inline]
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        let active = match self {
            Activation::Relu => x > T::zero(),
            Activation::Relu6 => x > T::zero() && x < T::of(6.0),
        };
        if active {
            T::one()
        } else {
            T::zero()
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Relu6 => "relu6",
        }
    }
}

pub fn activation<T: Scalar>(input: &Tensor<T>, kind: Activation) -> Tensor<T> {
    Tensor::from_parts(
        input.shape().to_vec(),
        input.data().iter().map(|&x| kind.apply(x)).collect(),
    )
}

pub fn activation_backward<T: Scalar>(
    input: &Tensor<T>,
    kind: Activation,
    grad_out: &Tensor<T>,
) -> Result<LayerGrads<T>> {
    expect_same_shape(grad_out, input.shape(), kind.name())?;
    let dx = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| g * kind.derivative(x))
        .collect();
    Ok(LayerGrads {
        input: Some(Tensor::from_parts(input.shape().to_vec(), dx)),
        params: Vec::new(),
    })
}
