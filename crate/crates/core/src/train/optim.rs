use crate::error::{Error, Result};
use crate::model::WeightStore;
use crate::tensor::{fmt_shape, Scalar, Tensor};

/// Smallest probability fed to the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Mean over rows of `−Σ y·ln(max(p, 1e-12))`. Both tensors are read as
/// rows of their last axis.
pub fn cross_entropy<T: Scalar>(probs: &Tensor<T>, onehot: &Tensor<T>) -> Result<f64> {
    if probs.shape() != onehot.shape() || probs.rank() == 0 {
        return Err(Error::Shape(format!(
            "cross entropy: probabilities {} vs labels {}",
            fmt_shape(probs.shape()),
            fmt_shape(onehot.shape())
        )));
    }
    let k = *probs.shape().last().expect("rank checked");
    let rows = probs.len() / k;
    let total: f64 = probs
        .data()
        .iter()
        .zip(onehot.data())
        .map(|(&p, &y)| -y.to_f64_lossy() * p.to_f64_lossy().max(PROB_FLOOR).ln())
        .sum();
    Ok(total / rows as f64)
}

/// Adam moments for every parameter it has seen.
#[derive(Debug, Clone)]
pub struct AdamState<T = f32> {
    pub m: WeightStore<T>,
    pub v: WeightStore<T>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self {
            m: WeightStore::new(),
            v: WeightStore::new(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient:
///
/// ```text
/// m ← β1·m + (1−β1)·g        v ← β2·v + (1−β2)·g²
/// θ ← θ − lr · (m / (1−β1ᵗ)) / (√(v / (1−β2ᵗ)) + ε)
/// ```
///
/// Parameters without a gradient are left untouched.
pub fn adam_step<T: Scalar>(
    params: &mut WeightStore<T>,
    grads: &WeightStore<T>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    for (name, g) in grads.iter() {
        let p = params
            .get(name)
            .ok_or_else(|| Error::State(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient of {name} is {} but the parameter is {}",
                fmt_shape(g.shape()),
                fmt_shape(p.shape())
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::of(state.beta1), T::of(state.beta2));
    let (c1, c2) = (
        T::of(1.0 - state.beta1.powi(t)),
        T::of(1.0 - state.beta2.powi(t)),
    );
    let (lr, eps) = (T::of(lr), T::of(state.epsilon));
    for (name, g) in grads.iter() {
        if !state.m.contains(name) {
            state.m.insert(name, Tensor::zeros(g.shape()));
            state.v.insert(name, Tensor::zeros(g.shape()));
        }
        let m = state.m.get_mut(name).expect("inserted").data_mut();
        let v = state.v.get_mut(name).expect("inserted").data_mut();
        let p = params.get_mut(name).expect("checked").data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (T::one() - b1) * gi;
            v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
