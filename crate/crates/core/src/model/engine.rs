use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{param_name, LayerKind, Model, WeightStore};
use crate::error::{Error, Result};
use crate::ops::{self, BatchNormCache, BatchNormParams, ConvParams, DenseParams, GradRequest, LayerGrads, Mode, MovingStats, Padding, ParamRole, PoolCache};
use crate::tensor::{fmt_shape, Scalar, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Layers at or above this index keep what their backward pass needs.
    pub cache_from: usize,
    /// Keep a copy of this layer's output.
    pub capture: Option<usize>,
    /// Seeds the dropout masks.
    pub seed: u64,
}

impl ForwardOptions {
    pub fn infer() -> Self {
        Self {
            mode: Mode::Infer,
            cache_from: usize::MAX,
            capture: None,
            seed: 0,
        }
    }

    pub fn train(cache_from: usize, seed: u64) -> Self {
        Self {
            mode: Mode::Train,
            cache_from,
            capture: None,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub enum LayerCache<T = f32> {
    Input(Tensor<T>),
    BatchNorm(BatchNormCache<T>),
    MaxPool(PoolCache),
    InputShape(Vec<usize>),
    Dense { input: Tensor<T>, pre: Option<Tensor<T>> },
    Dropout(Option<Tensor<T>>),
    Softmax(Tensor<T>),
}

#[derive(Debug, Clone)]
pub struct ForwardPass<T = f32> {
    /// Batched output of the last layer.
    pub output: Tensor<T>,
    pub caches: Vec<Option<LayerCache<T>>>,
    /// Batch statistics from train-mode batchnorm layers, by layer index.
    pub bn_updates: Vec<(usize, MovingStats<T>)>,
    pub captured: Option<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct BackwardPass<T = f32> {
    pub grads: WeightStore<T>,
    /// Gradient with respect to the input of the lowest layer processed.
    pub input_grad: Option<Tensor<T>>,
}

impl<T: Scalar> Model<T> {
    fn conv_params(&self, i: usize) -> Result<ConvParams<T>> {
        let name = &self.layers[i].name;
        Ok(match &self.layers[i].kind {
            LayerKind::Conv {
                stride,
                padding,
                bias,
                ..
            } => {
                let p = ConvParams::new(
                    self.param(&param_name(name, ParamRole::Kernel))?.clone(),
                    *stride,
                    *padding,
                );
                if *bias {
                    p.with_bias(self.param(&param_name(name, ParamRole::Bias))?.clone())
                } else {
                    p
                }
            }
            LayerKind::DwConv {
                stride, padding, ..
            } => ConvParams::new(
                self.param(&param_name(name, ParamRole::DepthwiseKernel))?.clone(),
                *stride,
                *padding,
            ),
            LayerKind::PwConv { .. } => ConvParams::new(
                self.param(&param_name(name, ParamRole::Kernel))?.clone(),
                1,
                Padding::Same,
            ),
            _ => unreachable!("not a convolution"),
        })
    }

    fn bn_params(&self, i: usize) -> Result<BatchNormParams<T>> {
        let name = &self.layers[i].name;
        let LayerKind::BatchNorm { epsilon, momentum } = self.layers[i].kind else {
            unreachable!("not a batchnorm")
        };
        let get = |role| self.param(&param_name(name, role)).cloned();
        Ok(BatchNormParams {
            gamma: get(ParamRole::Gamma)?,
            beta: get(ParamRole::Beta)?,
            moving_mean: get(ParamRole::MovingMean)?,
            moving_var: get(ParamRole::MovingVariance)?,
            epsilon: T::of(epsilon),
            momentum: T::of(momentum),
        })
    }

    fn dense_params(&self, i: usize) -> Result<DenseParams<T>> {
        let name = &self.layers[i].name;
        Ok(DenseParams {
            weight: self.param(&param_name(name, ParamRole::Kernel))?.clone(),
            bias: self.param(&param_name(name, ParamRole::Bias))?.clone(),
        })
    }

    /// Accepts `H×W×C` (one sample) or `N×H×W×C` and returns it batched.
    fn batched_input(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let want = self.layer_input_shape(0);
        let per_sample = match input.rank() {
            r if r == want.len() => input.shape(),
            r if r == want.len() + 1 => &input.shape()[1..],
            _ => &[][..],
        };
        if per_sample != want {
            return Err(Error::Shape(format!(
                "model expects input {} (optionally batched), got {}",
                fmt_shape(want),
                fmt_shape(input.shape())
            )));
        }
        if input.rank() == want.len() {
            let mut shape = vec![1];
            shape.extend_from_slice(want);
            input.reshaped(&shape)
        } else {
            Ok(input.clone())
        }
    }

    /// Runs every layer. Batchnorm in frozen layers always uses its running
    /// statistics; trainable batchnorm uses batch statistics in train mode.
    pub fn forward(&self, input: &Tensor<T>, opts: ForwardOptions) -> Result<ForwardPass<T>> {
        let mut x = self.batched_input(input)?;
        x.check_finite("model input")?;
        let n = self.layers.len();
        let mut caches: Vec<Option<LayerCache<T>>> = vec![None; n];
        let mut bn_updates = Vec::new();
        let mut captured = None;
        for i in 0..n {
            let layer = &self.layers[i];
            let keep = i >= opts.cache_from;
            let (y, cache) = match &layer.kind {
                LayerKind::Conv { .. } => {
                    let y = ops::conv2d(&x, &self.conv_params(i)?)?;
                    (y, keep.then_some(LayerCache::Input(x)))
                }
                LayerKind::DwConv { .. } => {
                    let y = ops::depthwise_conv2d(&x, &self.conv_params(i)?)?;
                    (y, keep.then_some(LayerCache::Input(x)))
                }
                LayerKind::PwConv { .. } => {
                    let y = ops::pointwise_conv2d(&x, &self.conv_params(i)?)?;
                    (y, keep.then_some(LayerCache::Input(x)))
                }
                LayerKind::BatchNorm { .. } => {
                    let mode = if layer.trainable { opts.mode } else { Mode::Infer };
                    let (y, cache, stats) = ops::batchnorm_forward(&x, &self.bn_params(i)?, mode)?;
                    if let Some(stats) = stats {
                        bn_updates.push((i, stats));
                    }
                    (y, keep.then_some(LayerCache::BatchNorm(cache)))
                }
                LayerKind::Activation { function } => {
                    let y = ops::activation(&x, *function);
                    (y, keep.then_some(LayerCache::Input(x)))
                }
                LayerKind::MaxPool { window, stride } => {
                    let (y, cache) = ops::maxpool2d(&x, *window, *stride)?;
                    (y, keep.then_some(LayerCache::MaxPool(cache)))
                }
                LayerKind::Gap => {
                    let y = ops::global_avg_pool(&x)?;
                    (y, keep.then(|| LayerCache::InputShape(x.shape().to_vec())))
                }
                LayerKind::Flatten => {
                    let shape = x.shape().to_vec();
                    let y = x.reshape(&[shape[0], shape[1..].iter().product()])?;
                    (y, keep.then_some(LayerCache::InputShape(shape)))
                }
                LayerKind::Dense { activation, .. } => {
                    let pre = ops::dense(&x, &self.dense_params(i)?)?;
                    match activation {
                        Some(f) => {
                            let y = ops::activation(&pre, *f);
                            (y, keep.then_some(LayerCache::Dense { input: x, pre: Some(pre) }))
                        }
                        None => (pre, keep.then_some(LayerCache::Dense { input: x, pre: None })),
                    }
                }
                LayerKind::Dropout { rate } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(
                        opts.seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                    );
                    let (y, mask) = ops::dropout(&x, *rate, opts.mode, &mut rng)?;
                    (y, keep.then_some(LayerCache::Dropout(mask)))
                }
                LayerKind::Softmax => {
                    let y = ops::softmax(&x)?;
                    let cache = keep.then(|| LayerCache::Softmax(y.clone()));
                    (y, cache)
                }
            };
            if opts.capture == Some(i) {
                captured = Some(y.clone());
            }
            caches[i] = cache;
            x = y;
        }
        Ok(ForwardPass {
            output: x,
            caches,
            bn_updates,
            captured,
        })
    }

    /// Inference on a single sample or a batch; the output is always batched.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(input, ForwardOptions::infer())?.output)
    }

    /// Backpropagates `grad` (the gradient of the output of layer `start`)
    /// down to layer `stop`. Parameter gradients are produced for trainable
    /// layers when `want_params` is set; the input gradient of layer `stop`
    /// only when `need_input_grad` is.
    pub fn backward(
        &self,
        pass: &ForwardPass<T>,
        grad: Tensor<T>,
        start: usize,
        stop: usize,
        want_params: bool,
        need_input_grad: bool,
    ) -> Result<BackwardPass<T>> {
        if start >= self.layers.len() || stop > start {
            return Err(Error::Config(format!(
                "invalid backward range {stop}..={start} for {} layers",
                self.layers.len()
            )));
        }
        let mut grads = WeightStore::new();
        let mut g = grad;
        for i in (stop..=start).rev() {
            let layer = &self.layers[i];
            let want = GradRequest {
                input: i > stop || need_input_grad,
                params: want_params && layer.trainable,
            };
            let cache = pass.caches[i].as_ref().ok_or_else(|| {
                Error::State(format!(
                    "layer {:?} has no forward cache; run forward with cache_from <= {i}",
                    layer.name
                ))
            })?;
            let lg: LayerGrads<T> = match (&layer.kind, cache) {
                (LayerKind::Conv { .. }, LayerCache::Input(x)) => {
                    ops::conv2d_backward(x, &self.conv_params(i)?, &g, want)?
                }
                (LayerKind::DwConv { .. }, LayerCache::Input(x)) => {
                    ops::depthwise_conv2d_backward(x, &self.conv_params(i)?, &g, want)?
                }
                (LayerKind::PwConv { .. }, LayerCache::Input(x)) => {
                    ops::pointwise_conv2d_backward(x, &self.conv_params(i)?, &g, want)?
                }
                (LayerKind::BatchNorm { .. }, LayerCache::BatchNorm(c)) => {
                    let gamma = self.param(&param_name(&layer.name, ParamRole::Gamma))?;
                    ops::batchnorm_backward(c, gamma, &g, want)?
                }
                (LayerKind::Activation { function }, LayerCache::Input(x)) => {
                    ops::activation_backward(x, *function, &g)?
                }
                (LayerKind::MaxPool { .. }, LayerCache::MaxPool(c)) => ops::maxpool2d_backward(c, &g)?,
                (LayerKind::Gap, LayerCache::InputShape(s)) => ops::global_avg_pool_backward(s, &g)?,
                (LayerKind::Flatten, LayerCache::InputShape(s)) => LayerGrads {
                    input: Some(g.reshaped(s)?),
                    params: Vec::new(),
                },
                (LayerKind::Dense { activation, .. }, LayerCache::Dense { input, pre }) => {
                    let g_pre = match (activation, pre) {
                        (Some(f), Some(pre)) => ops::activation_backward(pre, *f, &g)?
                            .input
                            .expect("activation returns input grad"),
                        _ => g.clone(),
                    };
                    ops::dense_backward(input, &self.dense_params(i)?, &g_pre, want)?
                }
                (LayerKind::Dropout { .. }, LayerCache::Dropout(mask)) => {
                    ops::dropout_backward(mask.as_ref(), &g)?
                }
                (LayerKind::Softmax, LayerCache::Softmax(y)) => ops::softmax_backward(y, &g)?,
                _ => {
                    return Err(Error::State(format!(
                        "cache of layer {:?} does not match its kind",
                        layer.name
                    )))
                }
            };
            for (role, t) in lg.params {
                grads.insert(param_name(&layer.name, role), t);
            }
            match lg.input {
                Some(next) => g = next,
                None => {
                    return Ok(BackwardPass {
                        grads,
                        input_grad: None,
                    })
                }
            }
        }
        Ok(BackwardPass {
            grads,
            input_grad: Some(g),
        })
    }

    /// Folds the batch statistics of a train-mode pass into the running
    /// averages.
    pub fn apply_bn_updates(&mut self, pass: &ForwardPass<T>) -> Result<()> {
        for (i, stats) in &pass.bn_updates {
            let mut p = self.bn_params(*i)?;
            p.apply_update(stats).map_err(|e| match e {
                Error::Numeric(m) => {
                    Error::Numeric(format!("layer {:?}: {m}", self.layers[*i].name))
                }
                other => other,
            })?;
            let name = self.layers[*i].name.clone();
            self.params
                .insert(param_name(&name, ParamRole::MovingMean), p.moving_mean);
            self.params
                .insert(param_name(&name, ParamRole::MovingVariance), p.moving_var);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{attach_transfer_head, build_base_cnn, build_mobilenet_for_input, LayerSpec};
    use crate::ops::Activation;
    use crate::tensor::Shape4;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn single_sample_is_batch_of_one() {
        let m = attach_transfer_head(
            build_mobilenet_for_input(Shape4::new(32, 32, 3).unwrap(), false, &mut rng(1)).unwrap(),
            3,
            &mut rng(2),
        )
        .unwrap();
        let x = Tensor::<f32>::full(&[32, 32, 3], 0.25);
        let y = m.predict(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 3]);
        assert!((y.sum() - 1.0).abs() < 1e-5);
        assert!(matches!(
            m.predict(&Tensor::<f32>::zeros(&[31, 32, 3])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn base_cnn_forward_shape() {
        let m = build_base_cnn(6, &mut rng(0)).unwrap();
        let x = Tensor::<f32>::zeros(&[2, 256, 256, 3]);
        assert_eq!(m.predict(&x).unwrap().shape(), &[2, 6]);
    }

    #[test]
    fn backward_without_cache_is_state_error() {
        let m = build_base_cnn(2, &mut rng(0)).unwrap();
        let x = Tensor::<f32>::zeros(&[1, 256, 256, 3]);
        let pass = m.forward(&x, ForwardOptions::infer()).unwrap();
        let last = m.layers().len() - 1;
        let err = m.backward(&pass, Tensor::zeros(&[1, 2]), last, 0, true, false);
        assert!(matches!(err, Err(Error::State(_))));
    }

    #[test]
    fn frozen_batchnorm_keeps_running_stats() {
        let input = Shape4::new(4, 4, 2).unwrap();
        let layers = vec![
            LayerSpec {
                name: "bn".into(),
                kind: LayerKind::BatchNorm {
                    epsilon: 1e-3,
                    momentum: 0.5,
                },
                trainable: false,
            },
            LayerSpec {
                name: "act".into(),
                kind: LayerKind::Activation {
                    function: Activation::Relu,
                },
                trainable: true,
            },
        ];
        let mut m = Model::<f64>::new(input, layers, &mut rng(0)).unwrap();
        let x = Tensor::from_fn(&[3, 4, 4, 2], |i| i as f64);
        let pass = m.forward(&x, ForwardOptions::train(0, 0)).unwrap();
        assert!(pass.bn_updates.is_empty());
        m.set_trainable_boundary(0).unwrap();
        let pass = m.forward(&x, ForwardOptions::train(0, 0)).unwrap();
        assert_eq!(pass.bn_updates.len(), 1);
        m.apply_bn_updates(&pass).unwrap();
        assert_ne!(m.params().get("bn/moving_mean").unwrap().data()[0], 0.0);
    }
}
