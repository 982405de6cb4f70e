//! Sequential models: layer specifications, parameter storage, the two
//! architectures (a small base CNN and MobileNet), transfer-head surgery,
//! freezing, and weight persistence.

mod builders;
mod engine;
pub mod ntw;
mod store;
mod summary;

pub use builders::{
    attach_transfer_head, build_base_cnn, build_base_cnn_for_input, build_mobilenet, build_mobilenet_for_input,
    replace_output_layer, BASE_CNN_INPUT, MOBILENET_INPUT,
};
pub use engine::{BackwardPass, ForwardOptions, ForwardPass, LayerCache};
pub use ntw::{load_weights, save_weights, BindReport};
pub use store::WeightStore;
pub use summary::{summarize, summary_table, SummaryRow};

use indexmap::IndexSet;
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{Activation, Padding, ParamRole};
use crate::tensor::{fmt_shape, Scalar, Shape4, Tensor};

/// Kind-specific layer hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        bias: bool,
    },
    DwConv {
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    PwConv {
        filters: usize,
    },
    BatchNorm {
        epsilon: f64,
        momentum: f64,
    },
    Activation {
        function: Activation,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    Gap,
    Flatten,
    /// Acts on the last axis, with an optional fused activation.
    Dense {
        units: usize,
        activation: Option<Activation>,
    },
    Dropout {
        rate: f64,
    },
    Softmax,
}

impl LayerKind {
    pub fn is_conv(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv { .. } | LayerKind::DwConv { .. } | LayerKind::PwConv { .. }
        )
    }

    /// Short tag used in censuses: `conv`, `dwconv`, `batchnorm`, ...
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::DwConv { .. } => "dwconv",
            LayerKind::PwConv { .. } => "pwconv",
            LayerKind::BatchNorm { .. } => "batchnorm",
            LayerKind::Activation { .. } => "activation",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::Gap => "gap",
            LayerKind::Flatten => "flatten",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::Softmax => "softmax",
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let spatial = |op: &str| -> Result<(usize, usize, usize)> {
            match *input {
                [h, w, c] => Ok((h, w, c)),
                _ => Err(Error::Shape(format!(
                    "{op} needs an H×W×C input, got {}",
                    fmt_shape(input)
                ))),
            }
        };
        let out = |len: usize, k: usize, s: usize, p: Padding| {
            crate::ops::spatial_out(len, k, s, p).map(|(o, _)| o)
        };
        Ok(match self {
            LayerKind::Conv {
                filters,
                kernel,
                stride,
                padding,
                ..
            } => {
                let (h, w, _) = spatial("conv")?;
                vec![
                    out(h, *kernel, *stride, *padding)?,
                    out(w, *kernel, *stride, *padding)?,
                    *filters,
                ]
            }
            LayerKind::DwConv {
                kernel,
                stride,
                padding,
            } => {
                let (h, w, c) = spatial("dwconv")?;
                vec![
                    out(h, *kernel, *stride, *padding)?,
                    out(w, *kernel, *stride, *padding)?,
                    c,
                ]
            }
            LayerKind::PwConv { filters } => {
                let (h, w, _) = spatial("pwconv")?;
                vec![h, w, *filters]
            }
            LayerKind::MaxPool { window, stride } => {
                let (h, w, c) = spatial("maxpool")?;
                if *window > h || *window > w {
                    return Err(Error::Shape(format!(
                        "pool window {window} larger than {h}×{w} input"
                    )));
                }
                vec![(h - window) / stride + 1, (w - window) / stride + 1, c]
            }
            LayerKind::Gap => {
                let (_, _, c) = spatial("gap")?;
                vec![1, 1, c]
            }
            LayerKind::Flatten => vec![input.iter().product()],
            LayerKind::Dense { units, .. } => {
                let mut s = input.to_vec();
                *s.last_mut()
                    .ok_or_else(|| Error::Shape("dense on a scalar".into()))? = *units;
                s
            }
            LayerKind::Softmax => {
                if input.last().copied().unwrap_or(0) < 2 {
                    return Err(Error::Shape(format!(
                        "softmax needs at least 2 classes, got {}",
                        fmt_shape(input)
                    )));
                }
                input.to_vec()
            }
            LayerKind::BatchNorm { .. } | LayerKind::Activation { .. } | LayerKind::Dropout { .. } => {
                input.to_vec()
            }
        })
    }

    /// Parameter roles and shapes for a given per-sample input shape.
    pub fn param_shapes(&self, input: &[usize]) -> Vec<(ParamRole, Vec<usize>)> {
        let channels = input.last().copied().unwrap_or(0);
        match self {
            LayerKind::Conv {
                filters,
                kernel,
                bias,
                ..
            } => {
                let mut v = vec![(ParamRole::Kernel, vec![*kernel, *kernel, channels, *filters])];
                if *bias {
                    v.push((ParamRole::Bias, vec![*filters]));
                }
                v
            }
            LayerKind::DwConv { kernel, .. } => {
                vec![(ParamRole::DepthwiseKernel, vec![*kernel, *kernel, channels])]
            }
            LayerKind::PwConv { filters } => {
                vec![(ParamRole::Kernel, vec![1, 1, channels, *filters])]
            }
            LayerKind::BatchNorm { .. } => vec![
                (ParamRole::Gamma, vec![channels]),
                (ParamRole::Beta, vec![channels]),
                (ParamRole::MovingMean, vec![channels]),
                (ParamRole::MovingVariance, vec![channels]),
            ],
            LayerKind::Dense { units, .. } => vec![
                (ParamRole::Kernel, vec![channels, *units]),
                (ParamRole::Bias, vec![*units]),
            ],
            _ => Vec::new(),
        }
    }
}

/// Whether the optimizer updates a parameter of this role.
pub fn role_is_trainable(role: ParamRole) -> bool {
    !matches!(role, ParamRole::MovingMean | ParamRole::MovingVariance)
}

/// Canonical weight-file name for a layer parameter.
pub fn param_name(layer: &str, role: ParamRole) -> String {
    format!("{layer}/{}", role.as_str())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    pub trainable: bool,
}

/// An ordered stack of layers with bound parameters.
#[derive(Debug, Clone)]
pub struct Model<T = f32> {
    input: Shape4,
    layers: Vec<LayerSpec>,
    /// `shapes[i]` is the per-sample input shape of layer `i`; the last entry
    /// is the model output shape.
    shapes: Vec<Vec<usize>>,
    params: WeightStore<T>,
}

/// Parameter counts of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParamCensus {
    pub total: usize,
    pub trainable: usize,
}

impl ParamCensus {
    pub fn frozen(&self) -> usize {
        self.total - self.trainable
    }
}

impl<T: Scalar> Model<T> {
    /// Builds a model from layer specs, shape-checking the whole stack and
    /// initializing parameters from `rng`.
    pub fn new<R: Rng + ?Sized>(input: Shape4, layers: Vec<LayerSpec>, rng: &mut R) -> Result<Self> {
        let mut model = Self {
            input,
            layers: Vec::new(),
            shapes: vec![vec![input.height, input.width, input.channels]],
            params: WeightStore::new(),
        };
        for layer in layers {
            model.push(layer, rng)?;
        }
        Ok(model)
    }

    /// Appends a layer and initializes its parameters.
    pub fn push<R: Rng + ?Sized>(&mut self, layer: LayerSpec, rng: &mut R) -> Result<()> {
        if self.layers.iter().any(|l| l.name == layer.name) {
            return Err(Error::Config(format!("duplicate layer name {:?}", layer.name)));
        }
        let input = self.shapes.last().expect("input shape present").clone();
        let output = layer.kind.output_shape(&input).map_err(|e| {
            Error::Shape(format!("layer {:?}: {e}", layer.name))
        })?;
        for (role, shape) in layer.kind.param_shapes(&input) {
            let tensor = init_param(&layer.kind, role, &shape, rng);
            self.params.insert(param_name(&layer.name, role), tensor);
        }
        self.layers.push(layer);
        self.shapes.push(output);
        Ok(())
    }

    /// Removes the last layer and its parameters.
    pub fn pop(&mut self) -> Option<LayerSpec> {
        let layer = self.layers.pop()?;
        self.shapes.pop();
        let input = self.shapes.last().expect("input shape present").clone();
        for (role, _) in layer.kind.param_shapes(&input) {
            self.params.remove(&param_name(&layer.name, role));
        }
        Some(layer)
    }

    pub fn input_shape(&self) -> Shape4 {
        self.input
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Per-sample input shape of layer `i`.
    pub fn layer_input_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn layer_output_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i + 1]
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("input shape present")
    }

    /// Width of the last axis of the output.
    pub fn num_outputs(&self) -> usize {
        *self.output_shape().last().expect("non-scalar output")
    }

    pub fn params(&self) -> &WeightStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut WeightStore<T> {
        &mut self.params
    }

    /// Parameter names and roles of layer `i`, in declaration order.
    pub fn layer_params(&self, i: usize) -> Vec<(ParamRole, String)> {
        let layer = &self.layers[i];
        layer
            .kind
            .param_shapes(&self.shapes[i])
            .into_iter()
            .map(|(role, _)| (role, param_name(&layer.name, role)))
            .collect()
    }

    /// Shapes every parameter must have, in model order.
    pub fn expected_params(&self) -> Vec<(String, Vec<usize>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.kind
                    .param_shapes(&self.shapes[i])
                    .into_iter()
                    .map(move |(role, shape)| (param_name(&l.name, role), shape))
            })
            .collect()
    }

    /// Names of the parameters the optimizer may update.
    pub fn trainable_param_names(&self) -> IndexSet<String> {
        let mut names = IndexSet::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if !layer.trainable {
                continue;
            }
            for (role, name) in self.layer_params(i) {
                if role_is_trainable(role) {
                    names.insert(name);
                }
            }
        }
        names
    }

    pub fn layer_census(&self, i: usize) -> ParamCensus {
        let layer = &self.layers[i];
        let mut census = ParamCensus::default();
        for (role, shape) in layer.kind.param_shapes(&self.shapes[i]) {
            let n: usize = shape.iter().product();
            census.total += n;
            if layer.trainable && role_is_trainable(role) {
                census.trainable += n;
            }
        }
        census
    }

    pub fn census(&self) -> ParamCensus {
        (0..self.layers.len()).fold(ParamCensus::default(), |acc, i| {
            let c = self.layer_census(i);
            ParamCensus {
                total: acc.total + c.total,
                trainable: acc.trainable + c.trainable,
            }
        })
    }

    /// Freezes the first `n` layers of the flattened list and unfreezes the rest.
    pub fn set_trainable_boundary(&mut self, n: usize) -> Result<()> {
        if n > self.layers.len() {
            return Err(Error::Config(format!(
                "cannot freeze {n} layers, model has {}",
                self.layers.len()
            )));
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.trainable = i >= n;
        }
        Ok(())
    }

    pub fn with_trainable_boundary(mut self, n: usize) -> Result<Self> {
        self.set_trainable_boundary(n)?;
        Ok(self)
    }

    /// Index of the first trainable layer that owns trainable parameters.
    pub fn first_trainable_layer(&self) -> Option<usize> {
        (0..self.layers.len()).find(|&i| self.layer_census(i).trainable > 0)
    }

    /// Index of the last convolution of any kind.
    pub fn last_conv_layer(&self) -> Option<usize> {
        self.layers.iter().rposition(|l| l.kind.is_conv())
    }

    /// Same architecture and trainability with parameters converted to `U`.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            input: self.input,
            layers: self.layers.clone(),
            shapes: self.shapes.clone(),
            params: self.params.cast(),
        }
    }

    pub(crate) fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::State(format!("parameter {name} is not bound")))
    }
}

/// He-uniform for kernels, zero biases, identity batchnorm statistics.
fn init_param<T: Scalar, R: Rng + ?Sized>(
    kind: &LayerKind,
    role: ParamRole,
    shape: &[usize],
    rng: &mut R,
) -> Tensor<T> {
    match role {
        ParamRole::Gamma | ParamRole::MovingVariance => Tensor::full(shape, T::one()),
        ParamRole::Beta | ParamRole::MovingMean | ParamRole::Bias => Tensor::zeros(shape),
        ParamRole::Kernel | ParamRole::DepthwiseKernel => {
            let fan_in: usize = match kind {
                LayerKind::DwConv { kernel, .. } => kernel * kernel,
                _ => shape[..shape.len() - 1].iter().product(),
            };
            let limit = (6.0 / fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
            Tensor::from_fn(shape, |_| T::of(dist.sample(rng)))
        }
    }
}
