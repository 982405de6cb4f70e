use rand::Rng;

use super::{LayerKind, LayerSpec, Model};
use crate::error::{Error, Result};
use crate::ops::{Activation, Padding};
use crate::tensor::Shape4;

pub const BASE_CNN_INPUT: Shape4 = Shape4 {
    height: 256,
    width: 256,
    channels: 3,
    batch: None,
};

pub const MOBILENET_INPUT: Shape4 = Shape4 {
    height: 224,
    width: 224,
    channels: 3,
    batch: None,
};

const BN_EPSILON: f64 = 1e-3;
const BN_MOMENTUM: f64 = 0.99;

/// Pointwise filters and depthwise stride of the 13 separable blocks.
const MOBILENET_BLOCKS: [(usize, usize); 13] = [
    (64, 1),
    (128, 2),
    (128, 1),
    (256, 2),
    (256, 1),
    (512, 2),
    (512, 1),
    (512, 1),
    (512, 1),
    (512, 1),
    (512, 1),
    (1024, 2),
    (1024, 1),
];

fn layer(name: impl Into<String>, kind: LayerKind) -> LayerSpec {
    LayerSpec {
        name: name.into(),
        kind,
        trainable: true,
    }
}

fn batchnorm(name: impl Into<String>) -> LayerSpec {
    layer(
        name,
        LayerKind::BatchNorm {
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        },
    )
}

fn act(name: impl Into<String>, function: Activation) -> LayerSpec {
    layer(name, LayerKind::Activation { function })
}

fn dense(name: impl Into<String>, units: usize, activation: Option<Activation>) -> LayerSpec {
    layer(name, LayerKind::Dense { units, activation })
}

fn check_classes(num_classes: usize) -> Result<()> {
    if num_classes < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    Ok(())
}

/// Four 3×3 convolutions (32/64/128/256 filters) each followed by 2×2 max
/// pooling, batchnorm after the first three, then dense 512 → dropout →
/// 256 → 128 → softmax over `num_classes`, at 256×256×3.
pub fn build_base_cnn<R: Rng + ?Sized>(num_classes: usize, rng: &mut R) -> Result<Model> {
    build_base_cnn_for_input(BASE_CNN_INPUT, num_classes, rng)
}

/// The base CNN for an arbitrary input; height and width must survive four
/// 2×2 poolings.
pub fn build_base_cnn_for_input<R: Rng + ?Sized>(
    input: Shape4,
    num_classes: usize,
    rng: &mut R,
) -> Result<Model> {
    check_classes(num_classes)?;
    let mut layers = Vec::new();
    for (i, filters) in [32, 64, 128, 256].into_iter().enumerate() {
        let n = i + 1;
        let with_bn = n <= 3;
        layers.push(layer(
            format!("conv{n}"),
            LayerKind::Conv {
                filters,
                kernel: 3,
                stride: 1,
                padding: Padding::Same,
                bias: !with_bn,
            },
        ));
        if with_bn {
            layers.push(batchnorm(format!("conv{n}_bn")));
        }
        layers.push(act(format!("conv{n}_relu"), Activation::Relu));
        layers.push(layer(
            format!("pool{n}"),
            LayerKind::MaxPool {
                window: 2,
                stride: 2,
            },
        ));
    }
    layers.push(layer("flatten", LayerKind::Flatten));
    layers.push(dense("dense_1", 512, Some(Activation::Relu)));
    layers.push(layer("dropout", LayerKind::Dropout { rate: 0.5 }));
    layers.push(dense("dense_2", 256, Some(Activation::Relu)));
    layers.push(dense("dense_3", 128, Some(Activation::Relu)));
    layers.push(dense("predictions", num_classes, None));
    layers.push(layer("softmax", LayerKind::Softmax));
    Model::new(input, layers, rng)
}

/// MobileNet at the standard 224×224×3 input.
pub fn build_mobilenet<R: Rng + ?Sized>(include_top: bool, rng: &mut R) -> Result<Model> {
    build_mobilenet_for_input(MOBILENET_INPUT, include_top, rng)
}

/// MobileNet for an arbitrary input size. Every convolution is followed by
/// batchnorm and ReLU6. Without the top the model ends at the last pointwise
/// block; with it, average pooling, a 1000-way dense layer and softmax follow.
pub fn build_mobilenet_for_input<R: Rng + ?Sized>(
    input: Shape4,
    include_top: bool,
    rng: &mut R,
) -> Result<Model> {
    let mut layers = vec![
        layer(
            "conv1",
            LayerKind::Conv {
                filters: 32,
                kernel: 3,
                stride: 2,
                padding: Padding::Same,
                bias: false,
            },
        ),
        batchnorm("conv1_bn"),
        act("conv1_relu", Activation::Relu6),
    ];
    for (i, (filters, stride)) in MOBILENET_BLOCKS.into_iter().enumerate() {
        let n = i + 1;
        layers.push(layer(
            format!("conv_dw_{n}"),
            LayerKind::DwConv {
                kernel: 3,
                stride,
                padding: Padding::Same,
            },
        ));
        layers.push(batchnorm(format!("conv_dw_{n}_bn")));
        layers.push(act(format!("conv_dw_{n}_relu"), Activation::Relu6));
        layers.push(layer(format!("conv_pw_{n}"), LayerKind::PwConv { filters }));
        layers.push(batchnorm(format!("conv_pw_{n}_bn")));
        layers.push(act(format!("conv_pw_{n}_relu"), Activation::Relu6));
    }
    if include_top {
        layers.push(layer("global_average_pooling", LayerKind::Gap));
        layers.push(dense("predictions", 1000, None));
        layers.push(layer("predictions_softmax", LayerKind::Softmax));
    }
    Model::new(input, layers, rng)
}

/// Appends global average pooling, dense 1024/512/256 (ReLU) and a fresh
/// `num_classes` softmax classifier to a headless backbone.
pub fn attach_transfer_head<R: Rng + ?Sized>(
    mut backbone: Model,
    num_classes: usize,
    rng: &mut R,
) -> Result<Model> {
    check_classes(num_classes)?;
    if let Some(l) = backbone
        .layers()
        .iter()
        .find(|l| matches!(l.kind, LayerKind::Dense { .. } | LayerKind::Softmax))
    {
        return Err(Error::Config(format!(
            "backbone already has a classification head (layer {:?})",
            l.name
        )));
    }
    if backbone.output_shape().len() != 3 {
        return Err(Error::Config(
            "transfer head needs a backbone ending in a feature map".into(),
        ));
    }
    for spec in [
        layer("head_gap", LayerKind::Gap),
        dense("head_dense_1024", 1024, Some(Activation::Relu)),
        dense("head_dense_512", 512, Some(Activation::Relu)),
        dense("head_dense_256", 256, Some(Activation::Relu)),
        dense("head_output", num_classes, None),
        layer("head_softmax", LayerKind::Softmax),
    ] {
        backbone.push(spec, rng)?;
    }
    Ok(backbone)
}

/// Swaps the final dense layer for a freshly initialized `num_classes`-way
/// one, keeping every other parameter.
pub fn replace_output_layer<R: Rng + ?Sized>(
    mut model: Model,
    num_classes: usize,
    rng: &mut R,
) -> Result<Model> {
    check_classes(num_classes)?;
    let n = model.layers().len();
    let tail_ok = n >= 2
        && matches!(model.layers()[n - 2].kind, LayerKind::Dense { .. })
        && model.layers()[n - 1].kind == LayerKind::Softmax;
    if !tail_ok {
        return Err(Error::Config(
            "model must end with a dense layer followed by softmax".into(),
        ));
    }
    let softmax = model.pop().expect("checked length");
    let output = model.pop().expect("checked length");
    let LayerKind::Dense { activation, .. } = output.kind else {
        unreachable!("checked kind")
    };
    model.push(
        LayerSpec {
            kind: LayerKind::Dense {
                units: num_classes,
                activation,
            },
            ..output
        },
        rng,
    )?;
    model.push(softmax, rng)?;
    Ok(model)
}
