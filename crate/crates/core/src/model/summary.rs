use std::fmt::Write as _;

use super::{LayerKind, Model};
use crate::tensor::Scalar;

/// One layer in the printed architecture table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SummaryRow {
    pub name: String,
    /// `Conv / s2`, `Conv dw / s1`, `Avg Pool / s1`, ...
    pub type_stride: String,
    /// `3×3×3×32`, `3×3×32 dw`, `Pool 7×7`, `1024×1000`, `Classifier`, ...
    pub filter_shape: String,
    /// Per-sample input shape, `224×224×3`.
    pub input_size: String,
    pub trainable: bool,
    pub params: usize,
    pub trainable_params: usize,
    /// Convolution, pooling, fully connected and classifier rows; batchnorm,
    /// activation, flatten and dropout rows are bookkeeping.
    pub architectural: bool,
}

fn dims(shape: &[usize]) -> String {
    shape
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join("×")
}

pub fn summarize<T: Scalar>(model: &Model<T>) -> Vec<SummaryRow> {
    model
        .layers()
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            let input = model.layer_input_shape(i);
            let channels = input.last().copied().unwrap_or(0);
            let (type_stride, filter_shape, architectural) = match &layer.kind {
                LayerKind::Conv {
                    filters,
                    kernel,
                    stride,
                    ..
                } => (
                    format!("Conv / s{stride}"),
                    dims(&[*kernel, *kernel, channels, *filters]),
                    true,
                ),
                LayerKind::DwConv { kernel, stride, .. } => (
                    format!("Conv dw / s{stride}"),
                    format!("{} dw", dims(&[*kernel, *kernel, channels])),
                    true,
                ),
                LayerKind::PwConv { filters } => {
                    ("Conv / s1".into(), dims(&[1, 1, channels, *filters]), true)
                }
                LayerKind::MaxPool { window, stride } => (
                    format!("Max Pool / s{stride}"),
                    format!("Pool {window}×{window}"),
                    true,
                ),
                LayerKind::Gap => (
                    "Avg Pool / s1".into(),
                    format!("Pool {}", dims(&input[..2])),
                    true,
                ),
                LayerKind::Dense { units, activation } => (
                    "FC / s1".into(),
                    match activation {
                        Some(a) => format!("{}×{units} {}", channels, a.name()),
                        None => format!("{}×{units}", channels),
                    },
                    true,
                ),
                LayerKind::Softmax => ("Softmax / s1".into(), "Classifier".into(), true),
                LayerKind::BatchNorm { .. } => ("BatchNorm".into(), "-".into(), false),
                LayerKind::Activation { function } => {
                    (function.name().to_uppercase(), "-".into(), false)
                }
                LayerKind::Flatten => ("Flatten".into(), "-".into(), false),
                LayerKind::Dropout { rate } => ("Dropout".into(), format!("rate {rate}"), false),
            };
            let census = model.layer_census(i);
            SummaryRow {
                name: layer.name.clone(),
                type_stride,
                filter_shape,
                input_size: dims(input),
                trainable: layer.trainable,
                params: census.total,
                trainable_params: census.trainable,
                architectural,
            }
        })
        .collect()
}

/// Plain-text table of every layer followed by the parameter census.
pub fn summary_table<T: Scalar>(model: &Model<T>) -> String {
    let rows = summarize(model);
    let header = ["#", "Layer", "Type / Stride", "Filter Shape", "Input Size", "Trainable", "Params"];
    let cells: Vec<[String; 7]> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            [
                (i + 1).to_string(),
                r.name.clone(),
                r.type_stride.clone(),
                r.filter_shape.clone(),
                r.input_size.clone(),
                if r.trainable { "yes" } else { "no" }.to_string(),
                r.params.to_string(),
            ]
        })
        .collect();
    let mut widths = header.map(|h| h.chars().count());
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |cols: &[String]| {
        let parts: Vec<String> = cols
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&header.map(String::from));
    for row in &cells {
        line(row);
    }
    let census = model.census();
    let _ = writeln!(
        out,
        "Total params: {}\nTrainable params: {}\nNon-trainable params: {}",
        census.total,
        census.trainable,
        census.frozen()
    );
    out
}
