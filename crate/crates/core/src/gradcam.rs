//! Gradient-weighted class activation maps.
//!
//! The map for class `k` is `ReLU(Σ_c α_c · A_c)`, where `A` is the output of
//! the last convolution and `α_c` is the spatial mean of `∂y_k/∂A_c`, with
//! `y_k` the pre-softmax score.

use std::path::Path;

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma, Rgb, RgbImage};

use crate::data::tensor_to_rgb;
use crate::error::{Error, Result};
use crate::model::{ntw, ForwardOptions, LayerKind, Model, WeightStore};
use crate::ops::Mode;
use crate::tensor::Tensor;

/// Weight of the heatmap colour in the overlay panel.
pub const OVERLAY_ALPHA: f32 = 0.4;

#[derive(Debug, Clone)]
pub struct CamResult {
    pub class_index: usize,
    /// Index of the convolution whose output was weighted.
    pub layer: usize,
    /// `h×w`, in `[0, 1]`.
    pub heatmap: Tensor,
    /// Channel weights `α`.
    pub weights: Vec<f32>,
    /// Heatmap resized to the model input, `H×W`.
    pub upsampled: Tensor,
}

pub fn compute_gradcam(model: &Model, image: &Tensor, class_index: usize) -> Result<CamResult> {
    let layer = model
        .last_conv_layer()
        .ok_or_else(|| Error::Config("Grad-CAM needs a model with a convolution layer".into()))?;
    let k = model.num_outputs();
    if class_index >= k {
        return Err(Error::Config(format!(
            "class index {class_index} out of range for {k} outputs"
        )));
    }
    let n = model.layers().len();
    let score_layer = if model.layers()[n - 1].kind == LayerKind::Softmax {
        n - 2
    } else {
        n - 1
    };
    if score_layer <= layer {
        return Err(Error::Config(
            "Grad-CAM needs layers between the last convolution and the scores".into(),
        ));
    }
    let pass = model.forward(
        image,
        ForwardOptions {
            mode: Mode::Infer,
            cache_from: layer + 1,
            capture: Some(layer),
            seed: 0,
        },
    )?;
    if pass.output.shape()[0] != 1 {
        return Err(Error::Shape("Grad-CAM takes a single image".into()));
    }
    let activations = pass.captured.clone().expect("capture requested");
    let score_shape: Vec<usize> = {
        let mut s = vec![1];
        s.extend_from_slice(model.layer_output_shape(score_layer));
        s
    };
    let grad = Tensor::from_fn(&score_shape, |i| if i % k == class_index { 1.0 } else { 0.0 });
    let back = model.backward(&pass, grad, score_layer, layer + 1, false, true)?;
    let d_a = back.input_grad.expect("input gradient requested");

    let &[_, h, w, c] = activations.shape() else {
        return Err(Error::Shape("last convolution output is not a feature map".into()));
    };
    let area = (h * w) as f64;
    let mut alpha = vec![0.0f64; c];
    for px in d_a.data().chunks_exact(c) {
        for (a, &g) in alpha.iter_mut().zip(px) {
            *a += g as f64;
        }
    }
    for a in &mut alpha {
        *a /= area;
    }
    let raw: Vec<f64> = activations
        .data()
        .chunks_exact(c)
        .map(|px| px.iter().zip(&alpha).map(|(&v, &a)| v as f64 * a).sum::<f64>().max(0.0))
        .collect();
    let max = raw.iter().copied().fold(0.0, f64::max);
    let map: Vec<f32> = raw
        .iter()
        .map(|&v| if max > 0.0 { (v / max) as f32 } else { 0.0 })
        .collect();
    let heatmap = Tensor::new(vec![h, w], map)?;
    let input = model.input_shape();
    let upsampled = resize_map(&heatmap, input.height, input.width)?;
    Ok(CamResult {
        class_index,
        layer,
        heatmap,
        weights: alpha.into_iter().map(|a| a as f32).collect(),
        upsampled,
    })
}

/// Bilinear resize of an `h×w` map, clamped to `[0, 1]`.
pub fn resize_map(map: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let &[h, w] = map.shape() else {
        return Err(Error::Shape("heatmap must be h×w".into()));
    };
    let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_raw(w as u32, h as u32, map.data().to_vec()).expect("sized buffer");
    let out = imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
    Tensor::new(
        vec![height, width],
        out.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
    )
}

/// Blue at 0, through cyan, yellow, to red at 1.
pub fn jet(v: f32) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |centre: f32| ((1.5 - (4.0 * v - centre).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Side-by-side PNG: the input image, the colourized heatmap and their blend.
pub fn render_heatmap_image(cam: &CamResult, base: &Tensor) -> Result<RgbImage> {
    let &[h, w] = cam.upsampled.shape() else {
        unreachable!("upsampled map is h×w")
    };
    if base.shape() != [h, w, 3] {
        return Err(Error::Shape(format!(
            "base image {:?} does not match the {h}×{w} model input",
            base.shape()
        )));
    }
    let original = tensor_to_rgb(base)?;
    let mut out = RgbImage::new(3 * w as u32, h as u32);
    for y in 0..h as u32 {
        for x in 0..w as u32 {
            let orig = original.get_pixel(x, y).0;
            let heat = jet(cam.upsampled.data()[y as usize * w + x as usize]);
            let blend: [u8; 3] = std::array::from_fn(|i| {
                ((1.0 - OVERLAY_ALPHA) * orig[i] as f32 + OVERLAY_ALPHA * heat[i] as f32).round() as u8
            });
            out.put_pixel(x, y, Rgb(orig));
            out.put_pixel(x + w as u32, y, Rgb(heat));
            out.put_pixel(x + 2 * w as u32, y, Rgb(blend));
        }
    }
    Ok(out)
}

pub fn render_heatmap(cam: &CamResult, base: &Tensor, path: &Path) -> Result<()> {
    render_heatmap_image(cam, base)?
        .save(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// Writes the raw `h×w` map as a one-tensor NTW file named `gradcam/heatmap`.
pub fn dump_heatmap(cam: &CamResult, path: &Path) -> Result<()> {
    let mut store = WeightStore::new();
    store.insert("gradcam/heatmap", cam.heatmap.clone());
    ntw::write_store(&store, path)
}
