use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use image::imageops::{self, FilterType};
use image::{ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor};

fn decode(path: &Path) -> Result<RgbImage> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    Ok(img.to_rgb8())
}

fn check_target(target: Shape4) -> Result<()> {
    if target.channels != 3 {
        return Err(Error::Config(format!(
            "images load as RGB, target has {} channels",
            target.channels
        )));
    }
    Ok(())
}

/// Decodes and bilinearly resizes to `target`, keeping 8-bit pixels.
/// Grayscale sources are replicated to three channels and alpha is dropped.
pub fn load_rgb(path: &Path, target: Shape4) -> Result<RgbImage> {
    check_target(target)?;
    let img = decode(path)?;
    let (w, h) = (target.width as u32, target.height as u32);
    if img.dimensions() == (w, h) {
        Ok(img)
    } else {
        Ok(imageops::resize(&img, w, h, FilterType::Triangle))
    }
}

/// Maps 8-bit RGB to an `H×W×3` tensor in `[-1, 1]` via `x / 127.5 − 1`.
pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    Tensor::new(
        vec![h as usize, w as usize, 3],
        img.as_raw().iter().map(|&v| v as f32 / 127.5 - 1.0).collect(),
    )
    .expect("buffer matches dimensions")
}

/// Inverse of [`rgb_to_tensor`], clamping to the 8-bit range.
pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    let [h, w, 3] = *t.shape() else {
        return Err(Error::Shape(format!(
            "expected an H×W×3 image tensor, got {:?}",
            t.shape()
        )));
    };
    let raw = t
        .data()
        .iter()
        .map(|&v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
        .collect();
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer matches dimensions"))
}

pub fn load_image(path: &Path, target: Shape4) -> Result<Tensor> {
    Ok(rgb_to_tensor(&load_rgb(path, target)?))
}

/// Loads images at a fixed size, optionally keeping the resized pixels in
/// memory so later epochs skip decoding.
#[derive(Debug)]
pub struct ImageSource {
    target: Shape4,
    cache: Option<RwLock<HashMap<PathBuf, Arc<RgbImage>>>>,
}

impl ImageSource {
    pub fn new(target: Shape4, cache: bool) -> Result<Self> {
        check_target(target)?;
        Ok(Self {
            target,
            cache: cache.then(|| RwLock::new(HashMap::new())),
        })
    }

    pub fn target(&self) -> Shape4 {
        self.target
    }

    pub fn load(&self, path: &Path) -> Result<Tensor> {
        let Some(cache) = &self.cache else {
            return load_image(path, self.target);
        };
        if let Some(img) = cache.read().expect("cache lock").get(path) {
            return Ok(rgb_to_tensor(img));
        }
        let img = Arc::new(load_rgb(path, self.target)?);
        cache
            .write()
            .expect("cache lock")
            .insert(path.to_path_buf(), Arc::clone(&img));
        Ok(rgb_to_tensor(&img))
    }
}
