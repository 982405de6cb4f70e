use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How samples that land outside the source image are filled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode", content = "value")]
pub enum FillMode {
    /// Repeat the nearest border pixel.
    Nearest,
    Constant(f32),
}

/// Random geometric augmentation. Rotation is drawn uniformly from
/// `±rotation_deg`, shifts from `±shift · extent`, and each enabled flip is
/// a fair coin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub rotation_deg: f64,
    pub width_shift: f64,
    pub height_shift: f64,
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    pub fill: FillMode,
    pub seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            rotation_deg: 30.0,
            width_shift: 0.1,
            height_shift: 0.1,
            horizontal_flip: true,
            vertical_flip: true,
            fill: FillMode::Nearest,
            seed: 0,
        }
    }
}

impl AugmentSpec {
    /// No-op augmentation.
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            width_shift: 0.0,
            height_shift: 0.0,
            horizontal_flip: false,
            vertical_flip: false,
            fill: FillMode::Nearest,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=180.0).contains(&self.rotation_deg) {
            return Err(Error::Config(format!(
                "rotation range must be in [0, 180] degrees, got {}",
                self.rotation_deg
            )));
        }
        for (name, v) in [("width", self.width_shift), ("height", self.height_shift)] {
            if !(0.0..=0.5).contains(&v) {
                return Err(Error::Config(format!(
                    "{name} shift must be in [0, 0.5], got {v}"
                )));
            }
        }
        Ok(())
    }
}

fn dims(img: &Tensor) -> Result<(usize, usize, usize)> {
    match *img.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::Shape(format!(
            "augmentation needs an H×W×C image, got {:?}",
            img.shape()
        ))),
    }
}

pub fn flip_horizontal(img: &Tensor) -> Result<Tensor> {
    let (h, w, c) = dims(img)?;
    let src = img.data();
    Ok(Tensor::from_fn(&[h, w, c], |i| {
        let (y, x, ch) = (i / (w * c), i / c % w, i % c);
        src[(y * w + (w - 1 - x)) * c + ch]
    }))
}

pub fn flip_vertical(img: &Tensor) -> Result<Tensor> {
    let (h, w, c) = dims(img)?;
    let src = img.data();
    Ok(Tensor::from_fn(&[h, w, c], |i| {
        let (y, rest) = (i / (w * c), i % (w * c));
        src[(h - 1 - y) * w * c + rest]
    }))
}

/// Rotates counterclockwise by `degrees` about the image center, then
/// translates by `(dx, dy)` pixels, sampling bilinearly.
pub fn affine(img: &Tensor, degrees: f64, dx: f64, dy: f64, fill: FillMode) -> Result<Tensor> {
    let (h, w, c) = dims(img)?;
    if degrees == 0.0 && dx == 0.0 && dy == 0.0 {
        return Ok(img.clone());
    }
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let src = img.data();
    let mut out = vec![0.0f32; h * w * c];
    for oy in 0..h {
        for ox in 0..w {
            // inverse map: output pixel back into the source frame
            let (ux, uy) = (ox as f64 - cx - dx, oy as f64 - cy - dy);
            let sx = cos * ux - sin * uy + cx;
            let sy = sin * ux + cos * uy + cy;
            let px = &mut out[(oy * w + ox) * c..][..c];
            let outside = sx < -0.5 || sy < -0.5 || sx > w as f64 - 0.5 || sy > h as f64 - 0.5;
            if let (true, FillMode::Constant(v)) = (outside, fill) {
                px.fill(v);
                continue;
            }
            let sx = sx.clamp(0.0, w as f64 - 1.0);
            let sy = sy.clamp(0.0, h as f64 - 1.0);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for (ch, p) in px.iter_mut().enumerate() {
                let at = |y: usize, x: usize| src[(y * w + x) * c + ch] as f64;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                *p = (top * (1.0 - fy) + bottom * fy) as f32;
            }
        }
    }
    Tensor::new(vec![h, w, c], out)
}

pub fn rotate(img: &Tensor, degrees: f64, fill: FillMode) -> Result<Tensor> {
    affine(img, degrees, 0.0, 0.0, fill)
}

/// Applies one random draw of `spec` to an `H×W×C` image.
pub fn augment<R: Rng + ?Sized>(img: &Tensor, spec: &AugmentSpec, rng: &mut R) -> Result<Tensor> {
    spec.validate()?;
    let (h, w, _) = dims(img)?;
    let mut draw = |range: f64| {
        if range > 0.0 {
            rng.random_range(-range..=range)
        } else {
            0.0
        }
    };
    let degrees = draw(spec.rotation_deg);
    let dx = draw(spec.width_shift) * w as f64;
    let dy = draw(spec.height_shift) * h as f64;
    let mut out = affine(img, degrees, dx, dy, spec.fill)?;
    if spec.horizontal_flip && rng.random::<bool>() {
        out = flip_horizontal(&out)?;
    }
    if spec.vertical_flip && rng.random::<bool>() {
        out = flip_vertical(&out)?;
    }
    Ok(out)
}
