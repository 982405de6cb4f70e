use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const BANANA_CLASSES: [&str; 6] = [
    "Elakki",
    "Hill Banana",
    "Nendram",
    "Other Fruits",
    "Red Banana",
    "Robusta",
];

#[derive(Debug, Clone, Copy)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub size: u32,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(classes: usize, per_class: usize, seed: u64) -> Self {
        Self {
            classes,
            per_class,
            size: 64,
            seed,
        }
    }
}

/// Directory names: the six banana classes when `k == 6`, else `class_00`...
pub fn synth_class_names(k: usize) -> Vec<String> {
    if k == BANANA_CLASSES.len() {
        BANANA_CLASSES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..k).map(|i| format!("class_{i:02}")).collect()
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h.rem_euclid(360.0)) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Foreground outline of each shape family in the object's own frame, with
/// `a` the half-length and `b` the half-width.
fn inside(family: usize, u: f64, v: f64, a: f64, b: f64) -> bool {
    let (un, vn) = (u / a, v / b);
    match family % 6 {
        0 => un * un + vn * vn <= 1.0,
        1 => un.abs() <= 1.0 && vn.abs() <= 1.0,
        2 => un.abs() + vn.abs() <= 1.0,
        3 => {
            let r = un * un + vn * vn;
            (0.3..=1.0).contains(&r)
        }
        4 => (un.abs() <= 1.0 && vn.abs() <= 0.35) || (un.abs() <= 0.35 * b / a && vn.abs() <= 1.0),
        _ => vn >= -1.0 && un.abs() <= (1.0 - vn) / 2.0 && vn <= 1.0,
    }
}

/// One image of `class`: a rotated shape from the class family, in the class
/// hue, on a plain mid-grey background, with mild pixel noise. Neighbouring
/// classes alternate between bright and dark shades.
fn render(class: usize, classes: usize, size: u32, rng: &mut ChaCha8Rng) -> RgbImage {
    let s = size as f64;
    let hue = 360.0 * class as f64 / classes as f64 + rng.random_range(-5.0..5.0);
    let value = if class.is_multiple_of(2) { rng.random_range(0.85..1.0) } else { rng.random_range(0.45..0.6) };
    let fg = hsv_to_rgb(hue, rng.random_range(0.8..1.0), value);
    let bg = rng.random_range(112.0..142.0);
    let (cx, cy) = (
        s / 2.0 + rng.random_range(-0.1..0.1) * s,
        s / 2.0 + rng.random_range(-0.1..0.1) * s,
    );
    let a = rng.random_range(0.38..0.46) * s;
    let b = a * rng.random_range(0.65..0.9);
    let (sin, cos) = rng.random_range(0.0..std::f64::consts::PI).sin_cos();
    RgbImage::from_fn(size, size, |x, y| {
        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        let (u, v) = (cos * dx + sin * dy, -sin * dx + cos * dy);
        let noise = rng.random_range(-6.0..6.0);
        let px = |c: f64| (c + noise).round().clamp(0.0, 255.0) as u8;
        if inside(class, u, v, a, b) {
            Rgb(fg.map(|c| px(c * 255.0)))
        } else {
            Rgb([px(bg), px(bg), px(bg)])
        }
    })
}

/// Writes `classes` directories of `per_class` PNGs under `out`. Output is
/// byte-identical for a given spec. Returns the written paths.
pub fn generate_synthetic_corpus(out: &Path, spec: SynthSpec) -> Result<Vec<PathBuf>> {
    if spec.classes < 2 || spec.per_class < 1 {
        return Err(Error::Config(format!(
            "synthetic corpus needs at least 2 classes and 1 image per class, got {}×{}",
            spec.classes, spec.per_class
        )));
    }
    if spec.size < 8 {
        return Err(Error::Config(format!("image size {} is too small", spec.size)));
    }
    let mut written = Vec::new();
    for (class, name) in synth_class_names(spec.classes).iter().enumerate() {
        let dir = out.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(class as u64);
        for i in 0..spec.per_class {
            let path = dir.join(format!("{i:04}.png"));
            render(class, spec.classes, spec.size, &mut rng)
                .save(&path)
                .map_err(|e| Error::Image {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
            written.push(path);
        }
    }
    Ok(written)
}
