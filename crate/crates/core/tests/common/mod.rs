//! Oracles and helpers shared by the integration tests.

#![allow(dead_code)]

use musa::model::{ForwardOptions, LayerKind, LayerSpec, Model};
use musa::ops::{Activation, Mode, Padding};
use musa::{Shape4, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

pub fn spec(name: &str, kind: LayerKind) -> LayerSpec {
    LayerSpec {
        name: name.into(),
        kind,
        trainable: true,
    }
}

pub fn shape(h: usize, w: usize, c: usize) -> Shape4 {
    Shape4::new(h, w, c).unwrap()
}

pub fn conv(filters: usize, kernel: usize, stride: usize, padding: Padding, bias: bool) -> LayerKind {
    LayerKind::Conv {
        filters,
        kernel,
        stride,
        padding,
        bias,
    }
}

pub fn dwconv(stride: usize) -> LayerKind {
    LayerKind::DwConv {
        kernel: 3,
        stride,
        padding: Padding::Same,
    }
}

pub fn batchnorm() -> LayerKind {
    LayerKind::BatchNorm {
        epsilon: 1e-3,
        momentum: 0.99,
    }
}

pub fn act(function: Activation) -> LayerKind {
    LayerKind::Activation { function }
}

pub fn dense(units: usize, activation: Option<Activation>) -> LayerKind {
    LayerKind::Dense { units, activation }
}

/// Relative error with a floor on the denominator so that gradients that are
/// zero up to rounding do not divide by zero.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Default)]
pub struct GradCheck {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
}

impl GradCheck {
    fn record(&mut self, what: String, analytic: f64, numeric: f64) {
        let e = rel_err(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel || self.worst.is_empty() {
            self.max_rel = self.max_rel.max(e);
            if e >= self.max_rel {
                self.worst = format!("{what}: analytic {analytic:e} numeric {numeric:e}");
            }
        }
    }

    pub fn merge(&mut self, other: GradCheck) {
        if other.max_rel >= self.max_rel {
            self.max_rel = other.max_rel;
            self.worst = other.worst;
        }
        self.checked += other.checked;
    }
}

fn sample_coords(len: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        (0..max).map(|_| rng.random_range(0..len)).collect()
    }
}

/// Central finite differences of `L = Σ w ⊙ model(x)` against the engine's
/// backward pass, for the input and every trainable parameter.
pub fn fd_check(
    model: &mut Model<f64>,
    x: &Tensor<f64>,
    mode: Mode,
    h: f64,
    coords: usize,
    rng: &mut ChaCha8Rng,
) -> GradCheck {
    let opts = ForwardOptions {
        mode,
        cache_from: 0,
        capture: None,
        seed: 99,
    };
    let pass = model.forward(x, opts).unwrap();
    let w = uniform(pass.output.shape(), -1.0, 1.0, rng);
    let loss = |m: &Model<f64>, x: &Tensor<f64>| -> f64 {
        let y = m.forward(x, opts).unwrap().output;
        y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    };
    let last = model.layers().len() - 1;
    let back = model.backward(&pass, w.clone(), last, 0, true, true).unwrap();
    let dx = back.input_grad.unwrap();
    let mut check = GradCheck::default();

    let xb = if x.rank() == dx.rank() {
        x.clone()
    } else {
        x.reshaped(dx.shape()).unwrap()
    };
    for i in sample_coords(xb.len(), coords, rng) {
        let mut plus = xb.clone();
        plus.data_mut()[i] += h;
        let mut minus = xb.clone();
        minus.data_mut()[i] -= h;
        let numeric = (loss(model, &plus) - loss(model, &minus)) / (2.0 * h);
        check.record(format!("input[{i}]"), dx.data()[i], numeric);
    }

    let names: Vec<String> = model.trainable_param_names().into_iter().collect();
    for name in names {
        let analytic = back
            .grads
            .get(&name)
            .unwrap_or_else(|| panic!("no gradient for {name}"))
            .clone();
        let len = analytic.len();
        for i in sample_coords(len, coords, rng) {
            let orig = model.params().get(&name).unwrap().data()[i];
            model.params_mut().get_mut(&name).unwrap().data_mut()[i] = orig + h;
            let lp = loss(model, x);
            model.params_mut().get_mut(&name).unwrap().data_mut()[i] = orig - h;
            let lm = loss(model, x);
            model.params_mut().get_mut(&name).unwrap().data_mut()[i] = orig;
            check.record(format!("{name}[{i}]"), analytic.data()[i], (lp - lm) / (2.0 * h));
        }
    }
    check
}

/// Standard convolution straight from the definition, six nested loops.
pub fn conv2d_naive(
    x: &Tensor<f64>,
    k: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: usize,
    padding: Padding,
) -> Tensor<f64> {
    let &[h, w, cin] = x.shape() else { panic!("rank") };
    let &[kh, kw, kc, cout] = k.shape() else { panic!("rank") };
    assert_eq!(kc, cin);
    let (oh, ow, pt, pl) = out_geometry(h, w, kh, kw, stride, padding);
    let mut out = Tensor::zeros(&[oh, ow, cout]);
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..cout {
                let mut acc = bias.map_or(0.0, |b| b.data()[co]);
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * stride + ky) as isize - pt as isize;
                        let ix = (ox * stride + kx) as isize - pl as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            acc += x.get(&[iy as usize, ix as usize, ci]) * k.get(&[ky, kx, ci, co]);
                        }
                    }
                }
                let off = out.offset(&[oy, ox, co]);
                out.data_mut()[off] = acc;
            }
        }
    }
    out
}

pub fn depthwise_naive(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, padding: Padding) -> Tensor<f64> {
    let &[h, w, c] = x.shape() else { panic!("rank") };
    let &[kh, kw, kc] = k.shape() else { panic!("rank") };
    assert_eq!(kc, c);
    let (oh, ow, pt, pl) = out_geometry(h, w, kh, kw, stride, padding);
    let mut out = Tensor::zeros(&[oh, ow, c]);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut acc = 0.0;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * stride + ky) as isize - pt as isize;
                        let ix = (ox * stride + kx) as isize - pl as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        acc += x.get(&[iy as usize, ix as usize, ch]) * k.get(&[ky, kx, ch]);
                    }
                }
                let off = out.offset(&[oy, ox, ch]);
                out.data_mut()[off] = acc;
            }
        }
    }
    out
}

pub fn pointwise_naive(x: &Tensor<f64>, k: &Tensor<f64>) -> Tensor<f64> {
    let &[h, w, cin] = x.shape() else { panic!("rank") };
    let &[1, 1, kc, cout] = k.shape() else { panic!("rank") };
    assert_eq!(kc, cin);
    let mut out = Tensor::zeros(&[h, w, cout]);
    for y in 0..h {
        for xx in 0..w {
            for co in 0..cout {
                let acc: f64 = (0..cin).map(|ci| x.get(&[y, xx, ci]) * k.get(&[0, 0, ci, co])).sum();
                let off = out.offset(&[y, xx, co]);
                out.data_mut()[off] = acc;
            }
        }
    }
    out
}

/// Output extent and leading padding, written out independently of the
/// library: "same" pads to `ceil(n / s)` with the smaller half first.
fn out_geometry(h: usize, w: usize, kh: usize, kw: usize, s: usize, p: Padding) -> (usize, usize, usize, usize) {
    match p {
        Padding::Valid => ((h - kh) / s + 1, (w - kw) / s + 1, 0, 0),
        Padding::Same => {
            let oh = h.div_ceil(s);
            let ow = w.div_ceil(s);
            let ph = ((oh - 1) * s + kh).saturating_sub(h);
            let pw = ((ow - 1) * s + kw).saturating_sub(w);
            (oh, ow, ph / 2, pw / 2)
        }
    }
}

/// Plain scalar Adam, kept deliberately separate from the library code.
pub struct RefAdam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl RefAdam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], g: &[f64], lr: f64) {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-7f64);
        self.t += 1;
        for i in 0..theta.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = self.m[i] / (1.0 - b1.powi(self.t));
            let vh = self.v[i] / (1.0 - b2.powi(self.t));
            theta[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

/// Inputs kept at least `gap` away from the activation kinks at 0 and 6.
pub fn off_kinks(shape: &[usize], lo: f64, hi: f64, gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| loop {
        let v = rng.random_range(lo..hi);
        if v.abs() > gap && (v - 6.0).abs() > gap {
            break v;
        }
    })
}

/// Distinct values on a grid of spacing `step`, shuffled, so that no pooling
/// window has a tie.
pub fn distinct(shape: &[usize], step: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * step).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Scrambles every parameter, keeping moving variances positive.
pub fn randomize(model: &mut Model<f64>, rng: &mut ChaCha8Rng) {
    for (name, t) in model.params_mut().iter_mut() {
        let positive = name.ends_with("moving_variance");
        for v in t.data_mut() {
            *v = if positive {
                rng.random_range(0.5..1.5)
            } else {
                rng.random_range(-0.6..0.6)
            };
        }
    }
}

pub struct GradCase {
    pub name: &'static str,
    pub model: Model<f64>,
    pub input: Tensor<f64>,
    pub mode: Mode,
}

fn case(
    name: &'static str,
    input: Shape4,
    layers: Vec<LayerSpec>,
    x: Tensor<f64>,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> GradCase {
    let mut model = Model::new(input, layers, rng).unwrap();
    randomize(&mut model, rng);
    GradCase {
        name,
        model,
        input: x,
        mode,
    }
}

/// One small model per layer kind, in the configurations both architectures
/// use, plus two end-to-end stacks.
pub fn gradient_cases(seed: u64) -> Vec<GradCase> {
    use Activation::{Relu, Relu6};
    let r = &mut rng(seed);
    let mut cases = Vec::new();

    let x = uniform(&[2, 9, 9, 3], -1.0, 1.0, r);
    cases.push(case("conv 3x3 s2 same", shape(9, 9, 3), vec![spec("c", conv(4, 3, 2, Padding::Same, false))], x, Mode::Train, r));
    let x = uniform(&[2, 8, 8, 3], -1.0, 1.0, r);
    cases.push(case("conv 3x3 s1 same + bias", shape(8, 8, 3), vec![spec("c", conv(5, 3, 1, Padding::Same, true))], x, Mode::Train, r));
    let x = uniform(&[1, 7, 6, 2], -1.0, 1.0, r);
    cases.push(case("conv 3x3 s2 valid + bias", shape(7, 6, 2), vec![spec("c", conv(3, 3, 2, Padding::Valid, true))], x, Mode::Train, r));
    let x = uniform(&[2, 7, 7, 4], -1.0, 1.0, r);
    cases.push(case("depthwise 3x3 s1", shape(7, 7, 4), vec![spec("d", dwconv(1))], x, Mode::Train, r));
    let x = uniform(&[2, 8, 8, 3], -1.0, 1.0, r);
    cases.push(case("depthwise 3x3 s2", shape(8, 8, 3), vec![spec("d", dwconv(2))], x, Mode::Train, r));
    let x = uniform(&[2, 5, 5, 6], -1.0, 1.0, r);
    cases.push(case("pointwise 1x1", shape(5, 5, 6), vec![spec("p", LayerKind::PwConv { filters: 5 })], x, Mode::Train, r));
    let x = uniform(&[3, 3, 3, 4], -2.0, 2.0, r);
    cases.push(case("batchnorm train", shape(3, 3, 4), vec![spec("bn", batchnorm())], x, Mode::Train, r));
    let x = uniform(&[3, 3, 3, 4], -2.0, 2.0, r);
    cases.push(case("batchnorm infer", shape(3, 3, 4), vec![spec("bn", batchnorm())], x, Mode::Infer, r));
    let x = off_kinks(&[2, 4, 4, 3], -3.0, 3.0, 0.01, r);
    cases.push(case("relu", shape(4, 4, 3), vec![spec("a", act(Relu))], x, Mode::Train, r));
    let x = off_kinks(&[2, 4, 4, 3], -3.0, 9.0, 0.01, r);
    cases.push(case("relu6", shape(4, 4, 3), vec![spec("a", act(Relu6))], x, Mode::Train, r));
    let x = distinct(&[2, 6, 6, 3], 0.01, r);
    cases.push(case("maxpool 2x2 s2", shape(6, 6, 3), vec![spec("m", LayerKind::MaxPool { window: 2, stride: 2 })], x, Mode::Train, r));
    let x = uniform(&[2, 4, 3, 5], -1.0, 1.0, r);
    cases.push(case("global average pool", shape(4, 3, 5), vec![spec("g", LayerKind::Gap)], x, Mode::Train, r));
    let x = uniform(&[2, 3, 3, 2], -1.0, 1.0, r);
    cases.push(case(
        "flatten + dense",
        shape(3, 3, 2),
        vec![spec("f", LayerKind::Flatten), spec("fc", dense(4, None))],
        x,
        Mode::Train,
        r,
    ));
    let x = off_kinks(&[3, 1, 1, 6], -2.0, 2.0, 0.01, r);
    cases.push(case(
        "dense + fused relu",
        shape(1, 1, 6),
        vec![spec("g", LayerKind::Gap), spec("fc", dense(5, Some(Relu)))],
        x,
        Mode::Train,
        r,
    ));
    let x = uniform(&[2, 2, 2, 4], -1.0, 1.0, r);
    cases.push(case("dropout train", shape(2, 2, 4), vec![spec("dr", LayerKind::Dropout { rate: 0.5 })], x, Mode::Train, r));
    let x = uniform(&[3, 1, 1, 5], -2.0, 2.0, r);
    cases.push(case(
        "softmax",
        shape(1, 1, 5),
        vec![spec("g", LayerKind::Gap), spec("s", LayerKind::Softmax)],
        x,
        Mode::Train,
        r,
    ));

    let separable = || {
        vec![
            spec("conv1", conv(4, 3, 2, Padding::Same, false)),
            spec("conv1_bn", batchnorm()),
            spec("conv1_relu", act(Relu6)),
            spec("dw1", dwconv(1)),
            spec("dw1_bn", batchnorm()),
            spec("dw1_relu", act(Relu6)),
            spec("pw1", LayerKind::PwConv { filters: 6 }),
            spec("pw1_bn", batchnorm()),
            spec("pw1_relu", act(Relu6)),
            spec("dw2", dwconv(2)),
            spec("dw2_bn", batchnorm()),
            spec("dw2_relu", act(Relu6)),
            spec("pw2", LayerKind::PwConv { filters: 8 }),
            spec("pw2_bn", batchnorm()),
            spec("pw2_relu", act(Relu6)),
            spec("gap", LayerKind::Gap),
            spec("fc1", dense(6, Some(Relu))),
            spec("drop", LayerKind::Dropout { rate: 0.3 }),
            spec("out", dense(3, None)),
            spec("softmax", LayerKind::Softmax),
        ]
    };
    let x = uniform(&[2, 8, 8, 3], -1.0, 1.0, r);
    cases.push(case("separable stack train", shape(8, 8, 3), separable(), x, Mode::Train, r));
    let x = uniform(&[2, 8, 8, 3], -1.0, 1.0, r);
    cases.push(case("separable stack infer", shape(8, 8, 3), separable(), x, Mode::Infer, r));

    let base = vec![
        spec("conv1", conv(4, 3, 1, Padding::Same, true)),
        spec("conv1_bn", batchnorm()),
        spec("conv1_relu", act(Relu)),
        spec("pool1", LayerKind::MaxPool { window: 2, stride: 2 }),
        spec("conv2", conv(5, 3, 1, Padding::Same, true)),
        spec("conv2_relu", act(Relu)),
        spec("pool2", LayerKind::MaxPool { window: 2, stride: 2 }),
        spec("flatten", LayerKind::Flatten),
        spec("fc1", dense(6, Some(Relu))),
        spec("drop", LayerKind::Dropout { rate: 0.5 }),
        spec("out", dense(3, None)),
        spec("softmax", LayerKind::Softmax),
    ];
    let x = uniform(&[2, 8, 8, 3], -1.0, 1.0, r);
    cases.push(case("plain conv stack train", shape(8, 8, 3), base, x, Mode::Train, r));
    cases
}
