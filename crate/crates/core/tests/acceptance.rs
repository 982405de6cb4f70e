//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Pass substrings as arguments to run a subset.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::*;
use musa::data::{generate_synthetic_corpus, scan_dataset, split_dataset, ImageSource, Split, SynthSpec};
use musa::gradcam::compute_gradcam;
use musa::model::{
    attach_transfer_head, build_base_cnn, build_mobilenet, build_mobilenet_for_input, load_weights, ntw,
    save_weights, summarize, LayerKind, Model, WeightStore,
};
use musa::ops::{conv2d, depthwise_conv2d, pointwise_conv2d, ConvParams, Padding};
use musa::tensor::Scalar;
use musa::train::{
    adam_step, classification_report, score_split, train, AdamState, ConfusionMatrix, Ratio, TrainConfig,
};
use musa::{Error, Shape4, Tensor};
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

/// Whole percent, half rounded up, in integers.
fn pct(num: u64, den: u64) -> u64 {
    if den == 0 {
        0
    } else {
        (200 * num + den) / (2 * den)
    }
}

fn metrics_oracle() -> Outcome {
    let rows = vec![
        vec![10, 4, 0, 0, 1, 0],
        vec![0, 4, 0, 0, 0, 1],
        vec![1, 1, 10, 0, 0, 1],
        vec![0, 0, 0, 22, 0, 0],
        vec![1, 0, 0, 0, 46, 0],
        vec![0, 0, 0, 0, 0, 49],
    ];
    let classes = names(&["Elakki", "Hill Banana", "Nendram", "Other Fruits", "Red Banana", "Robusta"]);
    let precision = [83, 44, 100, 100, 98, 96];
    let recall = [67, 80, 77, 100, 98, 100];
    let f1 = [74, 57, 87, 100, 98, 98];
    let support = [15, 5, 13, 22, 47, 49];

    let cm = ConfusionMatrix::from_rows(rows.clone()).map_err(|e| e.to_string())?;
    let report = classification_report(&cm, &classes).map_err(|e| e.to_string())?;
    for (c, m) in report.classes.iter().enumerate() {
        let tp = rows[c][c];
        let row: u64 = rows[c].iter().sum();
        let col: u64 = rows.iter().map(|r| r[c]).sum();
        ensure(m.precision.same_value(Ratio::new(tp, col)), || format!("{} precision {}", m.name, m.precision))?;
        ensure(m.recall.same_value(Ratio::new(tp, row)), || format!("{} recall {}", m.name, m.recall))?;
        ensure(m.f1.same_value(Ratio::new(2 * tp, row + col)), || format!("{} f1 {}", m.name, m.f1))?;
        for (what, got, exact, want) in [
            ("precision", m.precision.percent(), 100.0 * tp as f64 / col as f64, precision[c]),
            ("recall", m.recall.percent(), 100.0 * tp as f64 / row as f64, recall[c]),
            ("f1", m.f1.percent(), 200.0 * tp as f64 / (row + col) as f64, f1[c]),
        ] {
            ensure(got == want && (exact - want as f64).abs() <= 0.5, || {
                format!("{} {what}: {got}% (exact {exact:.3}) vs table {want}%", m.name)
            })?;
        }
        ensure(m.support == support[c], || format!("{} support {}", m.name, m.support))?;
    }
    let acc = report.accuracy;
    ensure(acc.same_value(Ratio::new(141, 151)), || format!("accuracy {acc}"))?;
    ensure(acc.per_mille() == 934, || format!("accuracy {} per mille", acc.per_mille()))?;
    ensure((100.0 * acc.value() - 93.40).abs() <= 0.05, || format!("accuracy {}", acc.value()))?;
    ensure(report.total == 151, || format!("total {}", report.total))?;
    Ok("per-class cells and 141/151 = 93.4%".into())
}

fn quality_oracle() -> Outcome {
    let cm = ConfusionMatrix::from_rows(vec![vec![5, 0], vec![0, 10]]).map_err(|e| e.to_string())?;
    let report = classification_report(&cm, &names(&["Good Quality", "Bad Quality"])).map_err(|e| e.to_string())?;
    ensure(report.accuracy.same_value(Ratio::new(15, 15)), || format!("accuracy {}", report.accuracy))?;
    ensure(report.accuracy.percent() == pct(15, 15) && pct(15, 15) == 100, || "not 100%".into())?;
    Ok("15/15 = 100%".into())
}

fn architecture_trace() -> Outcome {
    let mut expected: Vec<(&str, String, String)> = vec![
        ("Conv / s2", "3×3×3×32".into(), "224×224×3".into()),
        ("Conv dw / s1", "3×3×32 dw".into(), "112×112×32".into()),
        ("Conv / s1", "1×1×32×64".into(), "112×112×32".into()),
        ("Conv dw / s2", "3×3×64 dw".into(), "112×112×64".into()),
        ("Conv / s1", "1×1×64×128".into(), "56×56×64".into()),
        ("Conv dw / s1", "3×3×128 dw".into(), "56×56×128".into()),
        ("Conv / s1", "1×1×128×128".into(), "56×56×128".into()),
        ("Conv dw / s2", "3×3×128 dw".into(), "56×56×128".into()),
        ("Conv / s1", "1×1×128×256".into(), "28×28×128".into()),
        ("Conv dw / s1", "3×3×256 dw".into(), "28×28×256".into()),
        ("Conv / s1", "1×1×256×256".into(), "28×28×256".into()),
        ("Conv dw / s2", "3×3×256 dw".into(), "28×28×256".into()),
        ("Conv / s1", "1×1×256×512".into(), "14×14×256".into()),
    ];
    for _ in 0..5 {
        expected.push(("Conv dw / s1", "3×3×512 dw".into(), "14×14×512".into()));
        expected.push(("Conv / s1", "1×1×512×512".into(), "14×14×512".into()));
    }
    expected.extend([
        ("Conv dw / s2", "3×3×512 dw".into(), "14×14×512".into()),
        ("Conv / s1", "1×1×512×1024".into(), "7×7×512".into()),
        // Stride 1: the row after it still takes a 7×7 input.
        ("Conv dw / s1", "3×3×1024 dw".into(), "7×7×1024".into()),
        ("Conv / s1", "1×1×1024×1024".into(), "7×7×1024".into()),
        ("Avg Pool / s1", "Pool 7×7".into(), "7×7×1024".into()),
        ("FC / s1", "1024×1000".into(), "1×1×1024".into()),
        ("Softmax / s1", "Classifier".into(), "1×1×1000".into()),
    ]);

    let model = build_mobilenet(true, &mut rng(0)).map_err(|e| e.to_string())?;
    let rows: Vec<_> = summarize(&model).into_iter().filter(|r| r.architectural).collect();
    ensure(rows.len() == expected.len(), || {
        format!("{} architectural rows, expected {}", rows.len(), expected.len())
    })?;
    for (i, (row, (ty, filter, input))) in rows.iter().zip(&expected).enumerate() {
        let got = (row.type_stride.as_str(), &row.filter_shape, &row.input_size);
        ensure(got == (*ty, filter, input), || format!("row {}: {got:?} vs {:?}", i + 1, (ty, filter, input)))?;
    }
    let convs = model.layers().iter().filter(|l| l.kind.is_conv()).count();
    ensure(convs == 27, || format!("{convs} conv-family layers"))?;

    let base = build_base_cnn(6, &mut rng(0)).map_err(|e| e.to_string())?;
    let count = |f: fn(&LayerKind) -> bool| base.layers().iter().filter(|l| f(&l.kind)).count();
    let census = [
        count(|k| matches!(k, LayerKind::Conv { .. })),
        count(|k| matches!(k, LayerKind::MaxPool { .. })),
        count(|k| matches!(k, LayerKind::BatchNorm { .. })),
        count(|k| matches!(k, LayerKind::Dropout { .. })),
        count(|k| matches!(k, LayerKind::Dense { .. })),
    ];
    ensure(census == [4, 4, 3, 1, 4], || format!("base census conv/pool/bn/dropout/dense {census:?}"))?;
    ensure(base.input_shape() == Shape4::new(256, 256, 3).unwrap(), || "base input".into())?;
    ensure(base.num_outputs() == 6, || "base output width".into())?;
    Ok(format!("{} layer-table rows, base census {census:?}", rows.len()))
}

fn gradient_suite() -> Outcome {
    let mut total = GradCheck::default();
    let cases = gradient_cases(11);
    let n = cases.len();
    for mut case in cases {
        let check = fd_check(&mut case.model, &case.input, case.mode, 1e-5, 40, &mut rng(5));
        ensure(check.max_rel < 1e-4, || format!("{}: {:.2e} at {}", case.name, check.max_rel, check.worst))?;
        total.merge(check);
    }
    Ok(format!("{n} models, {} coordinates, max rel {:.2e}", total.checked, total.max_rel))
}

fn norm_rel(got: &Tensor<f64>, want: &Tensor<f64>) -> f64 {
    let scale = want.max_abs().max(f64::MIN_POSITIVE);
    got.max_abs_diff(want) / scale
}

fn per_sample<F: Fn(&Tensor<f64>) -> Tensor<f64>>(x: &Tensor<f64>, f: F) -> Tensor<f64> {
    let n = x.shape()[0];
    let per = x.len() / n;
    let mut parts = Vec::new();
    let mut shape = Vec::new();
    for b in 0..n {
        let xi = Tensor::new(x.shape()[1..].to_vec(), x.data()[b * per..(b + 1) * per].to_vec()).unwrap();
        let y = f(&xi);
        shape = y.shape().to_vec();
        parts.extend_from_slice(y.data());
    }
    shape.insert(0, n);
    Tensor::new(shape, parts).unwrap()
}

fn conv_oracles() -> Outcome {
    let r = &mut rng(2024);
    let (mut worst, mut cases) = (0.0f64, 0);
    for _ in 0..120 {
        let k = [1, 3, 5][r.random_range(0..3)];
        let (h, w) = (r.random_range(k..k + 8), r.random_range(k..k + 8));
        let (cin, cout) = (r.random_range(1..6), r.random_range(1..6));
        let stride = r.random_range(1..4);
        let padding = if r.random_bool(0.5) { Padding::Same } else { Padding::Valid };
        let n = r.random_range(1..3);
        let x = uniform(&[n, h, w, cin], -1.0, 1.0, r);

        let kernel = uniform(&[k, k, cin, cout], -1.0, 1.0, r);
        let bias = r.random_bool(0.5).then(|| uniform(&[cout], -1.0, 1.0, r));
        let p = ConvParams { kernel: kernel.clone(), bias: bias.clone(), stride, padding };
        let got = conv2d(&x, &p).map_err(|e| e.to_string())?;
        let want = per_sample(&x, |xi| conv2d_naive(xi, &kernel, bias.as_ref(), stride, padding));
        ensure(got.shape() == want.shape(), || format!("conv2d shape {:?} vs {:?}", got.shape(), want.shape()))?;
        worst = worst.max(norm_rel(&got, &want));

        let dk = uniform(&[k, k, cin], -1.0, 1.0, r);
        let p = ConvParams::new(dk.clone(), stride, padding);
        let got = depthwise_conv2d(&x, &p).map_err(|e| e.to_string())?;
        let want = per_sample(&x, |xi| depthwise_naive(xi, &dk, stride, padding));
        ensure(got.shape() == want.shape(), || format!("depthwise shape {:?} vs {:?}", got.shape(), want.shape()))?;
        worst = worst.max(norm_rel(&got, &want));

        let pk = uniform(&[1, 1, cin, cout], -1.0, 1.0, r);
        let got = pointwise_conv2d(&x, &ConvParams::new(pk.clone(), 1, Padding::Same)).map_err(|e| e.to_string())?;
        let want = per_sample(&x, |xi| pointwise_naive(xi, &pk));
        worst = worst.max(norm_rel(&got, &want));
        cases += 3;
    }
    ensure(worst < 1e-6, || format!("loop oracle relative error {worst:e}"))?;

    let mut composed = 0.0f64;
    for _ in 0..30 {
        let (h, w) = (r.random_range(3..10), r.random_range(3..10));
        let (cin, cout) = (r.random_range(1..7), r.random_range(1..7));
        let stride = r.random_range(1..3);
        let x = uniform(&[2, h, w, cin], -1.0, 1.0, r);
        let d = uniform(&[3, 3, cin], -1.0, 1.0, r);
        let p = uniform(&[1, 1, cin, cout], -1.0, 1.0, r);
        let full = Tensor::from_fn(&[3, 3, cin, cout], |i| {
            let (co, ci, tap) = (i % cout, (i / cout) % cin, i / (cout * cin));
            d.data()[tap * cin + ci] * p.data()[ci * cout + co]
        });
        let check = |x: Tensor<f64>| -> Result<f64, String> {
            let sep = pointwise_conv2d(
                &depthwise_conv2d(&x, &ConvParams::new(d.clone(), stride, Padding::Same)).map_err(|e| e.to_string())?,
                &ConvParams::new(p.clone(), 1, Padding::Same),
            )
            .map_err(|e| e.to_string())?;
            let dense = conv2d(&x, &ConvParams::new(full.clone(), stride, Padding::Same)).map_err(|e| e.to_string())?;
            Ok(norm_rel(&sep, &dense))
        };
        composed = composed.max(check(x.clone())?);
        let f32_err = {
            let x32 = x.cast::<f32>();
            let sep = pointwise_conv2d(
                &depthwise_conv2d(&x32, &ConvParams::new(d.cast(), stride, Padding::Same)).map_err(|e| e.to_string())?,
                &ConvParams::new(p.cast(), 1, Padding::Same),
            )
            .map_err(|e| e.to_string())?;
            let dense = conv2d(&x32, &ConvParams::new(full.cast(), stride, Padding::Same)).map_err(|e| e.to_string())?;
            norm_rel(&sep.cast(), &dense.cast())
        };
        composed = composed.max(f32_err);
    }
    ensure(composed < 1e-5, || format!("depthwise∘pointwise vs full conv {composed:e}"))?;
    Ok(format!("{cases} loop cases max rel {worst:.1e}; composition max rel {composed:.1e}"))
}

fn optimizer_oracle() -> Outcome {
    let r = &mut rng(77);
    let lr = 1e-3;
    let mut worst = 0.0f64;
    for random in [false, true] {
        let n = 7;
        let theta0: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let constant: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
        let mut params = WeightStore::new();
        params.insert("w", Tensor::new(vec![n], theta0.clone()).unwrap());
        let mut state = AdamState::<f64>::new();
        let mut reference = RefAdam::new(n);
        let mut theta = theta0.clone();
        for t in 1..=5 {
            let g: Vec<f64> = if random {
                (0..n).map(|_| r.random_range(-2.0..2.0)).collect()
            } else {
                constant.clone()
            };
            let mut grads = WeightStore::new();
            grads.insert("w", Tensor::new(vec![n], g.clone()).unwrap());
            adam_step(&mut params, &grads, &mut state, lr).map_err(|e| e.to_string())?;
            reference.step(&mut theta, &g, lr);
            let got = params.get("w").unwrap().data();
            for i in 0..n {
                worst = worst.max((got[i] - theta[i]).abs());
                if !random {
                    // Constant gradients make both bias-corrected moments exact.
                    let closed = theta0[i] - t as f64 * lr * g[i] / (g[i].abs() + 1e-7);
                    worst = worst.max((got[i] - closed).abs());
                }
            }
        }
    }
    ensure(worst < 1e-10, || format!("max deviation {worst:e}"))?;
    Ok(format!("5 constant + 5 random steps, max deviation {worst:.1e}"))
}

struct E2eRun {
    train_acc: f64,
    val_acc: f64,
    first_loss: f64,
    last_loss: f64,
    log_csv: String,
    params: WeightStore,
}

fn e2e_run(seed: u64) -> Result<E2eRun, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    generate_synthetic_corpus(dir.path(), SynthSpec::new(6, 50, seed)).map_err(|e| e.to_string())?;
    let ds = scan_dataset(dir.path()).map_err(|e| e.to_string())?;
    let ds = split_dataset(&ds, [0.76, 0.19, 0.05], seed).map_err(|e| e.to_string())?;
    let input = Shape4::new(64, 64, 3).unwrap();
    let r = &mut rng(seed);
    let backbone = build_mobilenet_for_input(input, false, r).map_err(|e| e.to_string())?;
    let freeze = backbone.layers().len();
    let mut model = attach_transfer_head(backbone, 6, r).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 16,
        freeze_first_n: freeze,
        seed,
        ..TrainConfig::default()
    };
    let source = ImageSource::new(input, true).map_err(|e| e.to_string())?;
    let log = train(&mut model, &ds, &cfg, &source).map_err(|e| e.to_string())?;
    let tr = score_split(&model, &ds, Split::Train, &source, 32).map_err(|e| e.to_string())?;
    let va = score_split(&model, &ds, Split::Val, &source, 32).map_err(|e| e.to_string())?;
    Ok(E2eRun {
        train_acc: tr.accuracy(),
        val_acc: va.accuracy(),
        first_loss: log.epochs.first().map_or(f64::NAN, |r| r.train_loss),
        last_loss: log.epochs.last().map_or(f64::NAN, |r| r.train_loss),
        log_csv: log.to_csv(),
        params: model.params().clone(),
    })
}

fn e2e_learnability() -> Outcome {
    let seed = 7;
    let a = e2e_run(seed)?;
    ensure(a.train_acc >= 0.95, || format!("train accuracy {:.3}", a.train_acc))?;
    ensure(a.val_acc >= 0.90, || format!("validation accuracy {:.3}", a.val_acc))?;
    ensure(a.last_loss < a.first_loss, || format!("train loss {} -> {}", a.first_loss, a.last_loss))?;
    let b = e2e_run(seed)?;
    ensure(a.log_csv == b.log_csv, || "training log differs between identical runs".into())?;
    let same = a.params.iter().all(|(name, t)| {
        b.params.get(name).is_some_and(|u| t.data().iter().zip(u.data()).all(|(x, y)| x.to_bits() == y.to_bits()))
    });
    ensure(same, || "weights differ between identical runs".into())?;
    Ok(format!(
        "seed {seed}: train {:.3}, val {:.3}, loss {:.3} -> {:.3}, rerun identical",
        a.train_acc, a.val_acc, a.first_loss, a.last_loss
    ))
}

fn freeze_invariance() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = SynthSpec { size: 32, ..SynthSpec::new(3, 6, 3) };
    generate_synthetic_corpus(dir.path(), spec).map_err(|e| e.to_string())?;
    let ds = split_dataset(&scan_dataset(dir.path()).map_err(|e| e.to_string())?, [0.5, 0.33, 0.17], 3)
        .map_err(|e| e.to_string())?;
    let input = Shape4::new(32, 32, 3).unwrap();
    let r = &mut rng(3);
    let backbone = build_mobilenet_for_input(input, false, r).map_err(|e| e.to_string())?;
    let mut model = attach_transfer_head(backbone, 3, r).map_err(|e| e.to_string())?;
    let before = model.clone();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        freeze_first_n: 20,
        seed: 3,
        ..TrainConfig::default()
    };
    let source = ImageSource::new(input, true).map_err(|e| e.to_string())?;
    train(&mut model, &ds, &cfg, &source).map_err(|e| e.to_string())?;
    let bits = |m: &Model, name: &str| -> Vec<u32> { m.params().get(name).unwrap().data().iter().map(|v| v.to_bits()).collect() };
    let (mut frozen, mut moved) = (0, 0);
    for i in 0..model.layers().len() {
        for (_, name) in model.layer_params(i) {
            let same = bits(&before, &name) == bits(&model, &name);
            if i < 20 {
                ensure(same, || format!("layer {} parameter {name} changed", i + 1))?;
                frozen += 1;
            } else if !same {
                moved += 1;
            }
        }
    }
    ensure(moved > 0, || "no trainable parameter moved".into())?;
    Ok(format!("{frozen} tensors in layers 1-20 bit-identical, {moved} later tensors updated"))
}

fn gradcam_oracle() -> Outcome {
    let r = &mut rng(31);
    let layers = vec![
        spec("conv", conv(4, 3, 1, Padding::Same, true)),
        spec("gap", LayerKind::Gap),
        spec("fc", dense(3, None)),
        spec("softmax", LayerKind::Softmax),
    ];
    let mut toy: Model<f64> = Model::new(shape(6, 5, 2), layers, r).map_err(|e| e.to_string())?;
    randomize(&mut toy, r);
    let model: Model = toy.cast();
    let x = uniform(&[6, 5, 2], -1.0, 1.0, r).cast::<f32>();
    let kernel = model.params().get("conv/kernel").unwrap().cast::<f64>();
    let bias = model.params().get("conv/bias").unwrap().cast::<f64>();
    let fc = model.params().get("fc/kernel").unwrap().cast::<f64>();
    let a = conv2d_naive(&x.cast(), &kernel, Some(&bias), 1, Padding::Same);
    let (mut alpha_err, mut map_err) = (0.0f64, 0.0f64);
    for class in 0..3 {
        let cam = compute_gradcam(&model, &x, class).map_err(|e| e.to_string())?;
        ensure(cam.heatmap.shape() == [6, 5], || format!("map shape {:?}", cam.heatmap.shape()))?;
        for c in 0..4 {
            let want = fc.get(&[c, class]);
            alpha_err = alpha_err.max((cam.weights[c] as f64 * 30.0 - want).abs());
        }
        let raw: Vec<f64> = a
            .data()
            .chunks_exact(4)
            .map(|px| px.iter().enumerate().map(|(c, v)| v * fc.get(&[c, class])).sum::<f64>().max(0.0))
            .collect();
        let max = raw.iter().copied().fold(0.0, f64::max);
        for (got, want) in cam.heatmap.data().iter().zip(&raw) {
            let want = if max > 0.0 { want / max } else { 0.0 };
            map_err = map_err.max((*got as f64 - want).abs());
        }
    }
    ensure(alpha_err < 1e-6, || format!("channel weights off by {alpha_err:e}"))?;
    ensure(map_err < 1e-6, || format!("map off by {map_err:e}"))?;

    let r = &mut rng(5);
    let mobilenet = build_mobilenet(true, r).map_err(|e| e.to_string())?;
    let image = Tensor::from_fn(&[224, 224, 3], |_| r.random_range(-1.0f32..1.0));
    let cam = compute_gradcam(&mobilenet, &image, 3).map_err(|e| e.to_string())?;
    ensure(cam.heatmap.shape() == [7, 7], || format!("MobileNet map {:?}", cam.heatmap.shape()))?;
    ensure(mobilenet.layers()[cam.layer].name == "conv_pw_13", || {
        format!("Grad-CAM layer {}", mobilenet.layers()[cam.layer].name)
    })?;
    Ok(format!("alpha·hw vs dense row {alpha_err:.1e}, map {map_err:.1e}; MobileNet map 7×7"))
}

fn bit_equal<T: Scalar>(a: &WeightStore<T>, b: &WeightStore<T>) -> bool {
    a.len() == b.len()
        && a.iter().zip(b.iter()).all(|((na, ta), (nb, tb))| {
            na == nb
                && ta.shape() == tb.shape()
                && ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_f64_lossy().to_bits() == y.to_f64_lossy().to_bits())
        })
}

fn ntw_roundtrip() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut tensors = 0;
    for (label, model) in [
        ("mobilenet", build_mobilenet(true, &mut rng(1)).map_err(|e| e.to_string())?),
        ("base", build_base_cnn(6, &mut rng(2)).map_err(|e| e.to_string())?),
    ] {
        let path = dir.path().join(format!("{label}.ntw"));
        save_weights(&model, &path).map_err(|e| e.to_string())?;
        let mut fresh = model.clone();
        for (_, t) in fresh.params_mut().iter_mut() {
            t.data_mut().fill(0.0);
        }
        let report = load_weights(&mut fresh, &path).map_err(|e| e.to_string())?;
        ensure(report.bound.len() == model.params().len(), || format!("{label}: bound {}", report.bound.len()))?;
        ensure(bit_equal(model.params(), fresh.params()), || format!("{label}: tensors differ after reload"))?;
        tensors += report.bound.len();
    }

    let path = dir.path().join("mobilenet.ntw");
    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    ensure(&bytes[..4] == b"NTW1", || "magic".into())?;
    let mut bad = bytes.clone();
    bad[0] = b'X';
    match ntw::decode(&bad) {
        Err(Error::Format(m)) if m.contains("bad magic") => {}
        other => return Err(format!("corrupted magic: {other:?}")),
    }
    for cut in [2, 7, 40, bytes.len() / 2, bytes.len() - 1] {
        match ntw::decode(&bytes[..cut]) {
            Err(Error::Format(m)) if m.contains("truncated") => {}
            Err(e) => return Err(format!("truncated at {cut}: {e}")),
            Ok(_) => return Err(format!("truncated at {cut}: accepted")),
        }
    }

    let mut store = ntw::decode(&bytes).map_err(|e| e.to_string())?;
    store.remove("conv_dw_7/depthwise_kernel");
    let mut model = build_mobilenet(true, &mut rng(1)).map_err(|e| e.to_string())?;
    match model.bind_weights(&store) {
        Err(Error::Load(m)) if m.contains("conv_dw_7/depthwise_kernel") => {}
        other => return Err(format!("missing tensor: {other:?}")),
    }
    store.insert("conv_dw_7/depthwise_kernel", Tensor::zeros(&[3, 3, 511]));
    match model.bind_weights(&store) {
        Err(Error::Load(m)) if m.contains("conv_dw_7/depthwise_kernel") && m.contains("512") && m.contains("511") => {}
        other => return Err(format!("shape mismatch: {other:?}")),
    }
    Ok(format!("{tensors} tensors bit-exact; bad magic, truncation, missing and mismatched tensors rejected"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("metrics-oracle", metrics_oracle),
        ("quality-oracle", quality_oracle),
        ("architecture-trace", architecture_trace),
        ("gradient-suite", gradient_suite),
        ("convolution-oracles", conv_oracles),
        ("optimizer-oracle", optimizer_oracle),
        ("end-to-end-learnability", e2e_learnability),
        ("freeze-invariance", freeze_invariance),
        ("gradcam-oracle", gradcam_oracle),
        ("ntw-roundtrip", ntw_roundtrip),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
