use std::fs;
use std::path::Path;

use anyhow::Context;
use log::{info, warn};
use musa::data::{
    generate_synthetic_corpus, load_image, read_manifest, scan_dataset, split_dataset, write_manifest, AugmentSpec,
    ImageSource, LabeledDataset, Split, SynthSpec,
};
use musa::gradcam::{compute_gradcam, dump_heatmap, render_heatmap};
use musa::model::{
    attach_transfer_head, build_base_cnn_for_input, build_mobilenet_for_input, ntw, save_weights, summary_table,
    Model, BASE_CNN_INPUT, MOBILENET_INPUT,
};
use musa::train::{evaluate, export_report, render_report_text, train, ReportFormat, TrainConfig};
use musa::{Error, Shape4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::modelfile::{self, ModelFile, LOG_FILE, WEIGHTS_FILE};
use crate::{
    Architecture, Command, EvalArgs, GradcamArgs, InspectArgs, PredictArgs, Source, SplitArgs, SynthArgs, TrainArgs,
};

/// Layers frozen by default in the transfer setting.
const DEFAULT_FREEZE: usize = 20;

pub fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Gradcam(a) => gradcam(a),
        Command::Inspect(a) => inspect(a),
    }
}

fn fractions(v: &[f64]) -> [f64; 3] {
    [v[0], v[1], v[2]]
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_dataset(source: &Source, fracs: &[f64], seed: u64) -> anyhow::Result<LabeledDataset> {
    match (&source.data, &source.manifest) {
        (_, Some(manifest)) => Ok(read_manifest(manifest)?),
        (Some(root), None) => Ok(split_dataset(&scan_dataset(root)?, fractions(fracs), seed)?),
        (None, None) => unreachable!("clap requires one source"),
    }
}

fn input_shape(arch: Architecture, size: Option<usize>) -> anyhow::Result<Shape4> {
    let default = match arch {
        Architecture::BaseCnn => BASE_CNN_INPUT,
        Architecture::MobilenetTransfer | Architecture::Mobilenet => MOBILENET_INPUT,
    };
    Ok(match size {
        Some(s) => Shape4::new(s, s, 3)?,
        None => default,
    })
}

fn build(arch: Architecture, input: Shape4, classes: usize, rng: &mut ChaCha8Rng) -> anyhow::Result<Model> {
    Ok(match arch {
        Architecture::BaseCnn => build_base_cnn_for_input(input, classes, rng)?,
        Architecture::MobilenetTransfer => {
            let backbone = build_mobilenet_for_input(input, false, rng)?;
            attach_transfer_head(backbone, classes, rng)?
        }
        Architecture::Mobilenet => build_mobilenet_for_input(input, true, rng)?,
    })
}

fn default_freeze(arch: Architecture) -> usize {
    match arch {
        Architecture::MobilenetTransfer => DEFAULT_FREEZE,
        Architecture::BaseCnn | Architecture::Mobilenet => 0,
    }
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let spec = SynthSpec {
        size: a.size,
        ..SynthSpec::new(a.classes, a.per_class, a.seed)
    };
    let written = generate_synthetic_corpus(&a.out, spec)?;
    println!("wrote {} images in {} classes to {}", written.len(), a.classes, a.out.display());
    Ok(())
}

fn split(a: SplitArgs) -> anyhow::Result<()> {
    let ds = split_dataset(&scan_dataset(&a.data)?, fractions(&a.fractions), a.seed)?;
    write_manifest(&ds, &a.out)?;
    println!(
        "train {} val {} test {} -> {}",
        ds.split_len(Split::Train),
        ds.split_len(Split::Val),
        ds.split_len(Split::Test),
        a.out.display()
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<()> {
    if a.model == Architecture::Mobilenet {
        return Err(Error::Config("train takes base-cnn or mobilenet-transfer".into()).into());
    }
    let cfg = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.lr,
        batch_size: a.batch,
        early_stop_patience: a.patience,
        seed: a.seed,
        freeze_first_n: a.freeze.unwrap_or_else(|| default_freeze(a.model)),
        augment: (!a.no_augment).then(|| AugmentSpec {
            seed: a.seed,
            ..AugmentSpec::default()
        }),
    };
    cfg.validate()?;
    eprintln!("train config: {}", serde_json::to_string(&cfg)?);

    let ds = load_dataset(&a.source, &a.fractions, a.seed)?;
    let input = input_shape(a.model, a.input_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut model = build(a.model, input, ds.num_classes(), &mut rng)?;
    if let Some(path) = &a.weights {
        let report = model.bind_matching(&ntw::read_store(path)?)?;
        if report.bound.is_empty() {
            return Err(Error::Load(format!("no tensor in {} matches the model", path.display())).into());
        }
        info!(
            "bound {} tensors from {}, {} left initialized, {} unused",
            report.bound.len(),
            path.display(),
            report.skipped.len(),
            report.extra.len()
        );
    }
    info!(
        "{} classes, {} train / {} val samples, input {input}",
        ds.num_classes(),
        ds.split_len(Split::Train),
        ds.split_len(Split::Val)
    );

    let source = ImageSource::new(input, true)?;
    let log = train(&mut model, &ds, &cfg, &source)?;
    create_dir(&a.out)?;
    save_weights(&model, &a.out.join(WEIGHTS_FILE))?;
    ModelFile::describe(a.model, &model, &ds.class_names).write(&a.out)?;
    log.write_csv(&a.out.join(LOG_FILE))?;
    if let Some(last) = log.epochs.last() {
        println!(
            "epochs {} train_acc {:.4} val_acc {:.4} val_loss {:.4}{}",
            log.epochs.len(),
            last.train_acc,
            last.val_acc,
            last.val_loss,
            log.best_epoch.map(|e| format!(" (restored epoch {e})")).unwrap_or_default()
        );
    }
    Ok(())
}

fn check_classes(file: &ModelFile, ds: &LabeledDataset) -> anyhow::Result<()> {
    if file.class_names != ds.class_names {
        return Err(Error::Config(format!(
            "model classes {:?} differ from dataset classes {:?}",
            file.class_names, ds.class_names
        ))
        .into());
    }
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let split: Split = a.split.parse()?;
    let (model, file) = modelfile::load(&a.model_dir)?;
    let ds = load_dataset(&a.source, &a.fractions, a.seed)?;
    check_classes(&file, &ds)?;
    let source = ImageSource::new(model.input_shape(), false)?;
    let report = evaluate(&model, &ds, split, &source, a.batch)?;
    create_dir(&a.out)?;
    export_report(&report, &a.out.join("report.json"), ReportFormat::Json)?;
    export_report(&report, &a.out.join("report.txt"), ReportFormat::Text)?;
    print!("{}", render_report_text(&report));
    Ok(())
}

/// Class probabilities for one image, most probable first.
fn ranked(model: &Model, file: &ModelFile, image: &Path) -> anyhow::Result<Vec<(usize, f32)>> {
    let x = load_image(image, model.input_shape())?;
    let probs = model.predict(&x)?;
    let mut ranked: Vec<(usize, f32)> = probs.data().iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    debug_assert_eq!(ranked.len(), file.class_names.len());
    Ok(ranked)
}

fn predict(a: PredictArgs) -> anyhow::Result<()> {
    if a.top_k == 0 {
        return Err(Error::Config("--top-k must be at least 1".into()).into());
    }
    let (model, file) = modelfile::load(&a.model_dir)?;
    for (rank, (class, p)) in ranked(&model, &file, &a.image)?.into_iter().take(a.top_k).enumerate() {
        println!("{}\t{}\t{p:.6}", rank + 1, file.class_names[class]);
    }
    Ok(())
}

fn class_index(file: &ModelFile, class: &str) -> anyhow::Result<usize> {
    if let Some(i) = file.class_names.iter().position(|n| n == class) {
        return Ok(i);
    }
    match class.parse::<usize>() {
        Ok(i) if i < file.class_names.len() => Ok(i),
        _ => Err(Error::Config(format!("unknown class {class:?}; classes are {:?}", file.class_names)).into()),
    }
}

fn gradcam(a: GradcamArgs) -> anyhow::Result<()> {
    let (model, file) = modelfile::load(&a.model_dir)?;
    let class = match &a.class {
        Some(c) => class_index(&file, c)?,
        None => ranked(&model, &file, &a.image)?[0].0,
    };
    let image = load_image(&a.image, model.input_shape())?;
    let cam = compute_gradcam(&model, &image, class)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    render_heatmap(&cam, &image, &a.out)?;
    if let Some(dump) = &a.dump {
        dump_heatmap(&cam, dump)?;
    }
    let &[h, w] = cam.heatmap.shape() else {
        unreachable!("heatmap is h×w")
    };
    println!(
        "class {} from layer {} ({h}×{w}) -> {}",
        file.class_names[class],
        model.layers()[cam.layer].name,
        a.out.display()
    );
    Ok(())
}

fn inspect(a: InspectArgs) -> anyhow::Result<()> {
    let model = match (&a.model_dir, a.model) {
        (Some(dir), _) => modelfile::load(dir)?.0,
        (None, Some(arch)) => {
            let input = input_shape(arch, a.input_size)?;
            let mut model = build(arch, input, a.classes, &mut ChaCha8Rng::seed_from_u64(0))?;
            model.set_trainable_boundary(a.freeze.unwrap_or_else(|| default_freeze(arch)))?;
            model
        }
        (None, None) => unreachable!("clap requires --model or --model-dir"),
    };
    if a.model_dir.is_some() && (a.freeze.is_some() || a.input_size.is_some()) {
        warn!("--freeze and --input-size only apply with --model");
    }
    print!("{}", summary_table(&model));
    Ok(())
}
