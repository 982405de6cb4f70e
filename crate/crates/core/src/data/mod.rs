//! Dataset ingestion from `root/<class>/<image>` trees, stratified splits,
//! image loading, augmentation, batching and a synthetic corpus generator.

mod augment;
mod batches;
mod dataset;
mod image;
mod synth;

pub use augment::{affine, augment, flip_horizontal, flip_vertical, rotate, AugmentSpec, FillMode};
pub use batches::{epoch_order, make_batches, Batch, BatchOptions, Batches};
pub use dataset::{
    read_manifest, scan_dataset, split_counts, split_dataset, write_manifest, LabeledDataset,
    Sample, Split,
};
pub use image::{load_image, load_rgb, rgb_to_tensor, tensor_to_rgb, ImageSource};
pub use synth::{generate_synthetic_corpus, synth_class_names, SynthSpec, BANANA_CLASSES};
