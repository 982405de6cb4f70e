use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::augment::{augment, AugmentSpec};
use super::dataset::{LabeledDataset, Split};
use super::image::ImageSource;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Batch {
    /// `B×H×W×C`
    pub images: Tensor,
    /// `B×K` one-hot
    pub labels: Tensor,
    /// Dataset indices of the samples, in batch order.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BatchOptions {
    pub batch_size: usize,
    /// Shuffle seed; `None` keeps dataset order.
    pub shuffle: Option<u64>,
    pub epoch: u64,
    pub augment: Option<AugmentSpec>,
}

impl BatchOptions {
    pub fn sequential(batch_size: usize) -> Self {
        Self {
            batch_size,
            shuffle: None,
            epoch: 0,
            augment: None,
        }
    }
}

fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    rng
}

/// Sample order of one epoch: the split's dataset indices, shuffled by
/// `(seed, epoch)` when a seed is given.
pub fn epoch_order(ds: &LabeledDataset, split: Split, shuffle: Option<u64>, epoch: u64) -> Vec<usize> {
    let mut order = ds.split_indices(split);
    if let Some(seed) = shuffle {
        order.shuffle(&mut epoch_rng(seed, epoch));
    }
    order
}

/// Lazily loads the batches of one epoch. Images within a batch load in
/// parallel; each sample's augmentation draws from its own stream, so the
/// output does not depend on thread scheduling.
pub struct Batches<'a> {
    ds: &'a LabeledDataset,
    source: &'a ImageSource,
    order: Vec<usize>,
    next: usize,
    opts: BatchOptions,
}

pub fn make_batches<'a>(
    ds: &'a LabeledDataset,
    split: Split,
    opts: BatchOptions,
    source: &'a ImageSource,
) -> Result<Batches<'a>> {
    if opts.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if let Some(spec) = &opts.augment {
        spec.validate()?;
    }
    let order = epoch_order(ds, split, opts.shuffle, opts.epoch);
    if order.is_empty() {
        return Err(Error::Data(format!("split {split} has no samples")));
    }
    Ok(Batches {
        ds,
        source,
        order,
        next: 0,
        opts,
    })
}

impl Batches<'_> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.opts.batch_size)
    }

    /// Batch sizes in delivery order.
    pub fn sizes(&self) -> Vec<usize> {
        self.order
            .chunks(self.opts.batch_size)
            .map(<[usize]>::len)
            .collect()
    }

    fn load(&self, start: usize) -> Result<Batch> {
        let indices = self.order[start..(start + self.opts.batch_size).min(self.order.len())].to_vec();
        let k = self.ds.num_classes();
        let images = indices
            .par_iter()
            .enumerate()
            .map(|(offset, &i)| {
                let img = self.source.load(&self.ds.samples[i].path)?;
                match &self.opts.augment {
                    Some(spec) => {
                        let mut rng = epoch_rng(spec.seed ^ self.opts.epoch.rotate_left(32), (start + offset) as u64);
                        augment(&img, spec, &mut rng)
                    }
                    None => Ok(img),
                }
            })
            .collect::<Result<Vec<Tensor>>>()?;
        let per: Vec<usize> = images[0].shape().to_vec();
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&per);
        let data: Vec<f32> = images.into_iter().flat_map(Tensor::into_vec).collect();
        let mut labels = vec![0.0f32; indices.len() * k];
        for (row, &i) in indices.iter().enumerate() {
            labels[row * k + self.ds.samples[i].class] = 1.0;
        }
        Ok(Batch {
            images: Tensor::new(shape, data)?,
            labels: Tensor::new(vec![indices.len(), k], labels)?,
            indices,
        })
    }
}

impl Iterator for Batches<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.order.len() {
            return None;
        }
        let start = self.next;
        self.next += self.opts.batch_size;
        Some(self.load(start))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset::Sample;
    use crate::tensor::Shape4;
    use image::{Rgb, RgbImage};

    fn fixture(dir: &std::path::Path, n: usize) -> LabeledDataset {
        let mut samples = Vec::new();
        for i in 0..n {
            let path = dir.join(format!("{i:03}.png"));
            RgbImage::from_pixel(4, 4, Rgb([i as u8, 0, 0])).save(&path).unwrap();
            samples.push(Sample {
                path,
                class: i % 3,
                split: Some(if i % 5 == 0 { Split::Val } else { Split::Train }),
            });
        }
        LabeledDataset {
            class_names: vec!["a".into(), "b".into(), "c".into()],
            samples,
        }
    }

    #[test]
    fn covers_split_once_with_partial_tail() {
        let dir = tempfile::tempdir().unwrap();
        let ds = fixture(dir.path(), 30);
        let src = ImageSource::new(Shape4::new(4, 4, 3).unwrap(), false).unwrap();
        let opts = BatchOptions {
            batch_size: 7,
            shuffle: Some(3),
            epoch: 0,
            augment: None,
        };
        let batches: Vec<Batch> = make_batches(&ds, Split::Train, opts, &src)
            .unwrap()
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(batches.iter().map(Batch::len).collect::<Vec<_>>(), [7, 7, 7, 3]);
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort();
        assert_eq!(seen, ds.split_indices(Split::Train));
        let b = &batches[0];
        assert_eq!(b.images.shape(), &[7, 4, 4, 3]);
        for (row, &i) in b.indices.iter().enumerate() {
            let label = &b.labels.data()[row * 3..row * 3 + 3];
            assert_eq!(label.iter().sum::<f32>(), 1.0);
            assert_eq!(label[ds.samples[i].class], 1.0);
            assert_eq!(b.images.data()[row * 48], i as f32 / 127.5 - 1.0);
        }
    }

    #[test]
    fn order_depends_on_seed_and_epoch_only() {
        let dir = tempfile::tempdir().unwrap();
        let ds = fixture(dir.path(), 40);
        let a = epoch_order(&ds, Split::Train, Some(1), 0);
        assert_eq!(a, epoch_order(&ds, Split::Train, Some(1), 0));
        assert_ne!(a, epoch_order(&ds, Split::Train, Some(1), 1));
        assert_eq!(epoch_order(&ds, Split::Train, None, 4), ds.split_indices(Split::Train));
    }

    #[test]
    fn empty_split_and_zero_batch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = fixture(dir.path(), 4);
        let src = ImageSource::new(Shape4::new(4, 4, 3).unwrap(), false).unwrap();
        assert!(matches!(
            make_batches(&ds, Split::Test, BatchOptions::sequential(2), &src),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            make_batches(&ds, Split::Train, BatchOptions::sequential(0), &src),
            Err(Error::Config(_))
        ));
    }
}
