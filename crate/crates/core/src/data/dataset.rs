use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!(
                "unknown split {s:?}, expected train, val or test"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub path: PathBuf,
    pub class: usize,
    /// `None` until the dataset has been split.
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledDataset {
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
}

impl LabeledDataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Indices of the samples in `split`, in dataset order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == Some(split))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.samples.iter().filter(|s| s.split == Some(split)).count()
    }

    /// Samples per class within one split.
    pub fn class_counts(&self, split: Split) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for s in self.samples.iter().filter(|s| s.split == Some(split)) {
            counts[s.class] += 1;
        }
        counts
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// Checks that the header of `path` decodes, without decoding pixels.
fn check_decodable(path: &Path) -> Result<()> {
    image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .into_dimensions()
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    Ok(())
}

/// Reads `root/<class>/<image>` into a dataset with sorted class names and
/// sorted sample paths.
pub fn scan_dataset(root: &Path) -> Result<LabeledDataset> {
    if !root.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", root.display())));
    }
    let mut class_names = Vec::new();
    let mut samples = Vec::new();
    for entry in sorted_entries(root)? {
        if !entry.is_dir() {
            if is_image(&entry) {
                return Err(Error::Data(format!(
                    "image {} is not inside a class directory",
                    entry.display()
                )));
            }
            continue;
        }
        let name = entry
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Data(format!("class directory {} is not UTF-8", entry.display())))?
            .to_string();
        let class = class_names.len();
        let files: Vec<PathBuf> = sorted_entries(&entry)?
            .into_iter()
            .filter(|p| p.is_file() && is_image(p))
            .collect();
        if files.is_empty() {
            return Err(Error::Data(format!("class directory {} has no images", entry.display())));
        }
        for path in files {
            check_decodable(&path)?;
            samples.push(Sample {
                path,
                class,
                split: None,
            });
        }
        class_names.push(name);
    }
    if class_names.is_empty() {
        return Err(Error::Data(format!("no class directories under {}", root.display())));
    }
    Ok(LabeledDataset {
        class_names,
        samples,
    })
}

/// Split sizes: validation and test get `n·f` rounded half up and train
/// takes the remainder, so train can fall up to one sample short of `n·f`.
pub fn split_counts(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let round = |f: f64| ((n as f64 * f + 0.5).floor() as usize).min(n);
    let val = round(fractions[1]);
    let test = round(fractions[2]).min(n - val);
    [n - val - test, val, test]
}

fn check_fractions(fractions: [f64; 3]) -> Result<()> {
    if fractions.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
        return Err(Error::Config(format!(
            "split fractions must all be positive, got {fractions:?}"
        )));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions sum to {sum}, not 1")));
    }
    Ok(())
}

/// Stratified train/val/test assignment. Each class is shuffled with its own
/// seeded stream, then cut by [`split_counts`]. Classes with fewer than three
/// samples go entirely to train.
pub fn split_dataset(ds: &LabeledDataset, fractions: [f64; 3], seed: u64) -> Result<LabeledDataset> {
    check_fractions(fractions)?;
    let mut out = ds.clone();
    for class in 0..ds.num_classes() {
        let mut members: Vec<usize> = (0..ds.samples.len())
            .filter(|&i| ds.samples[i].class == class)
            .collect();
        if members.len() < 3 {
            log::warn!(
                "class {:?} has {} sample(s); all assigned to train",
                ds.class_names[class],
                members.len()
            );
            for &i in &members {
                out.samples[i].split = Some(Split::Train);
            }
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(class as u64);
        members.shuffle(&mut rng);
        let [n_train, n_val, _] = split_counts(members.len(), fractions);
        for (rank, &i) in members.iter().enumerate() {
            out.samples[i].split = Some(if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLine {
    path: PathBuf,
    class: String,
    split: Split,
}

/// One JSON object per line: `{"path": ..., "class": ..., "split": ...}`.
pub fn write_manifest(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for s in &ds.samples {
        let split = s
            .split
            .ok_or_else(|| Error::State(format!("sample {} has no split", s.path.display())))?;
        let line = ManifestLine {
            path: s.path.clone(),
            class: ds.class_names[s.class].clone(),
            split,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

/// Reads a manifest back. Class indices follow the sorted class names.
pub fn read_manifest(path: &Path) -> Result<LabeledDataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ManifestLine = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{} line {}: {e}", path.display(), n + 1))
        })?;
        lines.push(parsed);
    }
    if lines.is_empty() {
        return Err(Error::Data(format!("manifest {} is empty", path.display())));
    }
    let mut class_names: Vec<String> = lines.iter().map(|l| l.class.clone()).collect();
    class_names.sort();
    class_names.dedup();
    let samples = lines
        .into_iter()
        .map(|l| Sample {
            class: class_names.binary_search(&l.class).expect("collected above"),
            path: l.path,
            split: Some(l.split),
        })
        .collect();
    Ok(LabeledDataset {
        class_names,
        samples,
    })
}
