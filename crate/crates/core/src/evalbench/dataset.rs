use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::DrLabel;
use crate::par;

/// File extensions recognised as images (compared case-insensitively).
pub const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub pixels: RgbImage,
    pub label: DrLabel,
    /// Path relative to the dataset root, `/`-separated.
    pub source_id: String,
}

/// Image files of a class-per-directory dataset, sorted by path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub entries: Vec<(PathBuf, DrLabel)>,
}

impl DatasetIndex {
    pub fn counts(&self) -> [usize; 5] {
        let mut c = [0; 5];
        for (_, l) in &self.entries {
            c[l.index()] += 1;
        }
        c
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<LabeledImage>,
    /// Images per class, in label order.
    pub counts: [usize; 5],
    /// Files that failed to decode, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.iter().any(|x| x.eq_ignore_ascii_case(e)))
}

/// Lists `<root>/<Label>/*.{png,jpg,jpeg,bmp}`. Missing class directories
/// count as empty; any other subdirectory is an error.
pub fn index_dataset(root: impl AsRef<Path>) -> Result<DatasetIndex> {
    let root = root.as_ref();
    let read = |dir: &Path| fs::read_dir(dir).map_err(|e| Error::io(dir, e));
    let mut entries = Vec::new();
    for entry in read(root)? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if !path.is_dir() {
            log::debug!("ignoring {} at dataset root", path.display());
            continue;
        }
        let name = entry.file_name();
        let name = name.to_string_lossy();
        let label = DrLabel::from_name(&name).ok_or_else(|| {
            Error::Dataset(format!(
                "unknown class directory {name:?}; expected one of {}",
                DrLabel::ALL.map(DrLabel::name).join(", ")
            ))
        })?;
        for file in read(&path)? {
            let file = file.map_err(|e| Error::io(&path, e))?.path();
            if file.is_file() && is_image(&file) {
                entries.push((file, label));
            }
        }
    }
    entries.sort();
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        entries,
    })
}

pub fn load_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Dataset(format!("{}: {other}", path.display())),
    })?;
    Ok(img.to_rgb8())
}

fn source_id(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Decodes every image of the dataset. Undecodable files are skipped with a
/// warning and reported in [`Dataset::skipped`].
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Dataset> {
    let index = index_dataset(root)?;
    let decoded = par::map(&index.entries, |(path, _)| load_image(path));
    let mut images = Vec::with_capacity(index.len());
    let mut skipped = Vec::new();
    let mut counts = [0; 5];
    for ((path, label), img) in index.entries.iter().zip(decoded) {
        match img {
            Ok(pixels) => {
                counts[label.index()] += 1;
                images.push(LabeledImage {
                    pixels,
                    label: *label,
                    source_id: source_id(&index.root, path),
                });
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                skipped.push((path.clone(), e.to_string()));
            }
        }
    }
    Ok(Dataset { images, counts, skipped })
}

/// Disjoint train/validation index sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub seed: u64,
}

const MIN_SPLIT: usize = 5;

fn train_len(n: usize) -> usize {
    n * 4 / 5
}

/// Seeded uniform shuffle of `0..n`, first ⌊0.8·n⌋ indices for training.
pub fn split(n: usize, seed: u64) -> Result<DatasetSplit> {
    if n < MIN_SPLIT {
        return Err(Error::Dataset(format!("cannot split {n} samples; need at least {MIN_SPLIT}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let validation = order.split_off(train_len(n));
    Ok(DatasetSplit {
        train: order,
        validation,
        seed,
    })
}

/// Per-class 80/20 split; each class contributes ⌊0.8·n_c⌋ training samples.
pub fn split_stratified(labels: &[DrLabel], seed: u64) -> Result<DatasetSplit> {
    if labels.len() < MIN_SPLIT {
        return Err(Error::Dataset(format!(
            "cannot split {} samples; need at least {MIN_SPLIT}",
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for label in DrLabel::ALL {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
        members.shuffle(&mut rng);
        let cut = train_len(members.len());
        validation.extend_from_slice(&members[cut..]);
        members.truncate(cut);
        train.extend(members);
    }
    Ok(DatasetSplit { train, validation, seed })
}
