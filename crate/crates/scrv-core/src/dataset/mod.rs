//! Scribe corpora on disk: one directory per scribe, PNG/JPEG images inside.
//!
//! A corpus is scanned once into an ordered, validated index; all later
//! sampling works off indices into that index. Class and file ordering is
//! lexicographic so the same tree scans identically on every platform.

mod preprocess;
mod synth;

pub use preprocess::{
    load_and_preprocess, load_with_fallback, placeholder, preprocess_planes, PreprocessConfig,
    AUGMENT_DRAWS, CORRUPT_RETRIES,
};
pub use synth::{generate_synthetic_corpus, ink_coverage, render_style_image, ScribeStyle};

use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::rng::{stream, StreamDomain};
use crate::{Error, Result};

/// Which half of a dataset a corpus represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// One scribe: directory name plus its image file names, sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScribeClass {
    pub name: String,
    pub files: Vec<String>,
}

/// An indexed image folder tree rooted at one split directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScribeCorpus {
    root: PathBuf,
    split: Split,
    classes: Vec<ScribeClass>,
}

/// Minimum images per class so same-class pairs exist.
const MIN_TRAIN_IMAGES: usize = 2;

fn is_image_file(name: &str) -> bool {
    let lower = name.to_ascii_lowercase();
    lower.ends_with(".png") || lower.ends_with(".jpg") || lower.ends_with(".jpeg")
}

/// Indexes `root`, treating each subdirectory as one scribe class.
///
/// Non-directory entries at the root are skipped with a warning. Classes and
/// files are sorted bytewise by name, so the index is independent of the
/// filesystem's enumeration order.
pub fn scan_corpus(root: &Path, split: Split) -> Result<ScribeCorpus> {
    let mut classes = Vec::new();
    for entry in std::fs::read_dir(root)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if !entry.file_type()?.is_dir() {
            log::warn!("ignoring non-directory entry {name:?} at corpus root {root:?}");
            continue;
        }
        let mut files = Vec::new();
        for file in std::fs::read_dir(entry.path())? {
            let file = file?;
            let file_name = file.file_name().to_string_lossy().into_owned();
            if file.file_type()?.is_file() && is_image_file(&file_name) {
                files.push(file_name);
            }
        }
        files.sort_unstable();
        classes.push(ScribeClass { name, files });
    }
    classes.sort_unstable_by(|a, b| a.name.cmp(&b.name));
    if classes.is_empty() {
        return Err(Error::EmptyCorpus(root.to_path_buf()));
    }
    let min = match split {
        Split::Train => MIN_TRAIN_IMAGES,
        Split::Test => 1,
    };
    for class in &classes {
        if class.files.len() < min {
            return Err(Error::ClassTooSmall {
                name: class.name.clone(),
                count: class.files.len(),
                split: split.to_string(),
                min,
            });
        }
        log::info!("{split} class {}: {} images", class.name, class.files.len());
    }
    Ok(ScribeCorpus {
        root: root.to_path_buf(),
        split,
        classes,
    })
}

impl ScribeCorpus {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn classes(&self) -> &[ScribeClass] {
        &self.classes
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_len(&self, class: usize) -> usize {
        self.classes[class].files.len()
    }

    pub fn total_images(&self) -> usize {
        self.classes.iter().map(|c| c.files.len()).sum()
    }

    /// Absolute path of image `img` in class `class`.
    pub fn path(&self, class: usize, img: usize) -> PathBuf {
        self.root
            .join(&self.classes[class].name)
            .join(&self.classes[class].files[img])
    }

    /// Root-relative path with `/` separators, as written to pair files.
    pub fn rel_path(&self, class: usize, img: usize) -> String {
        format!(
            "{}/{}",
            self.classes[class].name, self.classes[class].files[img]
        )
    }

    /// All absolute paths of one class, for corrupted-file resampling.
    pub fn class_paths(&self, class: usize) -> Vec<PathBuf> {
        (0..self.class_len(class))
            .map(|i| self.path(class, i))
            .collect()
    }

    /// Requires ≥ 2 classes and ≥ 2 images everywhere, the preconditions for
    /// drawing both pair labels (and triplets) with uniform class choice.
    pub fn validate_for_sampling(&self) -> Result<()> {
        if self.n_classes() < 2 {
            return Err(Error::SingleClass(self.n_classes()));
        }
        for class in &self.classes {
            if class.files.len() < MIN_TRAIN_IMAGES {
                return Err(Error::ClassTooSmall {
                    name: class.name.clone(),
                    count: class.files.len(),
                    split: self.split.to_string(),
                    min: MIN_TRAIN_IMAGES,
                });
            }
        }
        Ok(())
    }

    /// Splits off a per-class validation holdout by seeded selection.
    ///
    /// Each class keeps at least [`MIN_TRAIN_IMAGES`] training images; the
    /// holdout gets `floor(fraction * n)` images, capped by that floor. The
    /// selection permutes each class with the validation RNG stream, so it
    /// depends only on `(seed, corpus order)`.
    pub fn holdout_split(&self, fraction: f64, seed: u64) -> Result<(ScribeCorpus, ScribeCorpus)> {
        if !(0.0..0.5).contains(&fraction) {
            return Err(Error::InvalidConfig(format!(
                "validation fraction must lie in [0, 0.5), got {fraction}"
            )));
        }
        let mut rng = stream(seed, StreamDomain::Validation);
        let mut train_classes = Vec::with_capacity(self.classes.len());
        let mut val_classes = Vec::with_capacity(self.classes.len());
        for class in &self.classes {
            let n = class.files.len();
            let take = ((fraction * n as f64).floor() as usize).min(n - MIN_TRAIN_IMAGES);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let mut val_idx: Vec<usize> = order[..take].to_vec();
            let mut train_idx: Vec<usize> = order[take..].to_vec();
            // Sorted within each side: the subsets, not the shuffle order,
            // are the holdout's meaning.
            val_idx.sort_unstable();
            train_idx.sort_unstable();
            let pick = |idx: &[usize]| ScribeClass {
                name: class.name.clone(),
                files: idx.iter().map(|&i| class.files[i].clone()).collect(),
            };
            train_classes.push(pick(&train_idx));
            val_classes.push(pick(&val_idx));
        }
        let train = ScribeCorpus {
            root: self.root.clone(),
            split: self.split,
            classes: train_classes,
        };
        let val = ScribeCorpus {
            root: self.root.clone(),
            split: self.split,
            classes: val_classes.into_iter().filter(|c| !c.files.is_empty()).collect(),
        };
        Ok((train, val))
    }
}
