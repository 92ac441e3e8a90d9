//! Shared fixtures for unit tests: tiny on-disk corpora.

use std::path::Path;

use tempfile::TempDir;

use crate::dataset::{scan_corpus, ScribeCorpus, Split};

pub fn write_png(path: &Path, canvas: usize, value: u8) {
    let img =
        image::GrayImage::from_raw(canvas as u32, canvas as u32, vec![value; canvas * canvas])
            .unwrap();
    img.save(path).unwrap();
}

/// Flat-gray corpus with the given class sizes; pixel values differ per class.
pub fn toy_corpus(classes: &[(&str, usize)], split: Split) -> (TempDir, ScribeCorpus) {
    let tmp = tempfile::tempdir().unwrap();
    for (c, (name, count)) in classes.iter().enumerate() {
        let dir = tmp.path().join(name);
        std::fs::create_dir_all(&dir).unwrap();
        for i in 0..*count {
            let value = (40 + 30 * c + i) as u8;
            write_png(&dir.join(format!("img_{i:02}.png")), 32, value);
        }
    }
    let corpus = scan_corpus(tmp.path(), split).unwrap();
    (tmp, corpus)
}
