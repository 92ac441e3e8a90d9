//! Pair and triplet drawing for metric-learning batches, plus the fixed
//! test-pair protocol file.
//!
//! Training batches are drawn dynamically: index specs come off a serial
//! sampler stream, image loading then uses one pre-split stream per image so
//! parallel and serial loading agree. Test pairs are materialized once,
//! balanced and duplicate-free, into a three-column CSV.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{load_with_fallback, PreprocessConfig, ScribeCorpus};
use crate::rng::{stream, stream_indexed, StreamDomain};
use crate::{Error, Result, Scalar};

/// `(class index, image index)` into a [`ScribeCorpus`].
pub type ImageRef = (usize, usize);

/// One pair draw; `label` is 1 for same-scribe, 0 for different.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairSpec {
    pub a: ImageRef,
    pub b: ImageRef,
    pub label: u8,
}

/// One triplet draw: anchor and positive share a class, negative differs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripletSpec {
    pub anchor: ImageRef,
    pub positive: ImageRef,
    pub negative: ImageRef,
}

/// Uniform draw from `0..n` excluding `skip`, using a single RNG value.
fn draw_excluding(n: usize, skip: usize, rng: &mut ChaCha8Rng) -> usize {
    debug_assert!(n >= 2);
    let k = rng.random_range(0..n - 1);
    k + usize::from(k >= skip)
}

/// Draws `batch_size / 2` positive then `batch_size / 2` negative pair specs.
/// Classes are chosen uniformly over classes, images uniformly within class;
/// a positive never pairs an image with itself.
pub fn draw_pair_specs(
    corpus: &ScribeCorpus,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PairSpec>> {
    if batch_size % 2 != 0 {
        return Err(Error::OddBatchSize(batch_size));
    }
    corpus.validate_for_sampling()?;
    let n_classes = corpus.n_classes();
    let mut specs = Vec::with_capacity(batch_size);
    for _ in 0..batch_size / 2 {
        let c = rng.random_range(0..n_classes);
        let n = corpus.class_len(c);
        let i = rng.random_range(0..n);
        let j = draw_excluding(n, i, rng);
        specs.push(PairSpec { a: (c, i), b: (c, j), label: 1 });
    }
    for _ in 0..batch_size / 2 {
        let c1 = rng.random_range(0..n_classes);
        let c2 = draw_excluding(n_classes, c1, rng);
        let i1 = rng.random_range(0..corpus.class_len(c1));
        let i2 = rng.random_range(0..corpus.class_len(c2));
        specs.push(PairSpec { a: (c1, i1), b: (c2, i2), label: 0 });
    }
    Ok(specs)
}

/// Draws `batch_size` triplet specs. Anchor classes are uniform over classes
/// with ≥ 2 images (single-image classes are resampled, never emitted as
/// anchors); the negative class is uniform over the remaining classes.
pub fn draw_triplet_specs(
    corpus: &ScribeCorpus,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TripletSpec>> {
    if corpus.n_classes() < 2 {
        return Err(Error::SingleClass(corpus.n_classes()));
    }
    let n_classes = corpus.n_classes();
    if !(0..n_classes).any(|c| corpus.class_len(c) >= 2) {
        return Err(Error::InvalidConfig(
            "triplet sampling needs at least one class with 2 images".into(),
        ));
    }
    let mut specs = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let ca = loop {
            let c = rng.random_range(0..n_classes);
            if corpus.class_len(c) >= 2 {
                break c;
            }
        };
        let n = corpus.class_len(ca);
        let i = rng.random_range(0..n);
        let j = draw_excluding(n, i, rng);
        let cn = draw_excluding(n_classes, ca, rng);
        let k = rng.random_range(0..corpus.class_len(cn));
        specs.push(TripletSpec { anchor: (ca, i), positive: (ca, j), negative: (cn, k) });
    }
    Ok(specs)
}

fn load_ref<T: Scalar>(
    corpus: &ScribeCorpus,
    image: ImageRef,
    cfg: &PreprocessConfig,
    seed: u64,
    item: u64,
) -> Vec<T> {
    let mut rng = stream_indexed(seed, StreamDomain::Augment, item);
    let pool = corpus.class_paths(image.0);
    load_with_fallback(&corpus.path(image.0, image.1), &pool, cfg, &mut rng)
}

/// A loaded pair batch: two `[n, 3, H, W]` buffers plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch<T> {
    pub x1: Vec<T>,
    pub x2: Vec<T>,
    pub labels: Vec<f64>,
    pub n: usize,
}

/// A loaded triplet batch: three `[n, 3, H, W]` buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletBatch<T> {
    pub anchor: Vec<T>,
    pub positive: Vec<T>,
    pub negative: Vec<T>,
    pub n: usize,
}

/// Loads pair specs in parallel. Image `s` of pair `i` reads RNG stream
/// `item_base + 2i + s`, so results are independent of thread count; the
/// caller advances `item_base` by `2 * specs.len()` per batch.
pub fn load_pair_batch<T: Scalar>(
    corpus: &ScribeCorpus,
    specs: &[PairSpec],
    cfg: &PreprocessConfig,
    seed: u64,
    item_base: u64,
) -> PairBatch<T> {
    let loaded: Vec<(Vec<T>, Vec<T>)> = specs
        .par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let a = load_ref(corpus, spec.a, cfg, seed, item_base + 2 * i as u64);
            let b = load_ref(corpus, spec.b, cfg, seed, item_base + 2 * i as u64 + 1);
            (a, b)
        })
        .collect();
    let mut batch = PairBatch {
        x1: Vec::with_capacity(specs.len() * cfg.numel()),
        x2: Vec::with_capacity(specs.len() * cfg.numel()),
        labels: specs.iter().map(|s| f64::from(s.label)).collect(),
        n: specs.len(),
    };
    for (a, b) in loaded {
        batch.x1.extend(a);
        batch.x2.extend(b);
    }
    batch
}

/// Loads triplet specs in parallel; stream layout as [`load_pair_batch`] with
/// stride 3. The caller advances `item_base` by `3 * specs.len()` per batch.
pub fn load_triplet_batch<T: Scalar>(
    corpus: &ScribeCorpus,
    specs: &[TripletSpec],
    cfg: &PreprocessConfig,
    seed: u64,
    item_base: u64,
) -> TripletBatch<T> {
    let loaded: Vec<(Vec<T>, Vec<T>, Vec<T>)> = specs
        .par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let base = item_base + 3 * i as u64;
            (
                load_ref(corpus, spec.anchor, cfg, seed, base),
                load_ref(corpus, spec.positive, cfg, seed, base + 1),
                load_ref(corpus, spec.negative, cfg, seed, base + 2),
            )
        })
        .collect();
    let mut batch = TripletBatch {
        anchor: Vec::with_capacity(specs.len() * cfg.numel()),
        positive: Vec::with_capacity(specs.len() * cfg.numel()),
        negative: Vec::with_capacity(specs.len() * cfg.numel()),
        n: specs.len(),
    };
    for (a, p, n) in loaded {
        batch.anchor.extend(a);
        batch.positive.extend(p);
        batch.negative.extend(n);
    }
    batch
}

/// One row of a pair protocol file; paths are corpus-root-relative.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairRow {
    pub path1: String,
    pub path2: String,
    pub label: u8,
}

const PAIRS_HEADER: &str = "path1,path2,label";

fn unordered_key(a: ImageRef, b: ImageRef) -> (ImageRef, ImageRef) {
    if b < a {
        (b, a)
    } else {
        (a, b)
    }
}

/// Builds a balanced, duplicate-free set of `n_pairs / 2` positive and
/// `n_pairs / 2` negative rows, deterministic under `seed`.
///
/// Draws are rejection-sampled against an unordered-row set; when the request
/// approaches capacity the remaining combinations are enumerated and shuffled
/// instead, so exact-capacity requests terminate.
pub fn make_test_pairs(
    corpus: &ScribeCorpus,
    n_pairs: usize,
    seed: u64,
) -> Result<Vec<PairRow>> {
    if n_pairs % 2 != 0 {
        return Err(Error::InvalidConfig(format!(
            "pair count must be even, got {n_pairs}"
        )));
    }
    if corpus.n_classes() < 2 {
        return Err(Error::SingleClass(corpus.n_classes()));
    }
    let need = n_pairs / 2;
    let sizes: Vec<usize> = (0..corpus.n_classes()).map(|c| corpus.class_len(c)).collect();
    let pos_capacity: usize = sizes.iter().map(|&n| n * (n - 1) / 2).sum();
    let total: usize = sizes.iter().sum();
    let sum_sq: usize = sizes.iter().map(|&n| n * n).sum();
    let neg_capacity = (total * total - sum_sq) / 2;
    for (capacity, kind) in [(pos_capacity, "positive"), (neg_capacity, "negative")] {
        if need > capacity {
            return Err(Error::PairCapacityExceeded {
                requested: need,
                available: capacity,
                kind: kind.into(),
            });
        }
    }

    let mut rng = stream(seed, StreamDomain::TestPairs);
    let mut rows = Vec::with_capacity(n_pairs);
    let mut seen: HashSet<(ImageRef, ImageRef)> = HashSet::with_capacity(n_pairs);

    // Rejection sampling stalls when nearly all combinations are needed.
    let dense = |need: usize, capacity: usize| need * 5 >= capacity;

    if dense(need, pos_capacity) {
        let mut all: Vec<(ImageRef, ImageRef)> = Vec::with_capacity(pos_capacity);
        for (c, &n) in sizes.iter().enumerate() {
            for i in 0..n {
                for j in i + 1..n {
                    all.push(((c, i), (c, j)));
                }
            }
        }
        all.shuffle(&mut rng);
        for &(a, b) in all.iter().take(need) {
            rows.push((a, b, 1u8));
        }
    } else {
        while rows.len() < need {
            let c = rng.random_range(0..sizes.len());
            let i = rng.random_range(0..sizes[c]);
            let j = draw_excluding(sizes[c], i, &mut rng);
            let key = unordered_key((c, i), (c, j));
            if seen.insert(key) {
                rows.push(((c, i), (c, j), 1));
            }
        }
    }

    let n_pos = rows.len();
    if dense(need, neg_capacity) {
        let mut all: Vec<(ImageRef, ImageRef)> = Vec::with_capacity(neg_capacity);
        for c1 in 0..sizes.len() {
            for c2 in c1 + 1..sizes.len() {
                for i in 0..sizes[c1] {
                    for j in 0..sizes[c2] {
                        all.push(((c1, i), (c2, j)));
                    }
                }
            }
        }
        all.shuffle(&mut rng);
        for &(a, b) in all.iter().take(need) {
            rows.push((a, b, 0));
        }
    } else {
        seen.clear();
        while rows.len() < n_pos + need {
            let c1 = rng.random_range(0..sizes.len());
            let c2 = draw_excluding(sizes.len(), c1, &mut rng);
            let i1 = rng.random_range(0..sizes[c1]);
            let i2 = rng.random_range(0..sizes[c2]);
            let key = unordered_key((c1, i1), (c2, i2));
            if seen.insert(key) {
                rows.push(((c1, i1), (c2, i2), 0));
            }
        }
    }

    Ok(rows
        .into_iter()
        .map(|(a, b, label)| PairRow {
            path1: corpus.rel_path(a.0, a.1),
            path2: corpus.rel_path(b.0, b.1),
            label,
        })
        .collect())
}

/// Serializes rows as CSV: header line, LF endings, label 0/1.
pub fn pairs_to_csv(rows: &[PairRow]) -> String {
    let mut out = String::with_capacity(rows.len() * 48 + PAIRS_HEADER.len() + 1);
    out.push_str(PAIRS_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.path1);
        out.push(',');
        out.push_str(&row.path2);
        out.push(',');
        out.push(if row.label == 1 { '1' } else { '0' });
        out.push('\n');
    }
    out
}

/// Parses a pair protocol file, reporting 1-based line numbers on malformed
/// rows. The path columns must not contain commas.
pub fn parse_pairs_csv(text: &str) -> Result<Vec<PairRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim_end() == PAIRS_HEADER => {}
        Some((_, header)) => {
            return Err(Error::PairFileFormat {
                line: 1,
                reason: format!("expected header {PAIRS_HEADER:?}, got {header:?}"),
            })
        }
        None => {
            return Err(Error::PairFileFormat { line: 1, reason: "missing header".into() })
        }
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::PairFileFormat {
                line: line_no,
                reason: format!("expected 3 comma-separated fields, got {}", fields.len()),
            });
        }
        let label = match fields[2].trim_end() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::PairFileFormat {
                    line: line_no,
                    reason: format!("label must be 0 or 1, got {other:?}"),
                })
            }
        };
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::PairFileFormat {
                line: line_no,
                reason: "empty path field".into(),
            });
        }
        rows.push(PairRow {
            path1: fields[0].to_string(),
            path2: fields[1].to_string(),
            label,
        });
    }
    Ok(rows)
}

pub fn write_pairs_csv(rows: &[PairRow], path: &Path) -> Result<()> {
    Ok(std::fs::write(path, pairs_to_csv(rows))?)
}

pub fn read_pairs_csv(path: &Path) -> Result<Vec<PairRow>> {
    parse_pairs_csv(&std::fs::read_to_string(path)?)
}
