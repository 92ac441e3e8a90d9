//! Verification evaluation: score fixed pairs with a frozen checkpoint, scan
//! the decision threshold, and report ROC/AUC/ACC/FAR/FRR.
//!
//! Scoring runs the embedding network in inference mode (no augmentation) and
//! measures plain Euclidean distance in f64, so a pair of identical images
//! scores exactly 0. The verification rule is Eq.-style strict: a pair is
//! "same scribe" iff D < tau.

mod report;

#[cfg(test)]
mod tests;

pub use report::{
    auc_from_roc, build_report, emit_report, roc_csv_string, EvalReport, RocPoint,
};

use std::path::Path;

use rayon::prelude::*;

use crate::dataset::{load_with_fallback, PreprocessConfig};
use crate::rng::{stream_indexed, StreamDomain};
use crate::sampler::read_pairs_csv;
use crate::tensor::Tape;
use crate::trainer::Checkpoint;
use crate::{Error, Result, Scalar};

/// Pairs scored per forward pass.
pub const EVAL_BATCH: usize = 64;

/// One test pair with its measured embedding distance.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPair {
    pub path1: String,
    pub path2: String,
    /// 1 = same scribe, 0 = different scribes.
    pub label: u8,
    pub distance: f64,
}

/// Verification decision: same scribe iff the distance is strictly below tau.
pub fn decide(distance: f64, tau: f64) -> bool {
    distance < tau
}

fn distance_f64(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Positive and negative counts; errors unless both sides are present.
fn split_counts(scored: &[ScoredPair]) -> Result<(usize, usize)> {
    let pos = scored.iter().filter(|s| s.label == 1).count();
    let neg = scored.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::OneSidedLabels { pos, neg });
    }
    Ok((pos, neg))
}

/// Scores every row of a pairs CSV against the checkpoint's network, in file
/// order. Images resolve relative to `root`; unreadable ones fall back per
/// the corpus loading rules (retry, then placeholder), so every row scores.
pub fn score_pairs<T: Scalar>(
    ckpt: &Checkpoint<T>,
    root: &Path,
    pairs_file: &Path,
    cfg: &PreprocessConfig,
    batch_size: usize,
) -> Result<Vec<ScoredPair>> {
    if cfg.augment {
        return Err(Error::InvalidConfig(
            "augmentation must be off when scoring pairs".into(),
        ));
    }
    cfg.validate()?;
    let hw = ckpt.net.input_hw();
    if cfg.target != hw {
        return Err(Error::InputSizeMismatch {
            expected: hw,
            found: cfg.target,
        });
    }
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be at least 1".into()));
    }
    let rows = read_pairs_csv(pairs_file)?;
    let seed = ckpt.seed;

    let mut scored = Vec::with_capacity(rows.len());
    for (chunk_idx, chunk) in rows.chunks(batch_size).enumerate() {
        let base = chunk_idx * batch_size;
        // Fallback resampling draws from a one-element pool (the pair's own
        // path), on a per-row stream: scoring is batch-size independent.
        let sides: Vec<(Vec<T>, Vec<T>)> = chunk
            .par_iter()
            .enumerate()
            .map(|(j, row)| {
                let idx = (base + j) as u64;
                let p1 = root.join(&row.path1);
                let p2 = root.join(&row.path2);
                let mut r1 = stream_indexed(seed, StreamDomain::Augment, 2 * idx);
                let mut r2 = stream_indexed(seed, StreamDomain::Augment, 2 * idx + 1);
                (
                    load_with_fallback::<T>(&p1, std::slice::from_ref(&p1), cfg, &mut r1),
                    load_with_fallback::<T>(&p2, std::slice::from_ref(&p2), cfg, &mut r2),
                )
            })
            .collect();

        let n = chunk.len();
        let numel = 3 * hw.0 * hw.1;
        let mut x1 = Vec::with_capacity(n * numel);
        let mut x2 = Vec::with_capacity(n * numel);
        for (a, b) in &sides {
            x1.extend_from_slice(a);
            x2.extend_from_slice(b);
        }
        let tape = Tape::new();
        let bound = ckpt.net.bind(&tape)?;
        let shape = [n, 3, hw.0, hw.1];
        let e1 = bound.forward(&tape.constant(x1, &shape)?)?.value();
        let e2 = bound.forward(&tape.constant(x2, &shape)?)?.value();
        let dim = e1.len() / n;

        for (j, row) in chunk.iter().enumerate() {
            let a: Vec<f64> = e1[j * dim..(j + 1) * dim]
                .iter()
                .map(|v| v.to_f64c())
                .collect();
            let b: Vec<f64> = e2[j * dim..(j + 1) * dim]
                .iter()
                .map(|v| v.to_f64c())
                .collect();
            let distance = distance_f64(&a, &b);
            if !distance.is_finite() {
                return Err(Error::InvalidOp(format!(
                    "non-finite distance for pair {} vs {}",
                    row.path1, row.path2
                )));
            }
            scored.push(ScoredPair {
                path1: row.path1.clone(),
                path2: row.path2.clone(),
                label: row.label,
                distance,
            });
        }
    }
    Ok(scored)
}

/// Accuracy-optimal threshold and its accuracy in percent.
///
/// Candidates are the midpoints of consecutive distinct distances plus the
/// two degenerate cuts 0 (reject everything) and max + delta (accept
/// everything); this finite set attains every achievable accuracy. Ties go to
/// the smallest tau, the lower-FAR choice.
pub fn scan_threshold(scored: &[ScoredPair]) -> Result<(f64, f64)> {
    let (_, n_neg) = split_counts(scored)?;
    let mut sorted: Vec<(f64, u8)> = scored.iter().map(|s| (s.distance, s.label)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let max = sorted.last().expect("non-empty after split_counts").0;

    let mut candidates = vec![0.0];
    for w in sorted.windows(2) {
        if w[1].0 > w[0].0 {
            candidates.push(0.5 * (w[0].0 + w[1].0));
        }
    }
    candidates.push(max + 1e-6 * (1.0 + max));

    // prefix_pos[k] = positives among the k smallest distances.
    let mut prefix_pos = Vec::with_capacity(sorted.len() + 1);
    prefix_pos.push(0usize);
    for &(_, label) in &sorted {
        prefix_pos.push(prefix_pos.last().unwrap() + usize::from(label == 1));
    }

    let mut best_tau = 0.0;
    let mut best_correct = 0;
    let mut first = true;
    for &tau in &candidates {
        let below = sorted.partition_point(|&(d, _)| d < tau);
        let pos_below = prefix_pos[below];
        let neg_below = below - pos_below;
        let correct = pos_below + (n_neg - neg_below);
        // Candidates ascend, so a strict improvement rule keeps the smallest
        // tau among ties.
        if first || correct > best_correct {
            best_correct = correct;
            best_tau = tau;
            first = false;
        }
    }
    Ok((best_tau, 100.0 * best_correct as f64 / scored.len() as f64))
}

/// Error rates at a fixed threshold, all in percent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub acc: f64,
    pub far: f64,
    pub frr: f64,
}

/// FAR = share of negatives wrongly accepted, FRR = share of positives
/// wrongly rejected, ACC = share of all pairs decided correctly.
pub fn compute_metrics(scored: &[ScoredPair], tau: f64) -> Result<Metrics> {
    let (n_pos, n_neg) = split_counts(scored)?;
    let mut false_accepts = 0usize;
    let mut false_rejects = 0usize;
    for s in scored {
        match (s.label, decide(s.distance, tau)) {
            (0, true) => false_accepts += 1,
            (1, false) => false_rejects += 1,
            _ => {}
        }
    }
    let correct = scored.len() - false_accepts - false_rejects;
    Ok(Metrics {
        acc: 100.0 * correct as f64 / scored.len() as f64,
        far: 100.0 * false_accepts as f64 / n_neg as f64,
        frr: 100.0 * false_rejects as f64 / n_pos as f64,
    })
}

/// ROC (similarity score s = -D, so positives should score high) and its
/// trapezoidal area. Tied scores share one sweep step, which makes the area
/// equal the tie-adjusted probability that a random positive pair sits closer
/// than a random negative pair.
pub fn compute_roc_auc(scored: &[ScoredPair]) -> Result<(Vec<RocPoint>, f64)> {
    let (n_pos, n_neg) = split_counts(scored)?;
    let mut sorted: Vec<(f64, u8)> = scored.iter().map(|s| (-s.distance, s.label)).collect();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0 }];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev: Option<f64> = None;
    for &(score, label) in &sorted {
        if prev != Some(score) {
            if prev.is_some() {
                points.push(RocPoint {
                    fpr: fp as f64 / n_neg as f64,
                    tpr: tp as f64 / n_pos as f64,
                });
            }
            prev = Some(score);
        }
        if label == 1 {
            tp += 1;
        } else {
            fp += 1;
        }
    }
    points.push(RocPoint { fpr: 1.0, tpr: 1.0 });
    let auc = auc_from_roc(&points);
    Ok((points, auc))
}
