use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::backbones::EmbeddingNet;
use crate::dataset::{PreprocessConfig, Split};
use crate::sampler::{make_test_pairs, write_pairs_csv, PairRow};
use crate::testutil::toy_corpus;
use crate::trainer::{Checkpoint, LossHistory, TrainConfig};
use crate::Error;

fn scored(pairs: &[(f64, u8)]) -> Vec<ScoredPair> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, &(distance, label))| ScoredPair {
            path1: format!("a/img_{i}.png"),
            path2: format!("b/img_{i}.png"),
            label,
            distance,
        })
        .collect()
}

#[test]
fn decisions_use_a_strict_cut() {
    assert!(decide(0.0, 0.5));
    assert!(!decide(0.5, 0.5), "distance equal to tau means different");
    assert!(!decide(0.0, 0.0), "tau = 0 rejects everything");
    assert!(decide(0.49999, 0.5));
}

#[test]
fn threshold_scan_solves_the_worked_example() {
    let s = scored(&[(0.1, 1), (0.2, 1), (0.8, 0), (0.9, 0)]);
    let (tau, acc) = scan_threshold(&s).unwrap();
    assert_eq!(tau, 0.5);
    assert_eq!(acc, 100.0);
}

#[test]
fn threshold_scan_handles_inverted_labels() {
    // Negatives closer than positives: the best the cut can do is one of the
    // degenerate ends, and the tie breaks toward the smaller tau = 0.
    let s = scored(&[(0.1, 0), (0.9, 1)]);
    let (tau, acc) = scan_threshold(&s).unwrap();
    assert_eq!(tau, 0.0);
    assert_eq!(acc, 50.0);
}

#[test]
fn threshold_scan_ignores_duplicated_rows() {
    let base = scored(&[(0.15, 1), (0.3, 1), (0.32, 0), (0.7, 0), (0.3, 0)]);
    let doubled: Vec<ScoredPair> = base.iter().chain(base.iter()).cloned().collect();
    let (tau_a, acc_a) = scan_threshold(&base).unwrap();
    let (tau_b, acc_b) = scan_threshold(&doubled).unwrap();
    assert_eq!(tau_a, tau_b);
    assert_eq!(acc_a, acc_b);
}

#[test]
fn threshold_scan_matches_a_dense_grid() {
    // Quantized distances force ties; the scan must still reach the
    // accuracy any tau whatsoever could reach.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let n = rng.random_range(4..40);
        let mut pairs: Vec<(f64, u8)> = (0..n)
            .map(|_| {
                let d = f64::from(rng.random_range(0u32..12)) / 10.0;
                (d, u8::from(rng.random_range(0.0..1.0) < 0.5))
            })
            .collect();
        // Guarantee both labels appear.
        pairs[0].1 = 1;
        pairs[1].1 = 0;
        let s = scored(&pairs);
        let (tau_star, acc_star) = scan_threshold(&s).unwrap();

        let mut dists: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        dists.sort_by(f64::total_cmp);
        dists.dedup();
        let max = *dists.last().unwrap();
        let mut grid = vec![0.0, max + 0.05, max + 1.0];
        for w in dists.windows(2) {
            for k in 1..=3 {
                grid.push(w[0] + (w[1] - w[0]) * f64::from(k) / 4.0);
            }
        }
        grid.extend_from_slice(&dists);
        let best_grid = grid
            .iter()
            .map(|&tau| compute_metrics(&s, tau).unwrap().acc)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(
            (acc_star - best_grid).abs() < 1e-12,
            "scan {acc_star} vs grid {best_grid}"
        );
        assert_eq!(compute_metrics(&s, tau_star).unwrap().acc, acc_star);
    }
}

#[test]
fn metrics_match_the_hand_counted_example() {
    let s = scored(&[(0.1, 1), (0.3, 0), (0.5, 0), (0.9, 0)]);
    let m = compute_metrics(&s, 0.6).unwrap();
    assert!((m.far - 200.0 / 3.0).abs() < 1e-9, "far = {}", m.far);
    assert_eq!(m.frr, 0.0);

    let at_zero = compute_metrics(&s, 0.0).unwrap();
    assert_eq!(at_zero.far, 0.0);
    assert_eq!(at_zero.frr, 100.0);
}

proptest! {
    /// ACC decomposes exactly into the class-conditional error rates.
    #[test]
    fn accuracy_identity_holds(
        pos in proptest::collection::vec(0.0f64..2.0, 1..30),
        neg in proptest::collection::vec(0.0f64..2.0, 1..30),
        tau in 0.0f64..2.5,
    ) {
        let pairs: Vec<(f64, u8)> = pos
            .iter()
            .map(|&d| (d, 1u8))
            .chain(neg.iter().map(|&d| (d, 0u8)))
            .collect();
        let s = scored(&pairs);
        let m = compute_metrics(&s, tau).unwrap();
        let n_pos = pos.len() as f64;
        let n_neg = neg.len() as f64;
        let expected = (n_pos * (100.0 - m.frr) + n_neg * (100.0 - m.far)) / (n_pos + n_neg);
        prop_assert!((m.acc - expected).abs() < 1e-9);
    }

    /// A strictly increasing distortion of the distances changes neither the
    /// AUC nor the reachable accuracy, and the optimal cut still separates
    /// the same rows.
    #[test]
    fn monotone_distortion_is_invisible(
        pairs in proptest::collection::vec((0.0f64..3.0, 0u8..2), 4..40),
    ) {
        let mut pairs = pairs;
        pairs[0].1 = 1;
        pairs[1].1 = 0;
        let s = scored(&pairs);
        let warped: Vec<(f64, u8)> =
            pairs.iter().map(|&(d, y)| (d * d * d + 2.0 * d, y)).collect();
        let w = scored(&warped);

        let (_, auc_a) = compute_roc_auc(&s).unwrap();
        let (_, auc_b) = compute_roc_auc(&w).unwrap();
        prop_assert!((auc_a - auc_b).abs() < 1e-12);

        let (tau_a, acc_a) = scan_threshold(&s).unwrap();
        let (tau_b, acc_b) = scan_threshold(&w).unwrap();
        prop_assert_eq!(acc_a, acc_b);
        let below_a = s.iter().filter(|p| p.distance < tau_a).count();
        let below_b = w.iter().filter(|p| p.distance < tau_b).count();
        prop_assert_eq!(below_a, below_b);
    }
}

#[test]
fn auc_worked_examples() {
    let s = scored(&[(0.2, 1), (0.6, 1), (0.4, 0), (0.8, 0)]);
    let (_, auc) = compute_roc_auc(&s).unwrap();
    assert!((auc - 0.75).abs() < 1e-12);

    let perfect = scored(&[(0.1, 1), (0.2, 1), (0.6, 0), (0.9, 0)]);
    let (_, auc) = compute_roc_auc(&perfect).unwrap();
    assert_eq!(auc, 1.0);

    let symmetric = scored(&[(0.2, 1), (0.4, 1), (0.2, 0), (0.4, 0)]);
    let (_, auc) = compute_roc_auc(&symmetric).unwrap();
    assert!((auc - 0.5).abs() < 1e-12);
}

/// Brute-force Mann-Whitney with ties counted half.
fn mann_whitney(scored: &[ScoredPair]) -> f64 {
    let pos: Vec<f64> = scored
        .iter()
        .filter(|s| s.label == 1)
        .map(|s| s.distance)
        .collect();
    let neg: Vec<f64> = scored
        .iter()
        .filter(|s| s.label == 0)
        .map(|s| s.distance)
        .collect();
    let mut u = 0.0;
    for &p in &pos {
        for &n in &neg {
            if p < n {
                u += 1.0;
            } else if p == n {
                u += 0.5;
            }
        }
    }
    u / (pos.len() as f64 * neg.len() as f64)
}

#[test]
fn trapezoid_auc_equals_mann_whitney() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for round in 0..200 {
        let n = rng.random_range(4..60);
        // A coarse value grid makes tied distances common.
        let levels = rng.random_range(3u32..10);
        let mut pairs: Vec<(f64, u8)> = (0..n)
            .map(|_| {
                let d = f64::from(rng.random_range(0..levels)) / f64::from(levels);
                (d, u8::from(rng.random_range(0.0..1.0) < 0.5))
            })
            .collect();
        pairs[0].1 = 1;
        pairs[1].1 = 0;
        let s = scored(&pairs);
        let (points, auc) = compute_roc_auc(&s).unwrap();
        let u = mann_whitney(&s);
        assert!(
            (auc - u).abs() < 1e-9,
            "round {round}: trapezoid {auc} vs brute force {u}"
        );
        assert_eq!(points.first().unwrap(), &RocPoint { fpr: 0.0, tpr: 0.0 });
        assert_eq!(points.last().unwrap(), &RocPoint { fpr: 1.0, tpr: 1.0 });
        for w in points.windows(2) {
            assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
        }
    }
}

#[test]
fn one_sided_label_sets_are_rejected() {
    let all_pos = scored(&[(0.1, 1), (0.2, 1)]);
    for err in [
        scan_threshold(&all_pos).unwrap_err(),
        compute_metrics(&all_pos, 0.5).unwrap_err(),
        compute_roc_auc(&all_pos).map(|_| ()).unwrap_err(),
        build_report(&all_pos).map(|_| ()).unwrap_err(),
    ] {
        match err {
            Error::OneSidedLabels { pos, neg } => {
                assert_eq!((pos, neg), (2, 0));
            }
            other => panic!("expected OneSidedLabels, got {other:?}"),
        }
    }
}

#[test]
fn report_artifacts_round_trip() {
    let s = scored(&[
        (0.1, 1),
        (0.2, 1),
        (0.3, 0),
        (0.25, 1),
        (0.7, 0),
        (0.9, 0),
    ]);
    let report = build_report(&s).unwrap();
    assert_eq!(report.n_pos, 3);
    assert_eq!(report.n_neg, 3);

    let tmp = tempfile::tempdir().unwrap();
    emit_report(&report, tmp.path()).unwrap();

    let json = std::fs::read_to_string(tmp.path().join("report.json")).unwrap();
    assert!(json.ends_with('\n'));
    let parsed: EvalReport = serde_json::from_str(&json).unwrap();
    assert_eq!(parsed, report);

    let csv = std::fs::read_to_string(tmp.path().join("roc.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "fpr,tpr");
    assert_eq!(lines.len(), report.roc.len() + 1);
    let reparsed: Vec<RocPoint> = lines[1..]
        .iter()
        .map(|l| {
            let (f, t) = l.split_once(',').unwrap();
            RocPoint {
                fpr: f.parse().unwrap(),
                tpr: t.parse().unwrap(),
            }
        })
        .collect();
    assert!((auc_from_roc(&reparsed) - report.auc).abs() < 1e-9);

    let svg = std::fs::read_to_string(tmp.path().join("roc.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    assert!(svg.contains("stroke-dasharray"), "diagonal reference missing");
    assert!(svg.trim_end().ends_with("</svg>"));
}

fn fresh_checkpoint(hw: (usize, usize), seed: u64) -> Checkpoint<f32> {
    let config = TrainConfig {
        image_size: hw,
        ..TrainConfig::default()
    };
    Checkpoint {
        net: EmbeddingNet::new(config.arch_spec(), hw, seed).unwrap(),
        config,
        epoch: 1,
        seed,
        history: LossHistory {
            loss: "contrastive".into(),
            epochs: vec![],
        },
    }
}

fn plain_cfg(hw: (usize, usize)) -> PreprocessConfig {
    PreprocessConfig {
        target: hw,
        ..PreprocessConfig::default()
    }
}

#[test]
fn identical_paths_score_exactly_zero() {
    let (tmp, corpus) = toy_corpus(&[("a", 2), ("b", 2)], Split::Test);
    let rows = vec![PairRow {
        path1: corpus.rel_path(0, 0),
        path2: corpus.rel_path(0, 0),
        label: 1,
    }];
    let pairs_file = tmp.path().join("pairs.csv");
    write_pairs_csv(&rows, &pairs_file).unwrap();

    let hw = (32, 32);
    let ckpt = fresh_checkpoint(hw, 3);
    let scored = score_pairs(&ckpt, corpus.root(), &pairs_file, &plain_cfg(hw), 8).unwrap();
    assert_eq!(scored.len(), 1);
    assert_eq!(scored[0].distance, 0.0);
}

#[test]
fn scoring_is_batch_size_independent_and_ordered() {
    let (tmp, corpus) = toy_corpus(&[("a", 4), ("b", 4)], Split::Test);
    let rows = make_test_pairs(&corpus, 8, 17).unwrap();
    let pairs_file = tmp.path().join("pairs.csv");
    write_pairs_csv(&rows, &pairs_file).unwrap();

    let hw = (32, 32);
    let ckpt = fresh_checkpoint(hw, 3);
    let batched = score_pairs(&ckpt, corpus.root(), &pairs_file, &plain_cfg(hw), 64).unwrap();
    let single = score_pairs(&ckpt, corpus.root(), &pairs_file, &plain_cfg(hw), 1).unwrap();
    assert_eq!(batched.len(), rows.len());
    for ((b, s), row) in batched.iter().zip(&single).zip(&rows) {
        assert_eq!(b.path1, row.path1);
        assert_eq!(b.path2, row.path2);
        assert_eq!(b.label, row.label);
        assert!(
            (b.distance - s.distance).abs() < 1e-6,
            "batched {} vs single {}",
            b.distance,
            s.distance
        );
        assert!(b.distance.is_finite() && b.distance >= 0.0);
    }
}

#[test]
fn unreadable_images_still_score_via_fallback() {
    let (tmp, corpus) = toy_corpus(&[("a", 2), ("b", 2)], Split::Test);
    let broken = corpus.root().join("a/img_00.png");
    std::fs::write(&broken, b"not a png at all").unwrap();

    let rows = vec![
        PairRow {
            path1: "a/img_00.png".into(),
            path2: "a/img_01.png".into(),
            label: 1,
        },
        PairRow {
            path1: "b/img_00.png".into(),
            path2: "b/img_01.png".into(),
            label: 1,
        },
    ];
    let pairs_file = tmp.path().join("pairs.csv");
    write_pairs_csv(&rows, &pairs_file).unwrap();

    let hw = (32, 32);
    let ckpt = fresh_checkpoint(hw, 3);
    let scored = score_pairs(&ckpt, corpus.root(), &pairs_file, &plain_cfg(hw), 8).unwrap();
    assert_eq!(scored.len(), 2);
    for s in &scored {
        assert!(s.distance.is_finite());
    }
}

#[test]
fn score_pairs_validates_its_inputs() {
    let (tmp, corpus) = toy_corpus(&[("a", 2), ("b", 2)], Split::Test);
    let pairs_file = tmp.path().join("pairs.csv");
    let rows = vec![PairRow {
        path1: corpus.rel_path(0, 0),
        path2: corpus.rel_path(1, 0),
        label: 0,
    }];
    write_pairs_csv(&rows, &pairs_file).unwrap();
    let hw = (32, 32);
    let ckpt = fresh_checkpoint(hw, 3);

    let augmented = PreprocessConfig {
        target: hw,
        augment: true,
        ..PreprocessConfig::default()
    };
    assert!(matches!(
        score_pairs(&ckpt, corpus.root(), &pairs_file, &augmented, 8),
        Err(Error::InvalidConfig(_))
    ));

    let wrong_size = plain_cfg((64, 64));
    assert!(matches!(
        score_pairs(&ckpt, corpus.root(), &pairs_file, &wrong_size, 8),
        Err(Error::InputSizeMismatch { .. })
    ));

    let bad_csv = tmp.path().join("bad.csv");
    std::fs::write(&bad_csv, "path1,path2,label\na.png,b.png,2\n").unwrap();
    match score_pairs(&ckpt, corpus.root(), &bad_csv, &plain_cfg(hw), 8) {
        Err(Error::PairFileFormat { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected PairFileFormat, got {other:?}"),
    }
}

#[test]
fn report_from_scored_corpus_is_complete() {
    let (tmp, corpus) = toy_corpus(&[("a", 4), ("b", 4)], Split::Test);
    let rows = make_test_pairs(&corpus, 12, 29).unwrap();
    let pairs_file = tmp.path().join("pairs.csv");
    write_pairs_csv(&rows, &pairs_file).unwrap();

    let hw = (32, 32);
    let ckpt = fresh_checkpoint(hw, 8);
    let scored = score_pairs(&ckpt, corpus.root(), &pairs_file, &plain_cfg(hw), 16).unwrap();
    let report = build_report(&scored).unwrap();
    assert_eq!(report.n_pos + report.n_neg, rows.len());
    assert!((0.0..=1.0).contains(&report.auc));
    assert!((0.0..=100.0).contains(&report.acc));
    // The scanned accuracy is what the metrics recompute at tau*.
    let again = compute_metrics(&scored, report.threshold).unwrap();
    assert_eq!(again.acc, report.acc);
}
