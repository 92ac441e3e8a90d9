//! Metric-learning objectives over embedding distances.
//!
//! Distances are Euclidean with a 1e-12 epsilon under the square root, which
//! keeps the gradient finite when two embeddings coincide. Both losses are
//! built from differentiable tensor ops, so they backpropagate through the
//! distance into the embeddings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Additive epsilon inside the distance square root.
pub const DISTANCE_EPS: f64 = 1e-12;

/// Row-wise Euclidean distance between two [N, d] embedding batches: [N].
pub fn euclidean_distance<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() || a.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let diff = a.sub(b)?;
    diff.square()
        .sum_axes(&[1], false)
        .map(|s| s.add_scalar(T::from_f64c(DISTANCE_EPS)).sqrt())
}

fn check_margin<T: Scalar>(margin: T) -> Result<()> {
    let m = margin.to_f64c();
    if !(m.is_finite() && m > 0.0) {
        return Err(Error::InvalidConfig(format!("margin must be positive, got {}", m)));
    }
    Ok(())
}

fn check_binary<T: Scalar>(labels: &Tensor<T>) -> Result<()> {
    labels.with_data(|ys| {
        for &y in ys {
            if y != T::zero() && y != T::one() {
                return Err(Error::NonBinaryLabel(y.to_f64c()));
            }
        }
        Ok(())
    })
}

/// Contrastive loss over a batch of pair distances:
/// mean(0.5 * y * D^2 + 0.5 * (1 - y) * relu(margin - D)^2).
/// `labels` holds 1 for same-scribe pairs and 0 for different-scribe pairs.
pub fn contrastive_loss<T: Scalar>(
    distances: &Tensor<T>,
    labels: &Tensor<T>,
    margin: T,
) -> Result<Tensor<T>> {
    check_margin(margin)?;
    check_binary(labels)?;
    if distances.shape() != labels.shape() {
        return Err(Error::ShapeMismatch {
            left: distances.shape().to_vec(),
            right: labels.shape().to_vec(),
        });
    }
    let pull = distances.square().mul(labels)?;
    let push = distances
        .neg()
        .add_scalar(margin)
        .relu()
        .square()
        .mul(&labels.neg().add_scalar(T::one()))?;
    Ok(pull
        .add(&push)?
        .mul_scalar(T::from_f64c(0.5))
        .mean_all())
}

/// Triplet loss over matched anchor-positive and anchor-negative distances:
/// mean(relu(D_ap - D_an + margin)).
pub fn triplet_loss<T: Scalar>(
    d_ap: &Tensor<T>,
    d_an: &Tensor<T>,
    margin: T,
) -> Result<Tensor<T>> {
    check_margin(margin)?;
    if d_ap.shape() != d_an.shape() {
        return Err(Error::ShapeMismatch {
            left: d_ap.shape().to_vec(),
            right: d_an.shape().to_vec(),
        });
    }
    Ok(d_ap.sub(d_an)?.add_scalar(margin).relu().mean_all())
}

/// Which objective a run trains with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Contrastive,
    Triplet,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Contrastive => "contrastive",
            LossKind::Triplet => "triplet",
        })
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contrastive" => Ok(LossKind::Contrastive),
            "triplet" => Ok(LossKind::Triplet),
            other => Err(Error::InvalidConfig(format!(
                "unknown loss '{}' (expected contrastive or triplet)",
                other
            ))),
        }
    }
}

/// Objective plus its margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub margin: f64,
}

impl LossConfig {
    /// Default margin for each objective: 0.6 contrastive, 1.0 triplet.
    pub fn for_kind(kind: LossKind) -> Self {
        let margin = match kind {
            LossKind::Contrastive => 0.6,
            LossKind::Triplet => 1.0,
        };
        LossConfig { kind, margin }
    }

    pub fn validate(&self) -> Result<()> {
        check_margin(self.margin)
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig::for_kind(LossKind::Contrastive)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use crate::tensor::Tape;
    use proptest::prelude::*;

    fn contrastive_scalar(y: f64, d: f64, m: f64) -> f64 {
        let t = Tape::<f64>::new();
        let dist = t.constant(vec![d], &[1]).unwrap();
        let label = t.constant(vec![y], &[1]).unwrap();
        contrastive_loss(&dist, &label, m).unwrap().item()
    }

    fn triplet_scalar(d_ap: f64, d_an: f64, m: f64) -> f64 {
        let t = Tape::<f64>::new();
        let ap = t.constant(vec![d_ap], &[1]).unwrap();
        let an = t.constant(vec![d_an], &[1]).unwrap();
        triplet_loss(&ap, &an, m).unwrap().item()
    }

    #[test]
    fn contrastive_frozen_oracles() {
        // Same-scribe pair at distance zero contributes nothing.
        assert!((contrastive_scalar(1.0, 0.0, 0.6) - 0.0).abs() < 1e-7);
        // Different-scribe pair beyond the margin contributes nothing.
        assert!((contrastive_scalar(0.0, 0.7, 0.6) - 0.0).abs() < 1e-7);
        // Different-scribe pair inside the margin: 0.5 * (0.6 - 0.3)^2.
        assert!((contrastive_scalar(0.0, 0.3, 0.6) - 0.045).abs() < 1e-7);
        // Same-scribe pair at 0.5: 0.5 * 0.25.
        assert!((contrastive_scalar(1.0, 0.5, 0.6) - 0.125).abs() < 1e-7);
    }

    #[test]
    fn triplet_frozen_oracles() {
        // Well-separated triplet inside the margin slack.
        assert!((triplet_scalar(0.2, 1.5, 1.0) - 0.0).abs() < 1e-7);
        // Equal distances leave exactly the margin.
        assert!((triplet_scalar(0.8, 0.8, 1.0) - 1.0).abs() < 1e-7);
        // Inverted ordering pays distance gap plus margin.
        assert!((triplet_scalar(0.9, 0.4, 1.0) - 1.5).abs() < 1e-7);
    }

    #[test]
    fn batch_losses_average_elementwise_terms() {
        let t = Tape::<f64>::new();
        let d = t.constant(vec![0.5, 0.3], &[2]).unwrap();
        let y = t.constant(vec![1.0, 0.0], &[2]).unwrap();
        let loss = contrastive_loss(&d, &y, 0.6).unwrap().item();
        assert!((loss - (0.125 + 0.045) / 2.0).abs() < 1e-12);

        let ap = t.constant(vec![0.2, 0.9], &[2]).unwrap();
        let an = t.constant(vec![1.5, 0.4], &[2]).unwrap();
        let tl = triplet_loss(&ap, &an, 1.0).unwrap().item();
        assert!((tl - (0.0 + 1.5) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn euclidean_distance_matches_pythagoras() {
        let t = Tape::<f64>::new();
        let a = t.constant(vec![0.0, 0.0, 1.0, 1.0], &[2, 2]).unwrap();
        let b = t.constant(vec![3.0, 4.0, 1.0, 1.0], &[2, 2]).unwrap();
        let d = euclidean_distance(&a, &b).unwrap();
        assert_eq!(d.shape(), &[2]);
        let v = d.value();
        assert!((v[0] - 5.0).abs() < 1e-6);
        // Identical rows land on sqrt(eps), not zero, keeping gradients finite.
        assert!((v[1] - DISTANCE_EPS.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn distance_gradient_finite_at_identical_embeddings() {
        let t = Tape::<f64>::new();
        let a = t.leaf(vec![0.5, 0.5], &[1, 2], true).unwrap();
        let b = t.constant(vec![0.5, 0.5], &[1, 2]).unwrap();
        euclidean_distance(&a, &b).unwrap().sum_all().backward().unwrap();
        let g = a.grad().unwrap();
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn labels_must_be_binary() {
        let t = Tape::<f64>::new();
        let d = t.constant(vec![0.5], &[1]).unwrap();
        let y = t.constant(vec![0.5], &[1]).unwrap();
        assert!(matches!(
            contrastive_loss(&d, &y, 0.6),
            Err(Error::NonBinaryLabel(v)) if v == 0.5
        ));
    }

    #[test]
    fn margins_must_be_positive() {
        let t = Tape::<f64>::new();
        let d = t.constant(vec![0.5], &[1]).unwrap();
        let y = t.constant(vec![1.0], &[1]).unwrap();
        assert!(matches!(
            contrastive_loss(&d, &y, 0.0),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            triplet_loss(&d, &d, -1.0),
            Err(Error::InvalidConfig(_))
        ));
        assert!(LossConfig { kind: LossKind::Triplet, margin: f64::NAN }.validate().is_err());
    }

    #[test]
    fn shape_mismatches_rejected() {
        let t = Tape::<f64>::new();
        let a = t.constant(vec![0.0; 4], &[2, 2]).unwrap();
        let b = t.constant(vec![0.0; 6], &[2, 3]).unwrap();
        assert!(euclidean_distance(&a, &b).is_err());
        let d = t.constant(vec![0.5, 0.5], &[2]).unwrap();
        let y = t.constant(vec![1.0], &[1]).unwrap();
        assert!(contrastive_loss(&d, &y, 0.6).is_err());
        let d3 = t.constant(vec![0.5; 3], &[3]).unwrap();
        assert!(triplet_loss(&d, &d3, 1.0).is_err());
    }

    #[test]
    fn losses_backpropagate_into_embeddings() {
        // Finite differences through distance + loss, for both objectives.
        let a0 = vec![0.3, -0.6, 0.9, 0.1, 0.5, -0.2];
        let b0 = vec![-0.4, 0.2, 0.6, 0.8, -0.1, 0.4];
        let labels = vec![1.0, 0.0];
        let report = finite_diff_check(
            &[(a0.clone(), vec![2, 3]), (b0.clone(), vec![2, 3])],
            None,
            |tape, xs| {
                let y = tape.constant(labels.clone(), &[2])?;
                let d = euclidean_distance(&xs[0], &xs[1])?;
                contrastive_loss(&d, &y, 0.6)
            },
        )
        .unwrap();
        assert!(report.max_err < 1e-6, "contrastive: {:.3e}", report.max_err);

        let n0 = vec![0.9, 0.4, -0.3, -0.7, 0.2, 0.8];
        let report = finite_diff_check(
            &[
                (a0.clone(), vec![2, 3]),
                (b0.clone(), vec![2, 3]),
                (n0, vec![2, 3]),
            ],
            None,
            |_, xs| {
                let d_ap = euclidean_distance(&xs[0], &xs[1])?;
                let d_an = euclidean_distance(&xs[0], &xs[2])?;
                triplet_loss(&d_ap, &d_an, 1.0)
            },
        )
        .unwrap();
        assert!(report.max_err < 1e-6, "triplet: {:.3e}", report.max_err);
    }

    #[test]
    fn loss_config_defaults() {
        let c = LossConfig::for_kind(LossKind::Contrastive);
        assert_eq!(c.margin, 0.6);
        let t = LossConfig::for_kind(LossKind::Triplet);
        assert_eq!(t.margin, 1.0);
        assert_eq!(LossConfig::default().kind, LossKind::Contrastive);
        assert_eq!("triplet".parse::<LossKind>().unwrap(), LossKind::Triplet);
        assert!("softmax".parse::<LossKind>().is_err());
    }

    proptest! {
        #[test]
        fn contrastive_is_nonnegative_and_zero_beyond_margin(
            d in 0.0f64..3.0,
            y in prop::bool::ANY,
            m in 0.1f64..2.0,
        ) {
            let v = contrastive_scalar(if y { 1.0 } else { 0.0 }, d, m);
            prop_assert!(v >= 0.0);
            if !y && d >= m {
                prop_assert!(v == 0.0);
            }
            if y {
                prop_assert!((v - 0.5 * d * d).abs() < 1e-12);
            }
        }

        #[test]
        fn contrastive_monotone_in_distance_for_positive_pairs(
            d1 in 0.0f64..2.0,
            delta in 0.0f64..1.0,
        ) {
            prop_assert!(
                contrastive_scalar(1.0, d1 + delta, 0.6) >= contrastive_scalar(1.0, d1, 0.6)
            );
        }

        #[test]
        fn triplet_nonnegative_and_satisfied_triplets_vanish(
            d_ap in 0.0f64..3.0,
            gap in 0.0f64..3.0,
            m in 0.1f64..2.0,
        ) {
            let v = triplet_scalar(d_ap, d_ap + gap, m);
            prop_assert!(v >= 0.0);
            if gap >= m {
                prop_assert!(v == 0.0);
            } else {
                prop_assert!((v - (m - gap)).abs() < 1e-12);
            }
        }
    }
}
