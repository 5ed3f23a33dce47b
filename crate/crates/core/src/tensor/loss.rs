//! Class weighting and the loss-form switch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which cross-entropy variant the trainer minimizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossForm {
    /// `-w_y log p_y`, averaged over labeled points.
    #[default]
    Categorical,
    /// Per-class binary terms `-sum_c w_c (y_c log p_c + (1 - y_c) log(1 - p_c))`,
    /// averaged over labeled points.
    PerClassBinary,
}

/// Inverse-frequency class weights normalized to sum to one.
///
/// `w_c = (1 / g_c) / sum_k (1 / g_k)` with `g_c = N_c / sum_k N_k`.
pub fn compute_class_weights(counts: &[u64]) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(Error::InvalidArgument("no classes".into()));
    }
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass { class });
    }
    let total: f64 = counts.iter().map(|&c| c as f64).sum();
    let inv: Vec<f64> = counts.iter().map(|&c| total / c as f64).collect();
    let norm: f64 = inv.iter().sum();
    Ok(inv.into_iter().map(|v| v / norm).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};
    use proptest::prelude::*;
    use std::sync::Arc;

    #[test]
    fn balanced_counts_give_uniform_weights() {
        let w = compute_class_weights(&[5, 5, 5]).unwrap();
        for v in w {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_evaluated_weights() {
        let w = compute_class_weights(&[900, 100]).unwrap();
        assert!((w[0] - 0.1).abs() < 1e-12 && (w[1] - 0.9).abs() < 1e-12);
        let w = compute_class_weights(&[1, 1, 2]).unwrap();
        assert!((w[0] - 0.4).abs() < 1e-12);
        assert!((w[1] - 0.4).abs() < 1e-12);
        assert!((w[2] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn zero_count_is_an_error() {
        assert!(matches!(
            compute_class_weights(&[3, 0, 1]),
            Err(Error::EmptyClass { class: 1 })
        ));
    }

    fn loss_of(probs: Vec<f64>, labels: Vec<u8>, w: &[f64], form: LossForm) -> f64 {
        let n = labels.len();
        let c = w.len();
        let mut g = Graph::new(true);
        let p = g.constant(Tensor::matrix(n, c, probs).unwrap());
        let l = g.weighted_cross_entropy(p, Arc::new(labels), w, form).unwrap();
        g.value(l).item()
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let l = loss_of(vec![1.0, 0.0, 0.0, 1.0], vec![0, 1], &[0.5, 0.5], LossForm::Categorical);
        assert_eq!(l, 0.0);
    }

    #[test]
    fn uniform_two_class_hand_value() {
        let l = loss_of(vec![0.5; 4], vec![0, 1], &[0.5, 0.5], LossForm::Categorical);
        assert!((l - 0.5 * 2f64.ln()).abs() < 1e-15);
        assert!((l - 0.3466).abs() < 1e-4);
    }

    #[test]
    fn doubling_weights_doubles_loss() {
        let probs = vec![0.2, 0.8, 0.6, 0.4, 0.3, 0.7];
        let labels = vec![0, 1, 1];
        let a = loss_of(probs.clone(), labels.clone(), &[0.3, 0.7], LossForm::Categorical);
        let b = loss_of(probs, labels, &[0.6, 1.4], LossForm::Categorical);
        assert_eq!(b, 2.0 * a);
    }

    #[test]
    fn unlabeled_rows_are_ignored() {
        let a = loss_of(vec![0.2, 0.8, 0.9, 0.1], vec![1, crate::cloud::UNLABELED], &[1.0, 1.0], LossForm::Categorical);
        assert!((a + 0.8f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn zero_probability_is_clamped() {
        let l = loss_of(vec![1.0, 0.0], vec![1], &[1.0, 1.0], LossForm::Categorical);
        assert!((l - 1e-12f64.ln().abs()).abs() < 1e-9);
    }

    #[test]
    fn binary_form_hand_value() {
        // one point, label 0, p = (0.25, 0.75), w = (1, 1)
        let l = loss_of(vec![0.25, 0.75], vec![0], &[1.0, 1.0], LossForm::PerClassBinary);
        assert!((l - (-(0.25f64.ln()) - 0.25f64.ln())).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn weights_sum_to_one_and_are_scale_invariant(
            counts in prop::collection::vec(1u64..10_000, 2..10),
            scale in 1u64..50,
        ) {
            let w = compute_class_weights(&counts).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let scaled: Vec<u64> = counts.iter().map(|c| c * scale).collect();
            let ws = compute_class_weights(&scaled).unwrap();
            for (a, b) in w.iter().zip(&ws) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
