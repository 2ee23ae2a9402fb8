//! Evaluation metrics: mapping accuracy over inter-edges, MAE/RMSE for
//! rating prediction, and the affine bridge between probabilities and the
//! rating scale.

use super::TrainError;
use crate::graph::{EdgeRole, GraphBundle};
use crate::tensor::Tensor;

/// Fraction of query nodes whose highest-probability inter-edge carries
/// label 1. Queries are modality-1 node ids; a query whose true partner is
/// missing from its candidates (or that has no candidates at all) counts as
/// wrong. Ties break toward the lower edge index.
pub fn eval_mapping_accuracy(probabilities: &Tensor, bundle: &GraphBundle, queries: &[usize]) -> f64 {
    if queries.is_empty() {
        return 0.0;
    }
    let labels = bundle.labels().unwrap_or(&[]);
    let list = bundle.edges(EdgeRole::Inter);
    let p = probabilities.value();
    let mut correct = 0usize;
    for &q in queries {
        let mut best: Option<(f64, usize)> = None;
        for (e, &s) in list.senders().iter().enumerate() {
            if s != q {
                continue;
            }
            if best.is_none() || p[e] > best.unwrap().0 {
                best = Some((p[e], e));
            }
        }
        if let Some((_, e)) = best {
            if labels.get(e).copied() == Some(1.0) {
                correct += 1;
            }
        }
    }
    correct as f64 / queries.len() as f64
}

/// Mean absolute error and root mean square error of predicted ratings.
pub fn eval_mae_rmse(predicted: &[f64], truth: &[f64]) -> Result<(f64, f64), TrainError> {
    if predicted.len() != truth.len() {
        return Err(TrainError::Contract(format!(
            "eval_mae_rmse: {} predictions vs {} truths",
            predicted.len(),
            truth.len()
        )));
    }
    if predicted.is_empty() {
        return Err(TrainError::Contract("eval_mae_rmse: empty input".into()));
    }
    let n = predicted.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    for (p, t) in predicted.iter().zip(truth) {
        let d = p - t;
        abs += d.abs();
        sq += d * d;
    }
    Ok((abs / n, (sq / n).sqrt()))
}

fn check_range(range: (f64, f64)) -> Result<(), TrainError> {
    if range.1 <= range.0 {
        return Err(TrainError::Config(format!(
            "rating range [{}, {}] must be increasing",
            range.0, range.1
        )));
    }
    Ok(())
}

/// Affine decode from an edge probability to the rating scale.
pub fn rating_from_probability(p: f64, range: (f64, f64)) -> Result<f64, TrainError> {
    check_range(range)?;
    Ok(range.0 + p * (range.1 - range.0))
}

/// Affine encode of a rating into a `[0, 1]` training target.
pub fn rating_to_target(rating: f64, range: (f64, f64)) -> Result<f64, TrainError> {
    check_range(range)?;
    Ok((rating - range.0) / (range.1 - range.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mae_rmse_perfect_and_hand_example() {
        assert_eq!(eval_mae_rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), (0.0, 0.0));
        let (mae, rmse) = eval_mae_rmse(&[3.0, 4.0], &[4.0, 2.0]).unwrap();
        assert!((mae - 1.5).abs() < 1e-12);
        assert!((rmse - 2.5f64.sqrt()).abs() < 1e-12);
        assert!((rmse - 1.5811).abs() < 1e-4);
    }

    #[test]
    fn constant_offset_makes_mae_equal_rmse() {
        let truth = [1.0, 2.5, 3.0, 0.5];
        let pred: Vec<f64> = truth.iter().map(|t| t + 0.75).collect();
        let (mae, rmse) = eval_mae_rmse(&pred, &truth).unwrap();
        assert!((mae - 0.75).abs() < 1e-12);
        assert!((rmse - 0.75).abs() < 1e-12);
    }

    #[test]
    fn mae_never_exceeds_rmse() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.gen_range(1..20);
            let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..5.0)).collect();
            let truth: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..5.0)).collect();
            let (mae, rmse) = eval_mae_rmse(&pred, &truth).unwrap();
            assert!(mae <= rmse + 1e-12);
        }
    }

    #[test]
    fn empty_input_is_a_contract_error() {
        assert!(eval_mae_rmse(&[], &[]).is_err());
        assert!(eval_mae_rmse(&[1.0], &[]).is_err());
    }

    #[test]
    fn rating_probability_bridge() {
        let range = (0.5, 4.0);
        assert!((rating_from_probability(0.5, range).unwrap() - 2.25).abs() < 1e-12);
        // Round trip over the FilmTrust-style half-step grid.
        let mut step = 0.5;
        while step <= 4.0 {
            let y = rating_to_target(step, range).unwrap();
            assert!((0.0..=1.0).contains(&y));
            let back = rating_from_probability(y, range).unwrap();
            assert!((back - step).abs() < 1e-12);
            step += 0.5;
        }
        // The observed grid maps onto {0, 1/7, ..., 1}.
        let y = rating_to_target(1.0, range).unwrap();
        assert!((y - 1.0 / 7.0).abs() < 1e-12);
        assert!(rating_to_target(1.0, (2.0, 2.0)).is_err());
    }

    #[test]
    fn mapping_accuracy_argmax_protocol() {
        use crate::tensor::Tensor;
        // 2 queries, 2 candidates each.
        let raw1 = Tensor::zeros(2, 1);
        let raw2 = Tensor::zeros(2, 1);
        let mut b = crate::graph::GraphBundle::new(
            raw1,
            raw2,
            &[],
            &[],
            &[(0, 0), (0, 1), (1, 0), (1, 1)],
        )
        .unwrap();
        b.set_labels(vec![1.0, 0.0, 0.0, 1.0]).unwrap();

        // Peaked on the true edges.
        let p = Tensor::new(4, 1, vec![0.9, 0.1, 0.2, 0.8], false).unwrap();
        assert_eq!(eval_mapping_accuracy(&p, &b, &[0, 1]), 1.0);

        // Query 1 argmax lands on the wrong candidate.
        let p = Tensor::new(4, 1, vec![0.9, 0.1, 0.8, 0.2], false).unwrap();
        assert_eq!(eval_mapping_accuracy(&p, &b, &[0, 1]), 0.5);

        // Monotone transforms leave the argmax unchanged.
        let squashed = Tensor::new(4, 1, vec![0.9f64.powi(3), 0.1f64.powi(3), 0.8f64.powi(3), 0.2f64.powi(3)], false)
            .unwrap();
        assert_eq!(
            eval_mapping_accuracy(&squashed, &b, &[0, 1]),
            eval_mapping_accuracy(&p, &b, &[0, 1])
        );
    }

    #[test]
    fn missing_true_partner_counts_as_wrong() {
        let raw1 = Tensor::zeros(2, 1);
        let raw2 = Tensor::zeros(3, 1);
        // Query 0's candidates omit its true partner entirely: labels 0.
        let mut b = crate::graph::GraphBundle::new(raw1, raw2, &[], &[], &[(0, 1), (0, 2), (1, 0)]).unwrap();
        b.set_labels(vec![0.0, 0.0, 1.0]).unwrap();
        let p = Tensor::new(3, 1, vec![0.99, 0.98, 0.6], false).unwrap();
        assert_eq!(eval_mapping_accuracy(&p, &b, &[0]), 0.0);
        assert_eq!(eval_mapping_accuracy(&p, &b, &[0, 1]), 0.5);
    }
}
