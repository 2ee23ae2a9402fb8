//! Task preparation: turn a [`TaskDataset`] into a labeled [`GraphBundle`]
//! plus the [`TrainTask`] describing which inter-edges train and which
//! evaluate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::{GroundTruth, Split, TaskDataset};
use super::metrics::rating_to_target;
use super::{TrainError, TrainTask};
use crate::build::{build_full_bipartite, build_knn_intra, build_social_intra, build_topk_inter, BuildConfig};
use crate::graph::GraphBundle;
use crate::tensor::Tensor;

/// Materialize both feature blocks; embedding specs draw their seeds from
/// the build seed in a fixed order.
fn materialize(ds: &TaskDataset, seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s1: u64 = rng.gen();
    let s2: u64 = rng.gen();
    (ds.feat1.materialize(s1), ds.feat2.materialize(s2))
}

fn knn_or_empty(
    features: &Tensor,
    k: usize,
    metric: crate::build::DistanceMetric,
) -> Result<Vec<(usize, usize)>, TrainError> {
    if k == 0 {
        return Ok(Vec::new());
    }
    Ok(build_knn_intra(features, k, metric)?)
}

/// Mapping task: KNN intra-edges on both modalities, top-K inter-edges from
/// the task confidence, binary labels (1 on true pairs). Training covers
/// every candidate edge of a train-split query; validation and test score
/// argmax accuracy over their queries' candidates.
pub fn prepare_mapping_task(
    ds: &TaskDataset,
    build: &BuildConfig,
) -> Result<(GraphBundle, TrainTask), TrainError> {
    let GroundTruth::Mapping(pairs) = &ds.truth else {
        return Err(TrainError::Config("mapping task needs mapping ground truth".into()));
    };
    let confidence = ds
        .confidence
        .as_ref()
        .ok_or_else(|| TrainError::Config("mapping task needs a confidence matrix for top-K inter-edges".into()))?;
    let (feat1, feat2) = materialize(ds, build.seed);
    let n1 = feat1.rows();
    if pairs.len() != n1 {
        return Err(TrainError::Config(format!(
            "expected one mapping pair per modality-1 instance ({n1}), got {}",
            pairs.len()
        )));
    }
    let intra1 = knn_or_empty(&feat1, build.k_intra1, build.metric)?;
    let intra2 = knn_or_empty(&feat2, build.k_intra2, build.metric)?;
    let inter = build_topk_inter(confidence, build.k_inter)?;

    let partner: std::collections::HashMap<usize, usize> = pairs.iter().copied().collect();
    let labels: Vec<f64> = inter
        .iter()
        .map(|&(q, j)| if partner.get(&q) == Some(&j) { 1.0 } else { 0.0 })
        .collect();

    let mut bundle = GraphBundle::new(feat1, feat2, &intra1, &intra2, &inter)?;
    bundle.set_labels(labels)?;
    bundle.init_edge_attrs()?;

    let train_queries: std::collections::HashSet<usize> =
        ds.record_indices(Split::Train).into_iter().collect();
    let train_edges: Vec<usize> = inter
        .iter()
        .enumerate()
        .filter(|(_, (q, _))| train_queries.contains(q))
        .map(|(e, _)| e)
        .collect();

    Ok((
        bundle,
        TrainTask::Mapping {
            train_edges,
            val_queries: ds.record_indices(Split::Val),
            test_queries: ds.record_indices(Split::Test),
        },
    ))
}

/// Rating task: social intra-edges on modality 1, no intra-edges on
/// modality 2, full bipartite inter-edges (edge `u * n2 + j`). Train-split
/// ratings become soft targets in `[0, 1]`; validation and test ratings are
/// scored as MAE/RMSE after the affine decode.
pub fn prepare_rating_task(
    ds: &TaskDataset,
    build: &BuildConfig,
    bipartite_cap: usize,
) -> Result<(GraphBundle, TrainTask), TrainError> {
    let GroundTruth::Ratings { records, r_min, r_max } = &ds.truth else {
        return Err(TrainError::Config("rating task needs rating ground truth".into()));
    };
    let range = (*r_min, *r_max);
    let (feat1, feat2) = materialize(ds, build.seed);
    let (n1, n2) = (feat1.rows(), feat2.rows());
    let social = build_social_intra(&ds.social_pairs, n1)?;
    let inter = build_full_bipartite(n1, n2, bipartite_cap)?;

    let mut labels = vec![0.0; inter.len()];
    let mut train_edges = Vec::new();
    let mut val_edges = Vec::new();
    let mut val_truth = Vec::new();
    let mut test_edges = Vec::new();
    let mut test_truth = Vec::new();
    for (record, split) in records.iter().zip(&ds.splits) {
        let edge = record.user * n2 + record.item;
        match split {
            Split::Train => {
                labels[edge] = rating_to_target(record.rating, range)?;
                train_edges.push(edge);
            }
            Split::Val => {
                val_edges.push(edge);
                val_truth.push(record.rating);
            }
            Split::Test => {
                test_edges.push(edge);
                test_truth.push(record.rating);
            }
        }
    }

    let mut bundle = GraphBundle::new(feat1, feat2, &social.edges, &[], &inter)?;
    bundle.set_labels(labels)?;
    bundle.init_edge_attrs()?;

    Ok((
        bundle,
        TrainTask::Rating {
            train_edges,
            val_edges,
            val_truth,
            test_edges,
            test_truth,
            range,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::build::DistanceMetric;
    use crate::graph::EdgeRole;
    use crate::train::data::{gen_synthetic_task, split_dataset, RatingRecord};

    fn build_cfg(k1: usize, k2: usize, kk: usize) -> BuildConfig {
        BuildConfig {
            k_intra1: k1,
            k_intra2: k2,
            k_inter: kk,
            metric: DistanceMetric::Cosine,
            seed: 5,
        }
    }

    #[test]
    fn mapping_task_labels_true_pairs() {
        let mut task = gen_synthetic_task(12, 3, 4, 3, 0.05, 1).unwrap();
        split_dataset(&mut task.dataset, (0.5, 0.25, 0.25), 2).unwrap();
        let (bundle, train_task) = prepare_mapping_task(&task.dataset, &build_cfg(2, 2, 4)).unwrap();
        assert!(bundle.validate().is_empty());

        let labels = bundle.labels().unwrap();
        let list = bundle.edges(EdgeRole::Inter);
        let n1 = bundle.nodes().n1();
        let GroundTruth::Mapping(pairs) = &task.dataset.truth else { panic!() };
        for (e, (&s, &r)) in list.senders().iter().zip(list.receivers()).enumerate() {
            let expected = if pairs[s].1 == r - n1 { 1.0 } else { 0.0 };
            assert_eq!(labels[e], expected, "edge {e}");
        }
        let TrainTask::Mapping { train_edges, val_queries, test_queries } = train_task else {
            panic!()
        };
        assert_eq!(train_edges.len(), 6 * 4);
        assert_eq!(val_queries.len(), 3);
        assert_eq!(test_queries.len(), 3);
    }

    #[test]
    fn rating_task_builds_full_bipartite_with_soft_targets() {
        use crate::train::data::{Features, TaskDataset};
        let records = vec![
            RatingRecord { user: 0, item: 0, rating: 1.0 },
            RatingRecord { user: 0, item: 2, rating: 4.0 },
            RatingRecord { user: 1, item: 1, rating: 2.5 },
        ];
        let mut ds = TaskDataset {
            feat1: Features::UniformSpec { n: 2, dim: 4 },
            feat2: Features::UniformSpec { n: 3, dim: 4 },
            truth: GroundTruth::Ratings { records, r_min: 1.0, r_max: 4.0 },
            splits: vec![Split::Train; 3],
            confidence: None,
            social_pairs: vec![(0, 1)],
        };
        ds.splits = vec![Split::Train, Split::Test, Split::Train];
        let (bundle, task) = prepare_rating_task(&ds, &build_cfg(0, 0, 0), 100).unwrap();
        assert!(bundle.validate().is_empty());
        assert_eq!(bundle.edges(EdgeRole::Inter).len(), 6);
        assert_eq!(bundle.edges(EdgeRole::Intra1).len(), 1);
        assert!(bundle.edges(EdgeRole::Intra2).is_empty());

        let labels = bundle.labels().unwrap();
        assert_eq!(labels[0], 0.0); // (0,0) rating 1.0 -> target 0
        assert_eq!(labels[1 * 3 + 1], 0.5); // (1,1) rating 2.5 -> target 0.5
        let TrainTask::Rating { train_edges, test_edges, test_truth, .. } = task else {
            panic!()
        };
        assert_eq!(train_edges, vec![0, 4]);
        assert_eq!(test_edges, vec![2]);
        assert_eq!(test_truth, vec![4.0]);
    }
}
