//! Datasets: the FilmTrust-format loader, split assignment, and the
//! synthetic cross-modality task generator.

use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::TrainError;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Per-modality features: concrete vectors, or a spec for seeded uniform
/// embeddings materialized at graph-build time.
#[derive(Clone)]
pub enum Features {
    Raw(Tensor),
    UniformSpec { n: usize, dim: usize },
}

impl Features {
    pub fn n(&self) -> usize {
        match self {
            Features::Raw(t) => t.rows(),
            Features::UniformSpec { n, .. } => *n,
        }
    }

    pub fn materialize(&self, seed: u64) -> Tensor {
        match self {
            Features::Raw(t) => t.clone(),
            Features::UniformSpec { n, dim } => crate::build::init_uniform_embeddings(*n, *dim, seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatingRecord {
    pub user: usize,
    pub item: usize,
    pub rating: f64,
}

/// Ground truth: cross-modality mapping pairs, or rating triples with their
/// declared range.
#[derive(Clone)]
pub enum GroundTruth {
    /// `(modality-1 instance, its modality-2 partner)`, one per query.
    Mapping(Vec<(usize, usize)>),
    Ratings {
        records: Vec<RatingRecord>,
        r_min: f64,
        r_max: f64,
    },
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        match self {
            GroundTruth::Mapping(pairs) => pairs.len(),
            GroundTruth::Ratings { records, .. } => records.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A task instance: per-modality features (or embedding specs), ground
/// truth, per-record split assignment, and the task-side graph ingredients.
pub struct TaskDataset {
    pub feat1: Features,
    pub feat2: Features,
    pub truth: GroundTruth,
    /// One entry per ground-truth record; starts all-train until
    /// [`split_dataset`] assigns.
    pub splits: Vec<Split>,
    /// Initial mapping confidence (`n1 x n2`) for top-K inter-edge building.
    pub confidence: Option<Tensor>,
    /// Within-modality-1 relation pairs (social links).
    pub social_pairs: Vec<(usize, usize)>,
}

impl TaskDataset {
    pub fn record_indices(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == split)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Counts reported by the FilmTrust loader.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub users: usize,
    pub items: usize,
    pub ratings: usize,
    pub trust_pairs: usize,
    pub malformed_lines: usize,
    pub duplicate_ratings: usize,
    pub dropped_trust: usize,
}

/// Load "user item rating" and "user user [weight]" files. User and item ids
/// re-index to contiguous ranges (sorted by original id); duplicate `(u, i)`
/// ratings keep the last occurrence; malformed lines are counted and
/// skipped. Trust pairs referencing unknown users, self-pairs and duplicates
/// are dropped and counted.
pub fn load_filmtrust(
    ratings_path: &Path,
    trust_path: &Path,
    embed_dim: usize,
) -> Result<(TaskDataset, LoadReport), TrainError> {
    let mut report = LoadReport::default();

    let open = |path: &Path| -> Result<std::io::BufReader<std::fs::File>, TrainError> {
        let f = std::fs::File::open(path)
            .map_err(|e| TrainError::Data(format!("{}: {e}", path.display())))?;
        Ok(std::io::BufReader::new(f))
    };

    // Pass 1: raw triples in file order.
    let mut raw: Vec<(u64, u64, f64)> = Vec::new();
    for line in open(ratings_path)?.lines() {
        let line = line.map_err(TrainError::Io)?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let mut fields = t.split_whitespace();
        let parsed = (|| {
            let u: u64 = fields.next()?.parse().ok()?;
            let i: u64 = fields.next()?.parse().ok()?;
            let r: f64 = fields.next()?.parse().ok()?;
            Some((u, i, r))
        })();
        match parsed {
            Some(rec) => raw.push(rec),
            None => report.malformed_lines += 1,
        }
    }
    if raw.is_empty() {
        return Err(TrainError::Data(format!(
            "{}: no valid rating records",
            ratings_path.display()
        )));
    }

    // Contiguous re-indexing, sorted by original id for determinism.
    let mut user_ids: Vec<u64> = raw.iter().map(|r| r.0).collect();
    user_ids.sort_unstable();
    user_ids.dedup();
    let mut item_ids: Vec<u64> = raw.iter().map(|r| r.1).collect();
    item_ids.sort_unstable();
    item_ids.dedup();
    let user_index: std::collections::BTreeMap<u64, usize> =
        user_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let item_index: std::collections::BTreeMap<u64, usize> =
        item_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();

    // Keep-last for duplicate (user, item) pairs, then restore first-seen order.
    let mut last: std::collections::HashMap<(usize, usize), (usize, f64)> = std::collections::HashMap::new();
    for (pos, (u, i, r)) in raw.iter().enumerate() {
        let key = (user_index[u], item_index[i]);
        if last.insert(key, (pos, *r)).is_some() {
            report.duplicate_ratings += 1;
        }
    }
    let mut kept: Vec<(usize, (usize, usize), f64)> = last
        .into_iter()
        .map(|((u, i), (pos, r))| (pos, (u, i), r))
        .collect();
    kept.sort_unstable_by_key(|&(pos, _, _)| pos);
    let records: Vec<RatingRecord> = kept
        .into_iter()
        .map(|(_, (user, item), rating)| RatingRecord { user, item, rating })
        .collect();

    let r_min = records.iter().map(|r| r.rating).fold(f64::INFINITY, f64::min);
    let r_max = records.iter().map(|r| r.rating).fold(f64::NEG_INFINITY, f64::max);
    if !(r_min.is_finite() && r_max.is_finite()) || r_min >= r_max {
        return Err(TrainError::Data(format!(
            "{}: degenerate rating range [{r_min}, {r_max}]",
            ratings_path.display()
        )));
    }

    // Trust pairs over known users only.
    let mut seen = std::collections::HashSet::new();
    let mut social_pairs = Vec::new();
    for line in open(trust_path)?.lines() {
        let line = line.map_err(TrainError::Io)?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let mut fields = t.split_whitespace();
        let parsed = (|| {
            let u: u64 = fields.next()?.parse().ok()?;
            let v: u64 = fields.next()?.parse().ok()?;
            Some((u, v))
        })();
        let Some((u, v)) = parsed else {
            report.malformed_lines += 1;
            continue;
        };
        match (user_index.get(&u), user_index.get(&v)) {
            (Some(&a), Some(&b)) if a != b && seen.insert((a, b)) => social_pairs.push((a, b)),
            _ => report.dropped_trust += 1,
        }
    }

    report.users = user_ids.len();
    report.items = item_ids.len();
    report.ratings = records.len();
    report.trust_pairs = social_pairs.len();

    let n_records = records.len();
    Ok((
        TaskDataset {
            feat1: Features::UniformSpec { n: report.users, dim: embed_dim },
            feat2: Features::UniformSpec { n: report.items, dim: embed_dim },
            truth: GroundTruth::Ratings { records, r_min, r_max },
            splits: vec![Split::Train; n_records],
            confidence: None,
            social_pairs,
        },
        report,
    ))
}

/// Seeded random split assignment per ground-truth record. Records are
/// shuffled and partitioned at boundaries rounded from the cumulative
/// fractions, so split sizes land within one of the fractional targets.
pub fn split_dataset(dataset: &mut TaskDataset, fractions: (f64, f64, f64), seed: u64) -> Result<(), TrainError> {
    let (a, b, c) = fractions;
    if !(a >= 0.0 && b >= 0.0 && c >= 0.0) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(TrainError::Config(format!(
            "split fractions ({a}, {b}, {c}) must be non-negative and sum to 1"
        )));
    }
    let n = dataset.truth.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let train_end = (a * n as f64).round() as usize;
    let val_end = ((a + b) * n as f64).round() as usize;
    let mut splits = vec![Split::Train; n];
    for (pos, &record) in order.iter().enumerate() {
        splits[record] = if pos < train_end {
            Split::Train
        } else if pos < val_end.min(n) {
            Split::Val
        } else {
            Split::Test
        };
    }
    dataset.splits = splits;
    Ok(())
}

/// A generated cross-modality task plus the latent-side information needed
/// by oracle baselines (nearest centroid) and diagnostics.
pub struct SyntheticTask {
    pub dataset: TaskDataset,
    /// Per-instance latent points, one row per instance, per modality.
    pub latents1: Vec<Vec<f64>>,
    pub latents2: Vec<Vec<f64>>,
    pub centers: Vec<Vec<f64>>,
    pub cluster1: Vec<usize>,
    pub cluster2: Vec<usize>,
    /// Modality-2 prototype instance per cluster.
    pub prototypes: Vec<usize>,
}

const LATENT_DIM: usize = 8;

/// Confidence handicap for non-prototype candidates: the stand-in baseline
/// proposes cluster representatives first, the way a classifier scores
/// classes rather than arbitrary instances.
const NON_PROTOTYPE_PENALTY: f64 = 1e6;

/// Draw shared cluster centers, emit per-modality features through two fixed
/// random linear maps plus noise, and pair every modality-1 instance with its
/// cluster's modality-2 prototype. The prototype of cluster `c` is the
/// modality-2 instance sitting exactly on the cluster center (its noise draw
/// is zero); the confidence matrix ranks prototypes by negative squared
/// latent distance ahead of all non-prototypes, so top-K candidate sets span
/// clusters and always contain the true partner once `K >= 1`.
pub fn gen_synthetic_task(
    n_per_modality: usize,
    clusters: usize,
    dim1: usize,
    dim2: usize,
    noise: f64,
    seed: u64,
) -> Result<SyntheticTask, TrainError> {
    if clusters == 0 || clusters > n_per_modality {
        return Err(TrainError::Config(format!(
            "clusters = {clusters} must lie in 1..={n_per_modality}"
        )));
    }
    if dim1 == 0 || dim2 == 0 {
        return Err(TrainError::Config("feature dims must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |scale: f64| -> f64 {
        let v: f64 = rng.sample(StandardNormal);
        v * scale
    };

    let centers: Vec<Vec<f64>> = (0..clusters)
        .map(|_| (0..LATENT_DIM).map(|_| normal(1.0)).collect())
        .collect();
    let map1: Vec<f64> = (0..LATENT_DIM * dim1)
        .map(|_| normal(1.0 / (LATENT_DIM as f64).sqrt()))
        .collect();
    let map2: Vec<f64> = (0..LATENT_DIM * dim2)
        .map(|_| normal(1.0 / (LATENT_DIM as f64).sqrt()))
        .collect();

    let n = n_per_modality;
    let cluster_of = |t: usize| t % clusters;
    // Instance c is cluster c's prototype: the first modality-2 member,
    // pinned to the exact center.
    let prototypes: Vec<usize> = (0..clusters).collect();
    let latents1: Vec<Vec<f64>> = (0..n)
        .map(|t| centers[cluster_of(t)].iter().map(|&c| c + normal(noise)).collect())
        .collect();
    let latents2: Vec<Vec<f64>> = (0..n)
        .map(|t| {
            if t < clusters {
                centers[t].clone()
            } else {
                centers[cluster_of(t)].iter().map(|&c| c + normal(noise)).collect()
            }
        })
        .collect();

    let project = |points: &[Vec<f64>], map: &[f64], dim: usize| -> Tensor {
        let mut data = Vec::with_capacity(points.len() * dim);
        for p in points {
            for j in 0..dim {
                let mut acc = 0.0;
                for (t, &v) in p.iter().enumerate() {
                    acc += v * map[t * dim + j];
                }
                data.push(acc);
            }
        }
        Tensor::new(points.len(), dim, data, false).expect("sized")
    };
    let feat1 = project(&latents1, &map1, dim1);
    let feat2 = project(&latents2, &map2, dim2);

    let cluster1: Vec<usize> = (0..n).map(cluster_of).collect();
    let cluster2: Vec<usize> = (0..n).map(cluster_of).collect();
    let pairs: Vec<(usize, usize)> = (0..n).map(|i| (i, prototypes[cluster1[i]])).collect();

    let mut confidence = Vec::with_capacity(n * n);
    for li in &latents1 {
        for (j, lj) in latents2.iter().enumerate() {
            let d2: f64 = li.iter().zip(lj).map(|(a, b)| (a - b) * (a - b)).sum();
            let penalty = if j < clusters { 0.0 } else { NON_PROTOTYPE_PENALTY };
            confidence.push(-d2 - penalty);
        }
    }

    Ok(SyntheticTask {
        dataset: TaskDataset {
            feat1: Features::Raw(feat1),
            feat2: Features::Raw(feat2),
            truth: GroundTruth::Mapping(pairs),
            splits: vec![Split::Train; n],
            confidence: Some(Tensor::new(n, n, confidence, false).expect("sized")),
            social_pairs: Vec::new(),
        },
        latents1,
        latents2,
        centers,
        cluster1,
        cluster2,
        prototypes,
    })
}

/// Nearest-centroid baseline in latent space: assign each modality-1
/// instance to the closest center's prototype and score against the truth.
pub fn nearest_centroid_accuracy(task: &SyntheticTask) -> f64 {
    let GroundTruth::Mapping(pairs) = &task.dataset.truth else {
        return 0.0;
    };
    let mut correct = 0usize;
    for (i, latent) in task.latents1.iter().enumerate() {
        let mut best = (f64::INFINITY, 0usize);
        for (c, center) in task.centers.iter().enumerate() {
            let d2: f64 = latent.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < best.0 {
                best = (d2, c);
            }
        }
        if task.prototypes[best.1] == pairs[i].1 {
            correct += 1;
        }
    }
    correct as f64 / pairs.len() as f64
}
