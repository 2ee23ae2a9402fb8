//! Full-batch training loop, evaluation, and task preparation.

pub mod data;
pub mod metrics;
pub mod pipeline;

pub use data::{
    gen_synthetic_task, load_filmtrust, nearest_centroid_accuracy, split_dataset, Features,
    GroundTruth, LoadReport, RatingRecord, Split, SyntheticTask, TaskDataset,
};
pub use metrics::{eval_mae_rmse, eval_mapping_accuracy, rating_from_probability, rating_to_target};
pub use pipeline::{prepare_mapping_task, prepare_rating_task};

use std::rc::Rc;
use std::time::Instant;

use thiserror::Error;

use crate::graph::{EdgeRole, GraphBundle, GraphError};
use crate::net::{decode_rows, forward_latents, ModelConfig, ModelError, ModelParams};
use crate::tensor::{Reduction, SgdConfig, SgdOptimizer, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("{0}")]
    Contract(String),
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Build(#[from] crate::build::BuildError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Validation cadence in epochs.
    pub eval_every: usize,
    pub loss_reduction: Reduction,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(TrainError::Config("eval_every must be at least 1".into()));
        }
        SgdConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
        .validate()
        .map_err(|e| TrainError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalPoint {
    pub epoch: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default)]
pub struct MetricsReport {
    /// Training loss per epoch, pre-step.
    pub epoch_loss: Vec<f64>,
    /// Validation metrics at their evaluation epochs.
    pub eval_history: Vec<EvalPoint>,
    /// Test metrics of the restored best-validation parameters.
    pub final_metrics: Vec<(String, f64)>,
    /// Epoch whose parameters were kept (1-based; equals `epochs` when no
    /// validation data exists).
    pub best_epoch: usize,
    pub wall_secs: f64,
}

impl MetricsReport {
    pub fn final_metric(&self, name: &str) -> Option<f64> {
        self.final_metrics.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }
}

/// What to optimize and how to score it.
pub enum TrainTask {
    Mapping {
        /// Inter-edge ids labeled for the loss (all candidate edges of
        /// training queries).
        train_edges: Vec<usize>,
        /// Modality-1 node ids evaluated per split.
        val_queries: Vec<usize>,
        test_queries: Vec<usize>,
    },
    Rating {
        train_edges: Vec<usize>,
        val_edges: Vec<usize>,
        val_truth: Vec<f64>,
        test_edges: Vec<usize>,
        test_truth: Vec<f64>,
        range: (f64, f64),
    },
}

/// Candidate-edge groups of a query set, flattened for one decode call.
struct QueryEval {
    flat: Rc<Vec<usize>>,
    ranges: Vec<(usize, usize)>,
}

impl QueryEval {
    fn build(bundle: &GraphBundle, queries: &[usize]) -> Self {
        let list = bundle.edges(EdgeRole::Inter);
        let mut by_sender: std::collections::HashMap<usize, Vec<usize>> = std::collections::HashMap::new();
        for (e, &s) in list.senders().iter().enumerate() {
            by_sender.entry(s).or_default().push(e);
        }
        let mut flat = Vec::new();
        let mut ranges = Vec::with_capacity(queries.len());
        for q in queries {
            let edges = by_sender.get(q).map(Vec::as_slice).unwrap_or(&[]);
            ranges.push((flat.len(), edges.len()));
            flat.extend_from_slice(edges);
        }
        QueryEval { flat: Rc::new(flat), ranges }
    }

    /// Accuracy of per-group argmax against label-1 edges. Probabilities are
    /// indexed by flat position.
    fn accuracy(&self, p: &[f64], labels: &[f64]) -> f64 {
        if self.ranges.is_empty() {
            return 0.0;
        }
        let mut correct = 0usize;
        for &(start, len) in &self.ranges {
            let mut best: Option<(f64, usize)> = None;
            for pos in start..start + len {
                if best.is_none() || p[pos] > best.unwrap().0 {
                    best = Some((p[pos], pos));
                }
            }
            if let Some((_, pos)) = best {
                if labels[self.flat[pos]] == 1.0 {
                    correct += 1;
                }
            }
        }
        correct as f64 / self.ranges.len() as f64
    }
}

/// Full-batch gradient descent: one forward / loss / backward / step cycle
/// per epoch, validation every `eval_every` epochs, best-validation
/// parameters restored at the end before computing test metrics.
/// Deterministic given its inputs (no randomness inside the loop).
pub fn train(
    bundle: &GraphBundle,
    params: &ModelParams,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    task: &TrainTask,
) -> Result<MetricsReport, TrainError> {
    cfg.validate()?;
    let started = Instant::now();
    let labels = bundle
        .labels()
        .ok_or_else(|| TrainError::Contract("bundle carries no labels on its inter-edges".into()))?
        .to_vec();

    let train_edges = match task {
        TrainTask::Mapping { train_edges, .. } | TrainTask::Rating { train_edges, .. } => train_edges,
    };
    if train_edges.is_empty() {
        return Err(TrainError::Contract("no labeled training edges".into()));
    }
    let train_rc = Rc::new(train_edges.clone());
    let y_train = Tensor::new(
        train_edges.len(),
        1,
        train_edges.iter().map(|&e| labels[e]).collect(),
        false,
    )?;

    // Validation probes.
    enum Probe {
        Mapping { eval: QueryEval },
        Rating { edges: Rc<Vec<usize>>, truth: Vec<f64>, range: (f64, f64) },
    }
    let val_probe = match task {
        TrainTask::Mapping { val_queries, .. } => Probe::Mapping {
            eval: QueryEval::build(bundle, val_queries),
        },
        TrainTask::Rating { val_edges, val_truth, range, .. } => Probe::Rating {
            edges: Rc::new(val_edges.clone()),
            truth: val_truth.clone(),
            range: *range,
        },
    };
    let has_val = match &val_probe {
        Probe::Mapping { eval } => !eval.ranges.is_empty(),
        Probe::Rating { edges, .. } => !edges.is_empty(),
    };

    let param_handles = params.values();
    let param_refs: Vec<&Tensor> = param_handles.iter().collect();
    let mut optimizer = SgdOptimizer::new(SgdConfig {
        learning_rate: cfg.learning_rate,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    })
    .map_err(TrainError::Tensor)?;

    let mut report = MetricsReport::default();
    // Higher is better for accuracy, lower for MAE; normalize to "higher".
    let mut best: Option<(f64, usize, Vec<Vec<f64>>)> = None;

    for epoch in 0..cfg.epochs {
        let tape = Tape::new();
        let state = forward_latents(&tape, bundle, params, model_cfg)?;
        let p_train = decode_rows(&tape, &state.inter, Rc::clone(&train_rc), &params.decoder)?;
        let loss = tape.bce_loss_with(&p_train, &y_train, cfg.loss_reduction)?;
        let loss_value = loss.item();
        if !loss_value.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch });
        }
        report.epoch_loss.push(loss_value);

        if has_val && ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs) {
            let score = match &val_probe {
                Probe::Mapping { eval } => {
                    let p = decode_rows(&tape, &state.inter, Rc::clone(&eval.flat), &params.decoder)?;
                    let acc = eval.accuracy(&p.value(), &labels);
                    report.eval_history.push(EvalPoint {
                        epoch: epoch + 1,
                        metric: "val_accuracy".into(),
                        value: acc,
                    });
                    acc
                }
                Probe::Rating { edges, truth, range } => {
                    let p = decode_rows(&tape, &state.inter, Rc::clone(edges), &params.decoder)?;
                    let predicted: Vec<f64> = p
                        .value()
                        .iter()
                        .map(|&v| rating_from_probability(v, *range))
                        .collect::<Result<_, _>>()?;
                    let (mae, rmse) = eval_mae_rmse(&predicted, truth)?;
                    report.eval_history.push(EvalPoint {
                        epoch: epoch + 1,
                        metric: "val_mae".into(),
                        value: mae,
                    });
                    report.eval_history.push(EvalPoint {
                        epoch: epoch + 1,
                        metric: "val_rmse".into(),
                        value: rmse,
                    });
                    -mae
                }
            };
            // Ties keep the later epoch: validation scores plateau early on
            // small splits while the fit keeps sharpening.
            if best.as_ref().is_none_or(|(b, _, _)| score >= *b) {
                best = Some((score, epoch + 1, params.snapshot()));
            }
        }

        params.zero_grads();
        tape.backward(&loss)?;
        optimizer.step(&param_refs).map_err(TrainError::Tensor)?;
    }

    report.best_epoch = match best {
        Some((_, epoch, snapshot)) => {
            params.restore(&snapshot);
            epoch
        }
        None => cfg.epochs,
    };

    // Test metrics with the kept parameters.
    let tape = Tape::new();
    let state = forward_latents(&tape, bundle, params, model_cfg)?;
    match task {
        TrainTask::Mapping { test_queries, .. } => {
            let eval = QueryEval::build(bundle, test_queries);
            if !eval.ranges.is_empty() {
                let p = decode_rows(&tape, &state.inter, Rc::clone(&eval.flat), &params.decoder)?;
                let acc = eval.accuracy(&p.value(), &labels);
                report.final_metrics.push(("test_accuracy".into(), acc));
            }
        }
        TrainTask::Rating { test_edges, test_truth, range, .. } => {
            if !test_edges.is_empty() {
                let p = decode_rows(&tape, &state.inter, Rc::new(test_edges.clone()), &params.decoder)?;
                let predicted: Vec<f64> = p
                    .value()
                    .iter()
                    .map(|&v| rating_from_probability(v, *range))
                    .collect::<Result<_, _>>()?;
                let (mae, rmse) = eval_mae_rmse(&predicted, test_truth)?;
                report.final_metrics.push(("test_mae".into(), mae));
                report.final_metrics.push(("test_rmse".into(), rmse));
            }
        }
    }
    report.wall_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Evaluate an already-trained model on the task's test split without
/// touching the parameters.
pub fn evaluate(
    bundle: &GraphBundle,
    params: &ModelParams,
    model_cfg: &ModelConfig,
    task: &TrainTask,
) -> Result<Vec<(String, f64)>, TrainError> {
    let labels = bundle
        .labels()
        .ok_or_else(|| TrainError::Contract("bundle carries no labels on its inter-edges".into()))?;
    let tape = Tape::new();
    let state = forward_latents(&tape, bundle, params, model_cfg)?;
    let mut out = Vec::new();
    match task {
        TrainTask::Mapping { test_queries, .. } => {
            let eval = QueryEval::build(bundle, test_queries);
            if !eval.ranges.is_empty() {
                let p = decode_rows(&tape, &state.inter, Rc::clone(&eval.flat), &params.decoder)?;
                out.push(("test_accuracy".into(), eval.accuracy(&p.value(), labels)));
            }
        }
        TrainTask::Rating { test_edges, test_truth, range, .. } => {
            if !test_edges.is_empty() {
                let p = decode_rows(&tape, &state.inter, Rc::new(test_edges.clone()), &params.decoder)?;
                let predicted: Vec<f64> = p
                    .value()
                    .iter()
                    .map(|&v| rating_from_probability(v, *range))
                    .collect::<Result<_, _>>()?;
                let (mae, rmse) = eval_mae_rmse(&predicted, test_truth)?;
                out.push(("test_mae".into(), mae));
                out.push(("test_rmse".into(), rmse));
            }
        }
    }
    Ok(out)
}
