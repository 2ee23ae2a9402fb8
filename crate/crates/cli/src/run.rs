//! Command implementations shared by the CLI entry point.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};

use rrnet_core::build::ingest::{read_feature_csv, read_pair_list};
use rrnet_core::graph::GraphBundle;
use rrnet_core::net::{load_checkpoint, save_checkpoint, ModelParams};
use rrnet_core::train::{
    evaluate, gen_synthetic_task, load_filmtrust, prepare_mapping_task, prepare_rating_task,
    split_dataset, train, Features, GroundTruth, MetricsReport, TaskDataset, TrainTask,
};

use crate::config::{user_error, RunConfig};

/// Everything a finished training run reports back.
pub struct RunOutcome {
    pub report: MetricsReport,
}

fn load_dataset(cfg: &RunConfig) -> Result<TaskDataset> {
    let seeds = cfg.stage_seeds()?;
    match cfg.task()? {
        "synthetic" => {
            let task = gen_synthetic_task(
                cfg.usize_value("synth.n")?,
                cfg.usize_value("synth.clusters")?,
                cfg.usize_value("synth.dim1")?,
                cfg.usize_value("synth.dim2")?,
                cfg.f64_value("synth.noise")?,
                seeds.dataset,
            )
            .map_err(|e| user_error(e.to_string()))?;
            Ok(task.dataset)
        }
        "filmtrust" => {
            let ratings = cfg.existing_path("data.ratings")?;
            let trust = cfg.existing_path("data.trust")?;
            let dim = cfg.usize_value("data.embed_dim")?;
            let (dataset, report) =
                load_filmtrust(&ratings, &trust, dim).map_err(|e| user_error(e.to_string()))?;
            eprintln!(
                "loaded {} users, {} items, {} ratings, {} trust pairs \
                 ({} malformed lines, {} duplicate ratings, {} trust records dropped)",
                report.users,
                report.items,
                report.ratings,
                report.trust_pairs,
                report.malformed_lines,
                report.duplicate_ratings,
                report.dropped_trust
            );
            Ok(dataset)
        }
        "features" => {
            let feat1 = read_feature_csv(&cfg.existing_path("data.features1")?)?;
            let feat2 = read_feature_csv(&cfg.existing_path("data.features2")?)?;
            let confidence = read_feature_csv(&cfg.existing_path("data.confidence")?)?;
            let pairs = read_pair_list(&cfg.existing_path("data.pairs")?)?;
            if confidence.shape() != (feat1.rows(), feat2.rows()) {
                bail!(user_error(format!(
                    "confidence matrix is {}x{}, expected {}x{}",
                    confidence.rows(),
                    confidence.cols(),
                    feat1.rows(),
                    feat2.rows()
                )));
            }
            let n1 = feat1.rows();
            Ok(TaskDataset {
                feat1: Features::Raw(feat1),
                feat2: Features::Raw(feat2),
                truth: GroundTruth::Mapping(pairs),
                splits: vec![rrnet_core::train::Split::Train; n1],
                confidence: Some(confidence),
                social_pairs: Vec::new(),
            })
        }
        other => bail!(user_error(format!(
            "unknown task {other:?}; expected synthetic, filmtrust, or features"
        ))),
    }
}

fn prepare(cfg: &RunConfig, dataset: &TaskDataset) -> Result<(GraphBundle, TrainTask, usize, usize)> {
    let build = cfg.build_config()?;
    let (d1, d2) = match (&dataset.feat1, &dataset.feat2) {
        (Features::Raw(a), Features::Raw(b)) => (a.cols(), b.cols()),
        _ => (cfg.usize_value("data.embed_dim")?, cfg.usize_value("data.embed_dim")?),
    };
    let (bundle, task) = match &dataset.truth {
        GroundTruth::Mapping(_) => prepare_mapping_task(dataset, &build),
        GroundTruth::Ratings { .. } => {
            let cap = cfg.usize_value("build.bipartite_cap")?;
            prepare_rating_task(dataset, &build, cap)
        }
    }
    .map_err(|e| user_error(e.to_string()))?;
    let violations = bundle.validate();
    if !violations.is_empty() {
        bail!("constructed bundle violates invariants: {}", violations[0]);
    }
    Ok((bundle, task, d1, d2))
}

fn write_metrics_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut csv = String::from("epoch,loss,metric_name,metric_value\n");
    let mut eval_iter = report.eval_history.iter().peekable();
    for (epoch, loss) in report.epoch_loss.iter().enumerate() {
        writeln!(csv, "{},{},,", epoch + 1, loss).expect("string write");
        while let Some(point) = eval_iter.peek() {
            if point.epoch != epoch + 1 {
                break;
            }
            let point = eval_iter.next().expect("peeked");
            writeln!(csv, "{},,{},{}", point.epoch, point.metric, point.value).expect("string write");
        }
    }
    for (name, value) in &report.final_metrics {
        writeln!(csv, "{},,{},{}", report.best_epoch, name, value).expect("string write");
    }
    std::fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<RunOutcome> {
    let seeds = cfg.stage_seeds()?;
    let out_dir = cfg.path_value("out")?;
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;

    let mut dataset = load_dataset(cfg)?;
    split_dataset(&mut dataset, cfg.fractions()?, seeds.split).map_err(|e| user_error(e.to_string()))?;
    let (bundle, task, d1, d2) = prepare(cfg, &dataset)?;
    let model_cfg = cfg.model_config(d1, d2)?;
    let train_cfg = cfg.train_config()?;
    let params = ModelParams::init(&model_cfg, seeds.params).map_err(|e| user_error(e.to_string()))?;

    let report = train(&bundle, &params, &model_cfg, &train_cfg, &task)?;

    std::fs::write(out_dir.join("manifest.cfg"), cfg.manifest())?;
    write_metrics_csv(&out_dir.join("metrics.csv"), &report)?;
    save_checkpoint(&out_dir.join("model.ckpt"), &params)?;

    println!(
        "trained {} epochs: loss {:.6} -> {:.6}, best epoch {}",
        report.epoch_loss.len(),
        report.epoch_loss.first().unwrap_or(&f64::NAN),
        report.epoch_loss.last().unwrap_or(&f64::NAN),
        report.best_epoch
    );
    for (name, value) in &report.final_metrics {
        println!("{name} = {value:.6}");
    }
    println!("outputs in {}", out_dir.display());
    Ok(RunOutcome { report })
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    if !checkpoint.exists() {
        bail!(user_error(format!("checkpoint not found: {}", checkpoint.display())));
    }
    let seeds = cfg.stage_seeds()?;
    let mut dataset = load_dataset(cfg)?;
    split_dataset(&mut dataset, cfg.fractions()?, seeds.split).map_err(|e| user_error(e.to_string()))?;
    let (bundle, task, d1, d2) = prepare(cfg, &dataset)?;
    let model_cfg = cfg.model_config(d1, d2)?;
    let params = ModelParams::init(&model_cfg, 0).map_err(|e| user_error(e.to_string()))?;
    load_checkpoint(checkpoint, &params).map_err(|e| user_error(e.to_string()))?;
    let metrics = evaluate(&bundle, &params, &model_cfg, &task)?;
    if metrics.is_empty() {
        println!("test split is empty; nothing to evaluate");
    }
    for (name, value) in metrics {
        println!("{name} = {value:.6}");
    }
    Ok(())
}

/// Verify analytic gradients against central finite differences on a small
/// synthetic bundle. Returns whether every parameter passed.
pub fn cmd_gradcheck(seed: u64, tolerance: f64) -> Result<bool> {
    use rrnet_core::build::{BuildConfig, DistanceMetric};
    use rrnet_core::net::{forward, loss, ModelConfig};
    use rrnet_core::tensor::{gradcheck, Reduction, Tape};

    let mut task = gen_synthetic_task(12, 4, 6, 5, 0.1, seed)
        .map_err(|e| user_error(e.to_string()))?;
    split_dataset(&mut task.dataset, (1.0, 0.0, 0.0), seed).map_err(|e| user_error(e.to_string()))?;
    let build = BuildConfig {
        k_intra1: 2,
        k_intra2: 2,
        k_inter: 2,
        metric: DistanceMetric::Cosine,
        seed,
    };
    let (bundle, _) = prepare_mapping_task(&task.dataset, &build).map_err(|e| user_error(e.to_string()))?;
    let model_cfg = ModelConfig {
        hidden: 8,
        n_intra_units: 1,
        n_inter_units: 1,
        encoder_hidden_layers: 1,
        raw_dim1: 6,
        raw_dim2: 5,
    };
    let params = ModelParams::init(&model_cfg, seed.wrapping_add(1)).map_err(|e| user_error(e.to_string()))?;
    let named = params.named();
    let report = gradcheck(
        &named,
        || {
            let tape = Tape::new();
            let p = forward(&tape, &bundle, &params, &model_cfg)
                .map_err(|e| rrnet_core::tensor::TensorError::Contract(e.to_string()))?;
            let l = loss(&tape, &p, &bundle, Reduction::Sum)
                .map_err(|e| rrnet_core::tensor::TensorError::Contract(e.to_string()))?;
            Ok((tape, l))
        },
        tolerance,
        1e-5,
    )?;
    let mut worst = report.entries.clone();
    worst.sort_by(|a, b| b.max_rel_err.partial_cmp(&a.max_rel_err).unwrap());
    for entry in worst.iter().take(3) {
        println!(
            "{}: max rel err {:.3e} (analytic {:.6e}, numeric {:.6e})",
            entry.name, entry.max_rel_err, entry.analytic, entry.numeric
        );
    }
    println!(
        "gradcheck over {} parameters: max rel err {:.3e} (tolerance {:.1e}): {}",
        report.entries.len(),
        report.max_rel_err(),
        tolerance,
        if report.passed() { "PASS" } else { "FAIL" }
    );
    Ok(report.passed())
}

pub fn cmd_sweep(cfg: &RunConfig, jobs: usize) -> Result<()> {
    let axes = cfg.sweep_axes().to_vec();
    if axes.is_empty() {
        bail!(user_error("sweep needs at least one sweep.<key>=v1,v2,... axis"));
    }
    let out_dir = cfg.path_value("out")?;
    std::fs::create_dir_all(&out_dir)?;

    // Cross product of axis values.
    let mut cells: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (axis, values) in &axes {
        let mut next = Vec::with_capacity(cells.len() * values.len());
        for cell in &cells {
            for value in values {
                let mut extended = cell.clone();
                extended.push((axis.clone(), value.clone()));
                next.push(extended);
            }
        }
        cells = next;
    }

    struct Cell {
        index: usize,
        assignment: Vec<(String, String)>,
        config: RunConfig,
    }
    let mut prepared = Vec::with_capacity(cells.len());
    for (index, assignment) in cells.into_iter().enumerate() {
        let mut cell_cfg = cfg.clone();
        let mut label = format!("cell{index:03}");
        for (axis, value) in &assignment {
            cell_cfg.set(axis, value)?;
            label.push('_');
            label.push_str(&axis.replace('.', "-"));
            label.push('-');
            label.push_str(value);
        }
        cell_cfg.set("out", &out_dir.join(&label).display().to_string())?;
        prepared.push(Cell { index, assignment, config: cell_cfg });
    }

    let jobs = jobs.max(1);
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<std::sync::Mutex<Option<Result<RunOutcome>>>> =
        (0..prepared.len()).map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(prepared.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                let Some(cell) = prepared.get(i) else { break };
                let outcome = cmd_train(&cell.config);
                *results[i].lock().expect("poisoned") = Some(outcome);
            });
        }
    });

    let mut rows = Vec::with_capacity(prepared.len());
    for (cell, slot) in prepared.iter().zip(&results) {
        let outcome = slot
            .lock()
            .expect("poisoned")
            .take()
            .expect("every cell ran")
            .with_context(|| format!("sweep cell {}", cell.index))?;
        rows.push((cell.index, cell.assignment.clone(), outcome.report));
    }

    let metric_names: Vec<String> = rows
        .first()
        .map(|(_, _, r)| r.final_metrics.iter().map(|(n, _)| n.clone()).collect())
        .unwrap_or_default();
    let mut csv = String::from("cell");
    for (axis, _) in &axes {
        write!(csv, ",{axis}").expect("string write");
    }
    csv.push_str(",best_epoch,final_loss");
    for name in &metric_names {
        write!(csv, ",{name}").expect("string write");
    }
    csv.push('\n');
    for (index, assignment, report) in &rows {
        write!(csv, "{index}").expect("string write");
        for (_, value) in assignment {
            write!(csv, ",{value}").expect("string write");
        }
        write!(csv, ",{},{}", report.best_epoch, report.epoch_loss.last().unwrap_or(&f64::NAN))
            .expect("string write");
        for name in &metric_names {
            match report.final_metric(name) {
                Some(v) => write!(csv, ",{v}").expect("string write"),
                None => csv.push(','),
            }
        }
        csv.push('\n');
    }
    let csv_path = out_dir.join("sweep.csv");
    std::fs::write(&csv_path, csv)?;
    println!("swept {} cells; results in {}", rows.len(), csv_path.display());
    Ok(())
}

/// Generate a synthetic dataset and write it in the feature-file formats the
/// `features` task ingests, plus a ready-to-run config.
pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let seeds = cfg.stage_seeds()?;
    let out_dir = cfg.path_value("out")?;
    std::fs::create_dir_all(&out_dir)?;
    let task = gen_synthetic_task(
        cfg.usize_value("synth.n")?,
        cfg.usize_value("synth.clusters")?,
        cfg.usize_value("synth.dim1")?,
        cfg.usize_value("synth.dim2")?,
        cfg.f64_value("synth.noise")?,
        seeds.dataset,
    )
    .map_err(|e| user_error(e.to_string()))?;

    let write_csv = |name: &str, t: &rrnet_core::Tensor| -> Result<()> {
        let mut text = String::new();
        let v = t.to_vec();
        for row in 0..t.rows() {
            let cells: Vec<String> = (0..t.cols()).map(|c| v[row * t.cols() + c].to_string()).collect();
            writeln!(text, "{}", cells.join(",")).expect("string write");
        }
        std::fs::write(out_dir.join(name), text)?;
        Ok(())
    };
    let Features::Raw(feat1) = &task.dataset.feat1 else { unreachable!("synthetic features are raw") };
    let Features::Raw(feat2) = &task.dataset.feat2 else { unreachable!("synthetic features are raw") };
    write_csv("features1.csv", feat1)?;
    write_csv("features2.csv", feat2)?;
    write_csv("confidence.csv", task.dataset.confidence.as_ref().expect("synthetic confidence"))?;

    let GroundTruth::Mapping(pairs) = &task.dataset.truth else { unreachable!("synthetic truth is a mapping") };
    let mut pair_text = String::from("# query partner\n");
    for (q, p) in pairs {
        writeln!(pair_text, "{q} {p}").expect("string write");
    }
    std::fs::write(out_dir.join("pairs.txt"), pair_text)?;

    let mut run_cfg = String::new();
    writeln!(run_cfg, "task=features").expect("string write");
    for name in ["features1.csv", "features2.csv", "confidence.csv"] {
        let key = format!("data.{}", name.trim_end_matches(".csv"));
        writeln!(run_cfg, "{key}={}", out_dir.join(name).display()).expect("string write");
    }
    writeln!(run_cfg, "data.pairs={}", out_dir.join("pairs.txt").display()).expect("string write");
    std::fs::write(out_dir.join("task.cfg"), run_cfg)?;

    println!(
        "wrote synthetic dataset ({} instances per modality, {} clusters) to {}",
        cfg.usize_value("synth.n")?,
        cfg.usize_value("synth.clusters")?,
        out_dir.display()
    );
    Ok(())
}
