//! Experiment execution: dataset materialization from a config, single
//! end-to-end runs with report emission, hyper-parameter sweeps, and
//! policy comparisons.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;

use crate::config::{DataSpec, ExperimentConfig, SweepSpec};
use crate::data::{
    self, make_shifted_domain, make_synthetic_2d, make_synthetic_digits, replicate_channels,
    ImageDataset, ShiftSpec,
};
use crate::error::{Error, Result};
use crate::idann::{final_train_cnn, run_idann, Diagnostics, IdannRun};
use crate::model::{build_model_with_input, load_checkpoint, save_checkpoint, DannModel};
use crate::rng::substream;
use crate::selection::PolicyTag;
use crate::trainer::{
    evaluate_accuracy, train_classifier, LabeledDataset, LabeledSample, Provenance,
    UnlabeledDataset, UnlabeledSample,
};

/// Target sample ids start here so they never collide with source ids.
pub const TARGET_ID_BASE: u64 = 1_000_000;

/// Materialized experiment data. Ground truth for the unlabeled target
/// exists only for evaluation; training never sees it.
pub struct PreparedData {
    pub source: LabeledDataset,
    pub target_train: UnlabeledDataset,
    pub target_truth: Option<HashMap<u64, usize>>,
    pub target_test: Option<LabeledDataset>,
    pub input_shape: Vec<usize>,
    pub num_labels: usize,
}

fn to_labeled(ds: &ImageDataset, id_base: u64) -> Result<LabeledDataset> {
    let labels = ds
        .labels
        .as_ref()
        .ok_or_else(|| Error::Precondition(format!("dataset {} has no labels", ds.name)))?;
    let samples = ds
        .images
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (img, &y))| LabeledSample {
            id: id_base + i as u64,
            x: img.clone(),
            y,
            provenance: Provenance::Source,
        })
        .collect();
    LabeledDataset::new(samples, ds.num_labels)
}

fn to_unlabeled(ds: &ImageDataset, id_base: u64) -> UnlabeledDataset {
    UnlabeledDataset {
        samples: ds
            .images
            .iter()
            .enumerate()
            .map(|(i, img)| UnlabeledSample {
                id: id_base + i as u64,
                x: img.clone(),
            })
            .collect(),
    }
}

/// Split off the first `n_test` samples of a seeded shuffle as the test set.
fn split_test(ds: &ImageDataset, n_test: usize, seed: u64) -> Result<(ImageDataset, ImageDataset)> {
    if n_test >= ds.len() {
        return Err(Error::Precondition(format!(
            "test split of {n_test} leaves no training data (dataset has {})",
            ds.len()
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut substream(seed, "test-split"));
    let pick = |ids: &[usize]| ImageDataset {
        images: ids.iter().map(|&i| ds.images[i].clone()).collect(),
        labels: ds
            .labels
            .as_ref()
            .map(|l| ids.iter().map(|&i| l[i]).collect()),
        ..ds.clone()
    };
    let (test_ids, train_ids) = order.split_at(n_test);
    let mut test_ids = test_ids.to_vec();
    let mut train_ids = train_ids.to_vec();
    test_ids.sort_unstable();
    train_ids.sort_unstable();
    Ok((pick(&train_ids), pick(&test_ids)))
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let mut seeds = substream(cfg.seed, "data");
    let (s_seed, t_seed, split_seed, shift_seed): (u64, u64, u64, u64) =
        (seeds.gen(), seeds.gen(), seeds.gen(), seeds.gen());

    let (source_raw, target_raw, test_count) = match &cfg.data {
        DataSpec::SyntheticDigits { source_count, target_count, test_count, shift } => {
            let source = make_synthetic_digits(*source_count, s_seed, "digits-source", "train");
            let clean =
                make_synthetic_digits(target_count + test_count, t_seed, "digits-target", "train");
            let shifted =
                make_shifted_domain(&clean, &ShiftSpec { kind: shift.clone(), seed: shift_seed })?;
            // The colorize stage widens the target to 3 channels; the
            // source must match for a shared feature extractor.
            let source = if shifted.shape.last() == Some(&3) {
                replicate_channels(&source, 3)?
            } else {
                source
            };
            (source, shifted, *test_count)
        }
        DataSpec::Idx { source_images, source_labels, target_images, target_labels, test_count } => {
            let source = data::load_idx(source_images, source_labels)?;
            let target = data::load_idx(target_images, target_labels)?;
            if source.shape != target.shape {
                return Err(Error::Precondition(format!(
                    "source shape {:?} != target shape {:?}",
                    source.shape, target.shape
                )));
            }
            (source, target, *test_count)
        }
        DataSpec::Synthetic2d { kind, n_per_class, rotation_deg, translation, test_count } => {
            let (source, target) =
                make_synthetic_2d(*kind, *n_per_class, *rotation_deg, *translation, t_seed)?;
            (source, target, *test_count)
        }
    };

    let (target_train_raw, target_test_raw) = split_test(&target_raw, test_count, split_seed)?;
    let num_labels = source_raw.num_labels.max(target_raw.num_labels);
    let mut source = to_labeled(&source_raw, 0)?;
    source.num_labels = num_labels;
    let target_train = to_unlabeled(&target_train_raw, TARGET_ID_BASE);
    let target_truth = target_train_raw.labels.as_ref().map(|labels| {
        labels
            .iter()
            .enumerate()
            .map(|(i, &y)| (TARGET_ID_BASE + i as u64, y))
            .collect()
    });
    let target_test = match &target_test_raw.labels {
        Some(_) => {
            let mut t = to_labeled(&target_test_raw, 0)?;
            t.num_labels = num_labels;
            Some(t)
        }
        None => None,
    };
    Ok(PreparedData {
        input_shape: source_raw.shape.clone(),
        source,
        target_train,
        target_truth,
        target_test,
        num_labels,
    })
}

/// Accuracy pair of a finished run: the iterative model's final-pass
/// pseudo-label accuracy over the target training set, and the
/// from-scratch classifier's accuracy on the held-out target test set.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub iterations: usize,
    pub pseudo_label_acc: Option<f64>,
    pub final_cnn_acc: Option<f64>,
}

pub struct RunOutcome {
    pub run: IdannRun,
    pub final_model: DannModel,
    pub summary: RunSummary,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

fn write_reports(out_dir: &Path, run: &IdannRun, summary: &RunSummary, cfg: &ExperimentConfig) -> Result<()> {
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |e| Error::io(&p, e)
    };

    let path = out_dir.join("loss_trace.csv");
    let mut w = csv_writer(&path)?;
    writeln!(w, "epoch,loss_y,loss_d,source_train_acc,target_test_acc").map_err(io(&path))?;
    for t in &run.trace {
        writeln!(
            w,
            "{},{},{},{},{}",
            t.epoch,
            t.loss_y,
            t.loss_d,
            t.source_train_acc,
            fmt_opt(t.target_test_acc)
        )
        .map_err(io(&path))?;
    }
    w.flush().map_err(io(&path))?;

    // Wall-clock time is deliberately kept out of the report files so that
    // identical runs are bitwise identical.
    let path = out_dir.join("iterations.csv");
    let mut w = csv_writer(&path)?;
    writeln!(
        w,
        "iteration,s_before,t_before,requested,accepted,forced,s_after,t_after,lambda_end,selected_label_acc,target_test_acc"
    )
    .map_err(io(&path))?;
    for r in &run.reports {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.iteration,
            r.s_before,
            r.t_before,
            r.requested,
            r.accepted,
            r.forced,
            r.s_after,
            r.t_after,
            r.lambda_end,
            fmt_opt(r.selected_label_acc),
            fmt_opt(r.target_test_acc)
        )
        .map_err(io(&path))?;
    }
    w.flush().map_err(io(&path))?;

    let path = out_dir.join("pseudo_labels.csv");
    let mut w = csv_writer(&path)?;
    writeln!(w, "sample_id,label,promoted_iteration,promoted_label").map_err(io(&path))?;
    for e in &run.pseudo_labels.entries {
        writeln!(
            w,
            "{},{},{},{}",
            e.id,
            e.label,
            e.promoted_iteration.map(|i| i.to_string()).unwrap_or_default(),
            e.promoted_label.map(|l| l.to_string()).unwrap_or_default()
        )
        .map_err(io(&path))?;
    }
    w.flush().map_err(io(&path))?;

    let path = out_dir.join("summary.txt");
    let mut w = csv_writer(&path)?;
    writeln!(w, "seed = {}", cfg.seed).map_err(io(&path))?;
    writeln!(w, "arch = {}", cfg.arch.name()).map_err(io(&path))?;
    writeln!(w, "policy = {}", cfg.hyperparams.policy.name()).map_err(io(&path))?;
    writeln!(w, "iterations = {}", summary.iterations).map_err(io(&path))?;
    writeln!(w, "pseudo_label_acc = {}", fmt_opt(summary.pseudo_label_acc)).map_err(io(&path))?;
    writeln!(w, "final_cnn_acc = {}", fmt_opt(summary.final_cnn_acc)).map_err(io(&path))?;
    w.flush().map_err(io(&path))
}

fn write_error_record(out_dir: &Path, err: &Error) {
    // Best effort: a failed run should still leave a diagnosable trace.
    let _ = std::fs::write(out_dir.join("error.txt"), format!("{err}\n"));
}

/// Execute a full experiment and write every report into `cfg.out_dir`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    match run_inner(cfg) {
        Ok(outcome) => Ok(outcome),
        Err(err) => {
            write_error_record(&cfg.out_dir, &err);
            Err(err)
        }
    }
}

fn run_inner(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let data = prepare_data(cfg)?;
    let outcome = execute(cfg, &data)?;
    write_reports(&cfg.out_dir, &outcome.run, &outcome.summary, cfg)?;
    save_checkpoint(&outcome.final_model, &cfg.out_dir.join("final_model.ckpt"))?;
    Ok(outcome)
}

/// The computation of `run` without any filesystem output; used by the
/// sweep so cells stay cheap.
pub fn execute(cfg: &ExperimentConfig, data: &PreparedData) -> Result<RunOutcome> {
    let mut model =
        build_model_with_input(cfg.arch, &data.input_shape, data.num_labels, cfg.seed)?;
    let diag = Diagnostics {
        target_test: if cfg.eval_ground_truth { data.target_test.as_ref() } else { None },
        ground_truth: if cfg.eval_ground_truth { data.target_truth.as_ref() } else { None },
        shadow_policy: None,
    };
    let run = run_idann(&mut model, &data.source, &data.target_train, &cfg.hyperparams, &diag)?;

    // Train the fresh classifier on the relabeled target set.
    let by_id: HashMap<u64, &crate::tensor::Tensor> = data
        .target_train
        .samples
        .iter()
        .map(|s| (s.id, &s.x))
        .collect();
    let final_samples: Vec<(crate::tensor::Tensor, usize)> = run
        .pseudo_labels
        .entries
        .iter()
        .map(|e| ((*by_id[&e.id]).clone(), e.label))
        .collect();
    let final_model = final_train_cnn(
        &final_samples,
        data.num_labels,
        cfg.arch,
        &data.input_shape,
        cfg.final_epochs,
        cfg.hyperparams.batch_size,
        cfg.hyperparams.epsilon,
        &cfg.hyperparams.optimizer,
        cfg.seed.wrapping_add(1),
    )?;

    let pseudo_label_acc = data.target_truth.as_ref().filter(|_| cfg.eval_ground_truth).map(|truth| {
        let hits = run
            .pseudo_labels
            .entries
            .iter()
            .filter(|e| truth.get(&e.id) == Some(&e.label))
            .count();
        hits as f64 / run.pseudo_labels.entries.len().max(1) as f64
    });
    let final_cnn_acc = match (&data.target_test, cfg.eval_ground_truth) {
        (Some(test), true) => Some(evaluate_accuracy(&final_model, test)?),
        _ => None,
    };
    let summary = RunSummary {
        iterations: run.reports.len(),
        pseudo_label_acc,
        final_cnn_acc,
    };
    Ok(RunOutcome { run, final_model, summary })
}

/// Train a source-only classifier (no adversarial head, no target data)
/// and score it on the target test set. The reference baseline.
pub fn source_only_accuracy(cfg: &ExperimentConfig, data: &PreparedData) -> Result<f64> {
    let test = data
        .target_test
        .as_ref()
        .ok_or_else(|| Error::Precondition("source-only baseline needs a target test set".into()))?;
    let mut model =
        build_model_with_input(cfg.arch, &data.input_shape, data.num_labels, cfg.seed)?;
    let train: Vec<(crate::tensor::Tensor, Vec<f64>)> = data
        .source
        .samples
        .iter()
        .map(|s| (s.x.clone(), crate::loss::one_hot(s.y, data.num_labels)))
        .collect();
    train_classifier(
        &mut model,
        &train,
        cfg.hyperparams.epochs,
        cfg.hyperparams.batch_size,
        &cfg.hyperparams.optimizer,
        cfg.seed,
    )?;
    evaluate_accuracy(&model, test)
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub batch_size: usize,
    pub lambda0: f64,
    pub seed: u64,
    /// Final-classifier target-test accuracy; None when the cell crashed.
    pub accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub batch_size: usize,
    pub lambda0: f64,
    pub mean_accuracy: Option<f64>,
    pub non_convergent: bool,
    pub crashed: bool,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub cells: Vec<SweepCell>,
    pub rows: Vec<SweepRow>,
}

/// Run the (batch size x lambda0) grid across seeds and aggregate mean
/// target accuracy per cell. Crashing cells are flagged and the sweep
/// continues. A mean accuracy below `1.5 / L` marks the cell as
/// non-convergent (chance-level collapse).
pub fn sweep(cfg: &ExperimentConfig, spec: &SweepSpec) -> Result<SweepOutcome> {
    if !cfg.eval_ground_truth {
        return Err(Error::Precondition(
            "sweep needs ground-truth evaluation to measure accuracy".into(),
        ));
    }
    let mut grid: Vec<(usize, f64)> = Vec::new();
    for &b in &spec.batch_sizes {
        for &l in &spec.lambda0s {
            grid.push((b, l));
        }
    }
    grid.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    grid.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1);

    let mut cells = Vec::new();
    let mut rows = Vec::new();
    let mut num_labels = 10usize;
    for &(b, l) in &grid {
        let mut accs = Vec::new();
        let mut crashed = false;
        for &seed in &spec.seeds {
            let mut cell_cfg = cfg.clone();
            cell_cfg.seed = seed;
            cell_cfg.hyperparams.seed = seed;
            cell_cfg.hyperparams.batch_size = b;
            cell_cfg.hyperparams.lambda0 = l;
            let result = prepare_data(&cell_cfg).and_then(|data| {
                num_labels = data.num_labels;
                execute(&cell_cfg, &data)
            });
            match result {
                Ok(out) => {
                    let acc = out.summary.final_cnn_acc.ok_or_else(|| {
                        Error::Precondition("sweep cell produced no test accuracy".into())
                    })?;
                    accs.push(acc);
                    cells.push(SweepCell {
                        batch_size: b,
                        lambda0: l,
                        seed,
                        accuracy: Some(acc),
                        error: None,
                    });
                }
                Err(err) => {
                    crashed = true;
                    cells.push(SweepCell {
                        batch_size: b,
                        lambda0: l,
                        seed,
                        accuracy: None,
                        error: Some(err.to_string()),
                    });
                }
            }
        }
        let mean = if accs.is_empty() {
            None
        } else {
            Some(accs.iter().sum::<f64>() / accs.len() as f64)
        };
        rows.push(SweepRow {
            batch_size: b,
            lambda0: l,
            mean_accuracy: mean,
            non_convergent: mean.is_some_and(|m| m < 1.5 / num_labels as f64),
            crashed,
        });
    }
    Ok(SweepOutcome { cells, rows })
}

pub fn write_sweep_reports(out_dir: &Path, outcome: &SweepOutcome) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("sweep_cells.csv");
    let mut w = csv_writer(&path)?;
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |e| Error::io(&p, e)
    };
    writeln!(w, "batch_size,lambda0,seed,accuracy,error").map_err(io(&path))?;
    for c in &outcome.cells {
        writeln!(
            w,
            "{},{},{},{},{}",
            c.batch_size,
            c.lambda0,
            c.seed,
            fmt_opt(c.accuracy),
            c.error.as_deref().unwrap_or("").replace(',', ";")
        )
        .map_err(io(&path))?;
    }
    w.flush().map_err(io(&path))?;

    let path = out_dir.join("sweep_summary.csv");
    let mut w = csv_writer(&path)?;
    writeln!(w, "batch_size,lambda0,mean_accuracy,non_convergent,crashed").map_err(io(&path))?;
    for r in &outcome.rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.batch_size,
            r.lambda0,
            fmt_opt(r.mean_accuracy),
            r.non_convergent,
            r.crashed
        )
        .map_err(io(&path))?;
    }
    w.flush().map_err(io(&path))
}

// ---------------------------------------------------------------------------
// Policy comparison
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PolicyIterationRow {
    pub policy: PolicyTag,
    pub k: usize,
    pub iteration: usize,
    pub mean_selected_label_acc: f64,
    pub seeds_counted: usize,
}

#[derive(Debug, Clone)]
pub struct PolicyComparison {
    pub rows: Vec<PolicyIterationRow>,
    pub confidence_mean: f64,
    pub knn_mean: f64,
    /// knn mean minus confidence mean, averaged over iterations.
    pub mean_gap: f64,
}

/// Compare the two selection policies as a paired experiment: one loop
/// per seed, driven by the configured policy, while the other policy is
/// scored as a shadow on the identical (model, S, T) state every
/// iteration. Pairing isolates the selection rule itself — two separate
/// runs would promote different samples and diverge, confounding the
/// comparison with trajectory noise. Needs ground truth for the target.
pub fn compare_policies(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<PolicyComparison> {
    if seeds.is_empty() {
        return Err(Error::Precondition("policy comparison needs at least one seed".into()));
    }
    // policy -> iteration -> accuracies across seeds
    let mut per_iter: HashMap<(PolicyTag, usize), Vec<f64>> = HashMap::new();

    for &seed in seeds {
        let mut cell_cfg = cfg.clone();
        cell_cfg.seed = seed;
        cell_cfg.hyperparams.seed = seed;
        let data = prepare_data(&cell_cfg)?;
        let truth = data.target_truth.as_ref().ok_or_else(|| {
            Error::Precondition("policy comparison needs target ground truth".into())
        })?;
        let hp = &cell_cfg.hyperparams;
        let shadow = match hp.policy {
            PolicyTag::Confidence => PolicyTag::Knn,
            PolicyTag::Knn => PolicyTag::Confidence,
        };
        let mut model =
            build_model_with_input(cell_cfg.arch, &data.input_shape, data.num_labels, seed)?;
        let diag = Diagnostics {
            target_test: None,
            ground_truth: Some(truth),
            shadow_policy: Some(shadow),
        };
        let run = run_idann(&mut model, &data.source, &data.target_train, hp, &diag)?;
        for r in &run.reports {
            if let Some(acc) = r.selected_label_acc {
                per_iter.entry((hp.policy, r.iteration)).or_default().push(acc);
            }
            if let Some(acc) = r.shadow_selected_label_acc {
                per_iter.entry((shadow, r.iteration)).or_default().push(acc);
            }
        }
    }

    let mut rows: Vec<PolicyIterationRow> = per_iter
        .into_iter()
        .map(|((policy, iteration), accs)| PolicyIterationRow {
            policy,
            k: cfg.hyperparams.k,
            iteration,
            mean_selected_label_acc: accs.iter().sum::<f64>() / accs.len() as f64,
            seeds_counted: accs.len(),
        })
        .collect();
    rows.sort_by_key(|r| (r.policy.name(), r.iteration));

    let mean_of = |tag: PolicyTag| -> f64 {
        let accs: Vec<f64> = rows
            .iter()
            .filter(|r| r.policy == tag)
            .map(|r| r.mean_selected_label_acc)
            .collect();
        if accs.is_empty() {
            0.0
        } else {
            accs.iter().sum::<f64>() / accs.len() as f64
        }
    };
    let confidence_mean = mean_of(PolicyTag::Confidence);
    let knn_mean = mean_of(PolicyTag::Knn);
    Ok(PolicyComparison {
        confidence_mean,
        knn_mean,
        mean_gap: knn_mean - confidence_mean,
        rows,
    })
}

pub fn write_policy_report(out_dir: &Path, cmp: &PolicyComparison) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("policy_comparison.csv");
    let mut w = csv_writer(&path)?;
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |e| Error::io(&p, e)
    };
    writeln!(w, "policy,k,iteration,mean_selected_label_acc,seeds_counted").map_err(io(&path))?;
    for r in &cmp.rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.policy.name(),
            r.k,
            r.iteration,
            r.mean_selected_label_acc,
            r.seeds_counted
        )
        .map_err(io(&path))?;
    }
    w.flush().map_err(io(&path))?;

    let path = out_dir.join("policy_summary.txt");
    let mut w = csv_writer(&path)?;
    writeln!(w, "confidence_mean = {}", cmp.confidence_mean).map_err(io(&path))?;
    writeln!(w, "knn_mean = {}", cmp.knn_mean).map_err(io(&path))?;
    writeln!(w, "mean_gap = {}", cmp.mean_gap).map_err(io(&path))?;
    w.flush().map_err(io(&path))
}

// ---------------------------------------------------------------------------
// Feature export and pseudo-label scoring
// ---------------------------------------------------------------------------

/// Write source and target features of a model (freshly initialized, or
/// restored from a checkpoint) as one plottable CSV.
pub fn export_features(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    out_path: &Path,
) -> Result<()> {
    let data = prepare_data(cfg)?;
    let model = match checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => build_model_with_input(cfg.arch, &data.input_shape, data.num_labels, cfg.seed)?,
    };
    let f = File::create(out_path).map_err(|e| Error::io(out_path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e| Error::io(out_path, e);
    let dim = model.feature_dim();
    let header: Vec<String> = ["sample_id", "domain", "true_label"]
        .iter()
        .map(|s| s.to_string())
        .chain((0..dim).map(|i| format!("f_{i}")))
        .collect();
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    let mut emit = |id: u64, domain: &str, label: Option<usize>, x: &crate::tensor::Tensor| -> Result<()> {
        let feats = model.features(x)?;
        write!(w, "{id},{domain},{}", label.map(|l| l.to_string()).unwrap_or_default())
            .map_err(io)?;
        for v in feats.data() {
            write!(w, ",{v}").map_err(io)?;
        }
        writeln!(w).map_err(io)
    };
    for s in &data.source.samples {
        emit(s.id, "source", Some(s.y), &s.x)?;
    }
    for s in &data.target_train.samples {
        let truth = data.target_truth.as_ref().and_then(|t| t.get(&s.id)).copied();
        emit(s.id, "target", truth, &s.x)?;
    }
    Ok(())
}

/// Score a pseudo-label CSV (as written by `run`) against the ground
/// truth regenerated from the config. Returns the fraction correct.
pub fn eval_pseudo_labels(cfg: &ExperimentConfig, csv_path: &Path) -> Result<f64> {
    let data = prepare_data(cfg)?;
    let truth = data
        .target_truth
        .as_ref()
        .ok_or_else(|| Error::Precondition("evaluation needs target ground truth".into()))?;
    let text = std::fs::read_to_string(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.starts_with("sample_id,label") => {}
        _ => {
            return Err(Error::Format {
                path: csv_path.to_path_buf(),
                offset: 0,
                message: "missing pseudo-label CSV header".into(),
            })
        }
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let parse_err = |what: &str| Error::Format {
            path: csv_path.to_path_buf(),
            offset: (lineno + 2) as u64,
            message: format!("bad {what} in row {:?}", line),
        };
        let id: u64 = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err("sample_id"))?;
        let label: usize = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err("label"))?;
        let expected = truth
            .get(&id)
            .ok_or_else(|| parse_err("unknown sample id"))?;
        total += 1;
        if *expected == label {
            hits += 1;
        }
    }
    if total == 0 {
        return Err(Error::Precondition("pseudo-label CSV has no rows".into()));
    }
    Ok(hits as f64 / total as f64)
}
