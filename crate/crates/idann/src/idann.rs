//! The incremental orchestration: repeated adversarial fits, selection,
//! promotion of pseudo-labeled target samples into the labeled set, and
//! the final from-scratch classifier trained with label smoothing.

use std::collections::HashMap;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::loss;
use crate::model::{build_model_with_input, ArchitectureId, DannModel};
use crate::optim::OptimizerConfig;
use crate::selection::{self, Candidate, PolicyTag, SelectionBatch};
use crate::tensor::Tensor;
use crate::trainer::{
    train_classifier, train_dann, EpochTrace, LabeledDataset, LabeledSample, LambdaSchedule,
    Provenance, TrainOptions, UnlabeledDataset,
};

/// All tunables of the incremental loop.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    /// Epochs of the first adversarial fit.
    pub epochs: usize,
    /// Epochs of each incremental refit.
    pub inc_epochs: usize,
    pub batch_size: usize,
    /// Selection percentage of the remaining target set, in (0, 100].
    pub p_percent: f64,
    /// Growth factor applied to the percentage after each iteration.
    pub beta: f64,
    pub lambda0: f64,
    /// Per-epoch GRL coefficient increment.
    pub lambda_step: f64,
    /// When true (default) the warm-up continues across incremental fits;
    /// when false it restarts from `lambda0` at each fit.
    pub cumulative_lambda: bool,
    /// Neighbor count of the kNN policy.
    pub k: usize,
    pub policy: PolicyTag,
    /// Label smoothing constant of the final classifier.
    pub epsilon: f64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            epochs: 300,
            inc_epochs: 25,
            batch_size: 64,
            p_percent: 5.0,
            beta: 1.5,
            lambda0: 1e-3,
            lambda_step: 1e-4,
            cumulative_lambda: true,
            k: 5,
            policy: PolicyTag::Knn,
            epsilon: 0.1,
            optimizer: OptimizerConfig::default(),
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, msg: String| Err(Error::Config(format!("{f}: {msg}")));
        if self.epochs == 0 || self.inc_epochs == 0 {
            return bad("epochs", "epoch counts must be >= 1".into());
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return bad("batch_size", format!("must be even and >= 2, got {}", self.batch_size));
        }
        if !(self.p_percent > 0.0 && self.p_percent <= 100.0) {
            return bad("p_percent", format!("must be in (0, 100], got {}", self.p_percent));
        }
        if self.beta < 1.0 {
            return bad("beta", format!("must be >= 1, got {}", self.beta));
        }
        if self.lambda0 < 0.0 {
            return bad("lambda0", format!("must be >= 0, got {}", self.lambda0));
        }
        if self.lambda_step < 0.0 {
            return bad("lambda_step", format!("must be >= 0, got {}", self.lambda_step));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return bad("epsilon", format!("must be in [0, 1), got {}", self.epsilon));
        }
        if self.k == 0 {
            return bad("k", "must be >= 1".into());
        }
        self.optimizer.validate()
    }

    pub fn lambda(&self) -> LambdaSchedule {
        LambdaSchedule {
            lambda0: self.lambda0,
            step: self.lambda_step,
        }
    }
}

/// GRL coefficient after `epochs_elapsed` epochs of warm-up.
pub fn lambda_schedule(lambda0: f64, lambda_step: f64, epochs_elapsed: u64) -> f64 {
    LambdaSchedule { lambda0, step: lambda_step }.value(epochs_elapsed)
}

/// Requested selection size: `clamp(ceil(p/100 * remaining), 1, remaining)`.
pub fn requested_size(p_percent: f64, remaining: usize) -> usize {
    if remaining == 0 {
        return 0;
    }
    let raw = (p_percent / 100.0 * remaining as f64).ceil() as usize;
    raw.clamp(1, remaining)
}

/// Percentage growth applied after each iteration.
pub fn next_percentage(p_percent: f64, beta: f64) -> f64 {
    p_percent * beta
}

/// When the kNN policy accepted nothing, force-promote the single
/// highest-confidence candidate so the loop always makes progress.
pub fn anti_stall_promotion(
    selection: SelectionBatch,
    ranked: &[Candidate],
    _p_count: usize,
) -> SelectionBatch {
    if !selection.is_empty() || ranked.is_empty() {
        return selection;
    }
    SelectionBatch {
        candidates: vec![ranked[0].clone()],
        forced: true,
        ..selection
    }
}

/// Per-iteration metrics record.
#[derive(Debug, Clone)]
pub struct IterationReport {
    pub iteration: usize,
    pub s_before: usize,
    pub t_before: usize,
    pub requested: usize,
    pub accepted: usize,
    pub forced: bool,
    pub s_after: usize,
    pub t_after: usize,
    pub lambda_end: f64,
    /// Fraction of accepted candidates whose pseudo-label matches ground
    /// truth; only when ground truth was supplied for diagnostics.
    pub selected_label_acc: Option<f64>,
    /// Same measure for the shadow policy's (non-promoted) selection;
    /// None when no shadow policy was requested, ground truth is missing,
    /// or the shadow selection came back empty.
    pub shadow_selected_label_acc: Option<f64>,
    pub target_test_acc: Option<f64>,
    pub wall_secs: f64,
}

/// Pseudo-label for one original target sample. `label` is the final-pass
/// relabel; iteration-time labels of promoted samples are kept for audit.
#[derive(Debug, Clone)]
pub struct PseudoLabelEntry {
    pub id: u64,
    pub label: usize,
    pub promoted_iteration: Option<usize>,
    pub promoted_label: Option<usize>,
}

/// Covers exactly the original target set, sorted by sample id.
#[derive(Debug, Clone)]
pub struct PseudoLabeledSet {
    pub entries: Vec<PseudoLabelEntry>,
}

#[derive(Debug, Clone)]
pub struct IdannRun {
    pub reports: Vec<IterationReport>,
    pub pseudo_labels: PseudoLabeledSet,
    /// Concatenated per-epoch loss trace across all fits.
    pub trace: Vec<EpochTrace>,
    /// The labeled set after all promotions (original + promoted samples).
    pub final_source: LabeledDataset,
}

/// Mutable loop position, exposed so callers can share a first fit
/// between policy branches.
#[derive(Debug, Clone)]
pub struct LoopState {
    pub p_percent: f64,
    pub iteration: usize,
    pub epochs_elapsed: u64,
    pub update_counter: u64,
    /// Epochs to train before the next selection (0 = model already fitted).
    pub next_fit_epochs: usize,
}

impl LoopState {
    pub fn fresh(hp: &Hyperparams) -> Self {
        LoopState {
            p_percent: hp.p_percent,
            iteration: 0,
            epochs_elapsed: 0,
            update_counter: 0,
            next_fit_epochs: hp.epochs,
        }
    }
}

/// Optional evaluation inputs; ground truth is used for analysis only and
/// never reaches training.
#[derive(Default)]
pub struct Diagnostics<'a> {
    /// Labeled target test split for per-iteration accuracy.
    pub target_test: Option<&'a LabeledDataset>,
    /// True labels of (unlabeled) target-train ids, for selected-label accuracy.
    pub ground_truth: Option<&'a HashMap<u64, usize>>,
    /// Score this second policy's selection on the same (model, S, T)
    /// state every iteration, without promoting it. Gives a paired
    /// policy comparison that isolates the selection rule from the
    /// diverging trajectories two separate runs would have.
    pub shadow_policy: Option<PolicyTag>,
}

/// Run the full incremental loop from scratch.
pub fn run_idann(
    model: &mut DannModel,
    source: &LabeledDataset,
    target: &UnlabeledDataset,
    hp: &Hyperparams,
    diag: &Diagnostics,
) -> Result<IdannRun> {
    hp.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(Error::Precondition(
            "run_idann requires non-empty source and target sets".into(),
        ));
    }
    let state = LoopState::fresh(hp);
    incremental_loop(model, source.clone(), target.clone(), target, hp, state, diag)
}

/// The iterative stage. `working_source` / `working_target` are the
/// current S and T; `original_target` is all of T0 and receives the
/// final-pass relabel. `state.next_fit_epochs == 0` means the caller has
/// already fitted the model for the first selection.
pub fn incremental_loop(
    model: &mut DannModel,
    mut working_source: LabeledDataset,
    mut working_target: UnlabeledDataset,
    original_target: &UnlabeledDataset,
    hp: &Hyperparams,
    mut state: LoopState,
    diag: &Diagnostics,
) -> Result<IdannRun> {
    hp.validate()?;
    let total_samples = working_source.len() + working_target.len();
    let mut reports = Vec::new();
    let mut trace = Vec::new();
    let mut promoted: HashMap<u64, (usize, usize)> = HashMap::new(); // id -> (iteration, label)

    while !working_target.is_empty() {
        state.iteration += 1;
        let start = Instant::now();
        let (s_before, t_before) = (working_source.len(), working_target.len());

        if state.next_fit_epochs > 0 {
            let opts = TrainOptions {
                epochs: state.next_fit_epochs,
                batch_size: hp.batch_size,
                optimizer: hp.optimizer.clone(),
                seed: hp.seed,
                lambda: hp.lambda(),
                epochs_elapsed_start: if hp.cumulative_lambda { state.epochs_elapsed } else { 0 },
                update_counter_start: state.update_counter,
            };
            let fit = train_dann(model, &working_source, &working_target, &opts, None)?;
            state.epochs_elapsed += state.next_fit_epochs as u64;
            state.update_counter = fit.update_counter_end;
            trace.extend(fit.trace);
        }
        state.next_fit_epochs = hp.inc_epochs;

        let p_count = requested_size(state.p_percent, working_target.len());
        let selected = match hp.policy {
            PolicyTag::Confidence => {
                selection::confidence_select(model, &working_target, p_count, state.iteration)?
            }
            PolicyTag::Knn => {
                let batch = selection::knn_select(
                    model,
                    &working_source,
                    &working_target,
                    p_count,
                    hp.k.min(working_source.len()),
                    state.iteration,
                )?;
                if batch.is_empty() {
                    let ids: Vec<u64> = working_target.samples.iter().map(|s| s.id).collect();
                    let xs: Vec<Tensor> =
                        working_target.samples.iter().map(|s| s.x.clone()).collect();
                    let rows = model.predict_label_probs(&xs)?;
                    let ranked = selection::rank_candidates(&ids, &rows)?;
                    anti_stall_promotion(batch, &ranked, p_count)
                } else {
                    batch
                }
            }
        };

        let selected_label_acc = diag.ground_truth.map(|truth| {
            let hits = selected
                .candidates
                .iter()
                .filter(|c| truth.get(&c.sample_id) == Some(&c.pseudo_label))
                .count();
            hits as f64 / selected.len().max(1) as f64
        });

        // Score the shadow policy on the identical pre-promotion state.
        let shadow_selected_label_acc = match (diag.shadow_policy, diag.ground_truth) {
            (Some(shadow), Some(truth)) => {
                if shadow == hp.policy {
                    selected_label_acc
                } else {
                    let batch = match shadow {
                        PolicyTag::Confidence => selection::confidence_select(
                            model,
                            &working_target,
                            p_count,
                            state.iteration,
                        )?,
                        PolicyTag::Knn => selection::knn_select(
                            model,
                            &working_source,
                            &working_target,
                            p_count,
                            hp.k.min(working_source.len()),
                            state.iteration,
                        )?,
                    };
                    if batch.is_empty() {
                        None
                    } else {
                        let hits = batch
                            .candidates
                            .iter()
                            .filter(|c| truth.get(&c.sample_id) == Some(&c.pseudo_label))
                            .count();
                        Some(hits as f64 / batch.len() as f64)
                    }
                }
            }
            _ => None,
        };

        // Promote: move accepted ids from T into S with their pseudo-labels.
        for cand in &selected.candidates {
            let pos = working_target
                .samples
                .iter()
                .position(|s| s.id == cand.sample_id)
                .ok_or_else(|| {
                    Error::Internal(format!("selected id {} not in target set", cand.sample_id))
                })?;
            let sample = working_target.samples.remove(pos);
            promoted.insert(sample.id, (state.iteration, cand.pseudo_label));
            working_source.samples.push(LabeledSample {
                id: sample.id,
                x: sample.x,
                y: cand.pseudo_label,
                provenance: Provenance::Promoted { iteration: state.iteration },
            });
        }
        debug_assert_eq!(working_source.len() + working_target.len(), total_samples);

        let target_test_acc = match diag.target_test {
            Some(set) => Some(crate::trainer::evaluate_accuracy(model, set)?),
            None => None,
        };
        let report = IterationReport {
            iteration: state.iteration,
            s_before,
            t_before,
            requested: p_count,
            accepted: selected.len(),
            forced: selected.forced,
            s_after: working_source.len(),
            t_after: working_target.len(),
            lambda_end: model.grl_lambda,
            selected_label_acc,
            shadow_selected_label_acc,
            target_test_acc,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        // Long loops are otherwise silent; opt-in progress on stderr keeps
        // report files untouched (they must stay bitwise deterministic).
        if std::env::var_os("IDANN_PROGRESS").is_some() {
            eprintln!(
                "iteration {}: |T| {} -> {}, accepted {}/{}{}, acc {:?} ({:.1}s)",
                report.iteration,
                report.t_before,
                report.t_after,
                report.accepted,
                report.requested,
                if report.forced { " (forced)" } else { "" },
                report.target_test_acc,
                report.wall_secs
            );
        }
        reports.push(report);

        state.p_percent = next_percentage(state.p_percent, hp.beta);
    }

    // Final pass: relabel ALL original target samples with the final
    // model; this overrides iteration-time pseudo-labels.
    let mut entries = Vec::with_capacity(original_target.len());
    for s in &original_target.samples {
        let label = model.predict_label(&s.x)?;
        let (promoted_iteration, promoted_label) = match promoted.get(&s.id) {
            Some(&(it, l)) => (Some(it), Some(l)),
            None => (None, None),
        };
        entries.push(PseudoLabelEntry {
            id: s.id,
            label,
            promoted_iteration,
            promoted_label,
        });
    }
    entries.sort_by_key(|e| e.id);

    Ok(IdannRun {
        reports,
        pseudo_labels: PseudoLabeledSet { entries },
        trace,
        final_source: working_source,
    })
}

/// Train a fresh `G_y(G_f(.))`-shaped classifier on the pseudo-labeled
/// target set with smoothed targets.
#[allow(clippy::too_many_arguments)]
pub fn final_train_cnn(
    samples: &[(Tensor, usize)],
    num_labels: usize,
    arch: ArchitectureId,
    input_shape: &[usize],
    epochs: usize,
    batch_size: usize,
    epsilon: f64,
    optimizer: &OptimizerConfig,
    seed: u64,
) -> Result<DannModel> {
    if samples.is_empty() {
        return Err(Error::Precondition("final training set is empty".into()));
    }
    let data: Vec<(Tensor, Vec<f64>)> = samples
        .iter()
        .map(|(x, y)| Ok((x.clone(), loss::smooth_labels(*y, num_labels, epsilon)?)))
        .collect::<Result<_>>()?;
    let mut model = build_model_with_input(arch, input_shape, num_labels, seed)?;
    train_classifier(&mut model, &data, epochs, batch_size, optimizer, seed)?;
    Ok(model)
}
