//! Adversarial training loop: mixed source/target batches, simultaneous
//! label and domain losses, with the domain gradient reaching the feature
//! extractor through the gradient reversal layer.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::loss;
use crate::model::{argmax, DannModel};
use crate::nn::{self, Gradients};
use crate::optim::{sgd_step, OptimizerConfig};
use crate::rng::substream_indexed;
use crate::tensor::Tensor;

/// Where a labeled sample came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// Part of the original source set.
    Source,
    /// Target sample promoted with its pseudo-label at the given iteration.
    Promoted { iteration: usize },
}

#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub id: u64,
    pub x: Tensor,
    pub y: usize,
    pub provenance: Provenance,
}

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub samples: Vec<LabeledSample>,
    pub num_labels: usize,
}

impl LabeledDataset {
    pub fn new(samples: Vec<LabeledSample>, num_labels: usize) -> Result<Self> {
        for s in &samples {
            if s.y >= num_labels {
                return Err(Error::Precondition(format!(
                    "label {} out of range for {} classes (sample {})",
                    s.y, num_labels, s.id
                )));
            }
        }
        Ok(LabeledDataset { samples, num_labels })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct UnlabeledSample {
    /// Stable id, preserved across selection rounds.
    pub id: u64,
    pub x: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct UnlabeledDataset {
    pub samples: Vec<UnlabeledSample>,
}

impl UnlabeledDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// One mixed batch: exactly `b/2` source and `b/2` target members, as
/// index lists into the two datasets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainBatch {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// Linear GRL warm-up: `lambda = lambda0 + step * epochs_elapsed`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaSchedule {
    pub lambda0: f64,
    pub step: f64,
}

impl LambdaSchedule {
    pub fn value(&self, epochs_elapsed: u64) -> f64 {
        self.lambda0 + self.step * epochs_elapsed as f64
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub lambda: LambdaSchedule,
    /// Cumulative epochs already elapsed (continues the lambda warm-up
    /// across incremental fits).
    pub epochs_elapsed_start: u64,
    /// Zero-based SGD update counter to continue learning-rate decay from.
    pub update_counter_start: u64,
}

/// Per-epoch record of the loss trace.
#[derive(Debug, Clone)]
pub struct EpochTrace {
    pub epoch: u64,
    pub loss_y: f64,
    pub loss_d: f64,
    pub source_train_acc: f64,
    pub target_test_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub trace: Vec<EpochTrace>,
    pub epochs_elapsed_end: u64,
    pub update_counter_end: u64,
}

/// Batch composition for one epoch. Every source sample appears exactly
/// once, except that the last batch is padded by wrapping to the start of
/// the shuffled order. The target half is drawn without replacement when
/// the target set is large enough, with replacement otherwise.
pub fn make_epoch_batches(
    num_source: usize,
    num_target: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<TrainBatch>> {
    if batch_size < 2 || batch_size % 2 != 0 {
        return Err(Error::Precondition(format!(
            "batch size must be even and >= 2, got {batch_size}"
        )));
    }
    if num_source == 0 || num_target == 0 {
        return Err(Error::Precondition(
            "both source and target sets must be non-empty".into(),
        ));
    }
    let half = batch_size / 2;
    let num_batches = num_source.div_ceil(half);
    let mut rng = substream_indexed(seed, "shuffle", epoch);

    let mut src: Vec<usize> = (0..num_source).collect();
    src.shuffle(&mut rng);

    let needed = num_batches * half;
    let tgt: Vec<usize> = if num_target >= needed {
        let mut t: Vec<usize> = (0..num_target).collect();
        t.shuffle(&mut rng);
        t.truncate(needed);
        t
    } else {
        (0..needed).map(|_| rng.gen_range(0..num_target)).collect()
    };

    let mut batches = Vec::with_capacity(num_batches);
    for bi in 0..num_batches {
        let source = (0..half)
            .map(|j| src[(bi * half + j) % num_source])
            .collect();
        let target = tgt[bi * half..(bi + 1) * half].to_vec();
        batches.push(TrainBatch { source, target });
    }
    Ok(batches)
}

/// Per-sample gradient contribution, accumulated into the three blocks.
struct BatchAccumulator {
    feature: Gradients,
    label: Gradients,
    domain: Gradients,
    loss_y: f64,
    loss_d: f64,
    correct: usize,
}

impl BatchAccumulator {
    fn new(model: &DannModel) -> Self {
        BatchAccumulator {
            feature: Gradients::zeros_like(&model.feature_params),
            label: Gradients::zeros_like(&model.label_params),
            domain: Gradients::zeros_like(&model.domain_params),
            loss_y: 0.0,
            loss_d: 0.0,
            correct: 0,
        }
    }
}

/// Forward/backward for one sample. `label_target` is `Some` for labeled
/// (source-side) members; `domain` is 0 for source, 1 for target. The
/// label loss is scaled by `label_scale`, the domain loss by
/// `domain_scale`; the domain gradient reaches the feature extractor
/// through the GRL of the domain head.
fn accumulate_sample(
    model: &DannModel,
    x: &Tensor,
    label_target: Option<&[f64]>,
    domain: u8,
    label_scale: f64,
    domain_scale: f64,
    acc: &mut BatchAccumulator,
) -> Result<()> {
    let (feat, feat_cache) = nn::forward(&model.feature_layers, &model.feature_params, x)?;
    let flat = feat.clone().reshaped(vec![feat.len()])?;
    let mut feat_grad = Tensor::zeros(vec![flat.len()]);

    if let Some(target) = label_target {
        let (probs, label_cache) = nn::forward(&model.label_layers, &model.label_params, &flat)?;
        acc.loss_y += label_scale * loss::cross_entropy(probs.data(), target)?;
        if argmax(probs.data()) == argmax(target) {
            acc.correct += 1;
        }
        let mut g = Tensor::from_vec(loss::cross_entropy_grad(probs.data(), target));
        g.scale(label_scale);
        let (label_grads, gf) =
            nn::backward(&model.label_layers, &model.label_params, &label_cache, &g, 0.0)?;
        acc.label.accumulate(&label_grads, 1.0);
        feat_grad.add_scaled(&gf, 1.0);
    }

    let (dp, domain_cache) = nn::forward(&model.domain_layers, &model.domain_params, &flat)?;
    let p = dp.data()[0];
    acc.loss_d += domain_scale * loss::binary_cross_entropy(p, domain);
    let g = Tensor::from_vec(vec![domain_scale * loss::binary_cross_entropy_grad(p, domain)]);
    // The Grl layer at the head of the domain stack reverses and scales
    // the gradient that continues into the feature extractor.
    let (domain_grads, gf) = nn::backward(
        &model.domain_layers,
        &model.domain_params,
        &domain_cache,
        &g,
        model.grl_lambda,
    )?;
    acc.domain.accumulate(&domain_grads, 1.0);
    feat_grad.add_scaled(&gf, 1.0);

    let feat_grad = feat_grad.reshaped(feat.shape().to_vec())?;
    let (feature_grads, _) = nn::backward(
        &model.feature_layers,
        &model.feature_params,
        &feat_cache,
        &feat_grad,
        0.0,
    )?;
    acc.feature.accumulate(&feature_grads, 1.0);
    Ok(())
}

/// Train the three-block model on mixed batches. The label loss is
/// averaged over the source half only; the domain loss over the whole
/// batch with true domain indicators. `diagnostics` (optional labeled
/// target test set) fills the per-epoch `target_test_acc` column.
pub fn train_dann(
    model: &mut DannModel,
    source: &LabeledDataset,
    target: &UnlabeledDataset,
    opts: &TrainOptions,
    diagnostics: Option<&LabeledDataset>,
) -> Result<TrainResult> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Precondition(
            "train_dann requires non-empty source and target sets".into(),
        ));
    }
    opts.optimizer.validate()?;
    let mut trace = Vec::with_capacity(opts.epochs);
    let mut elapsed = opts.epochs_elapsed_start;
    let mut updates = opts.update_counter_start;
    for epoch in 0..opts.epochs as u64 {
        model.grl_lambda = opts.lambda.value(elapsed);
        let batches =
            make_epoch_batches(source.len(), target.len(), opts.batch_size, opts.seed, elapsed)?;
        let mut epoch_loss_y = 0.0;
        let mut epoch_loss_d = 0.0;
        let mut correct = 0usize;
        let mut seen_src = 0usize;
        for (bi, batch) in batches.iter().enumerate() {
            let n_src = batch.source.len();
            let n_all = n_src + batch.target.len();
            let label_scale = 1.0 / n_src as f64;
            let domain_scale = 1.0 / n_all as f64;
            let mut acc = BatchAccumulator::new(model);
            for &si in &batch.source {
                let s = &source.samples[si];
                let target_vec = loss::one_hot(s.y, source.num_labels);
                accumulate_sample(model, &s.x, Some(&target_vec), 0, label_scale, domain_scale, &mut acc)?;
            }
            for &ti in &batch.target {
                accumulate_sample(
                    model,
                    &target.samples[ti].x,
                    None,
                    1,
                    label_scale,
                    domain_scale,
                    &mut acc,
                )?;
            }
            if !acc.loss_y.is_finite() || !acc.loss_d.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch} batch {bi} (L_y={}, L_d={})",
                    acc.loss_y, acc.loss_d
                )));
            }
            sgd_step(&mut model.feature_params, &acc.feature, &opts.optimizer, updates);
            sgd_step(&mut model.label_params, &acc.label, &opts.optimizer, updates);
            sgd_step(&mut model.domain_params, &acc.domain, &opts.optimizer, updates);
            updates += 1;
            epoch_loss_y += acc.loss_y;
            epoch_loss_d += acc.loss_d;
            correct += acc.correct;
            seen_src += n_src;
        }
        elapsed += 1;
        // Lambda advances after each epoch.
        model.grl_lambda = opts.lambda.value(elapsed);
        let target_test_acc = match diagnostics {
            Some(d) => Some(evaluate_accuracy(model, d)?),
            None => None,
        };
        trace.push(EpochTrace {
            epoch: elapsed - 1,
            loss_y: epoch_loss_y / batches.len() as f64,
            loss_d: epoch_loss_d / batches.len() as f64,
            source_train_acc: correct as f64 / seen_src as f64,
            target_test_acc,
        });
    }
    Ok(TrainResult {
        trace,
        epochs_elapsed_end: elapsed,
        update_counter_end: updates,
    })
}

/// Plain supervised training of `G_y(G_f(.))` with (possibly soft)
/// targets. The domain head is untouched. Used for the source-only
/// baseline and the final from-scratch CNN.
pub fn train_classifier(
    model: &mut DannModel,
    data: &[(Tensor, Vec<f64>)],
    epochs: usize,
    batch_size: usize,
    optimizer: &OptimizerConfig,
    seed: u64,
) -> Result<Vec<EpochTrace>> {
    if data.is_empty() {
        return Err(Error::Precondition("empty training set".into()));
    }
    optimizer.validate()?;
    let mut trace = Vec::with_capacity(epochs);
    let mut updates = 0u64;
    for epoch in 0..epochs as u64 {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = substream_indexed(seed, "shuffle", epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut correct = 0usize;
        let mut num_batches = 0usize;
        for chunk in order.chunks(batch_size) {
            let scale = 1.0 / chunk.len() as f64;
            let mut feature = Gradients::zeros_like(&model.feature_params);
            let mut label = Gradients::zeros_like(&model.label_params);
            for &i in chunk {
                let (x, target) = &data[i];
                let (feat, feat_cache) =
                    nn::forward(&model.feature_layers, &model.feature_params, x)?;
                let flat = feat.clone().reshaped(vec![feat.len()])?;
                let (probs, label_cache) =
                    nn::forward(&model.label_layers, &model.label_params, &flat)?;
                epoch_loss += scale * loss::cross_entropy(probs.data(), target)?;
                if argmax(probs.data()) == argmax(target) {
                    correct += 1;
                }
                let mut g = Tensor::from_vec(loss::cross_entropy_grad(probs.data(), target));
                g.scale(scale);
                let (lg, gf) =
                    nn::backward(&model.label_layers, &model.label_params, &label_cache, &g, 0.0)?;
                label.accumulate(&lg, 1.0);
                let gf = gf.reshaped(feat.shape().to_vec())?;
                let (fg, _) = nn::backward(
                    &model.feature_layers,
                    &model.feature_params,
                    &feat_cache,
                    &gf,
                    0.0,
                )?;
                feature.accumulate(&fg, 1.0);
            }
            if !epoch_loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch} batch {num_batches}"
                )));
            }
            sgd_step(&mut model.feature_params, &feature, optimizer, updates);
            sgd_step(&mut model.label_params, &label, optimizer, updates);
            updates += 1;
            num_batches += 1;
        }
        trace.push(EpochTrace {
            epoch,
            loss_y: epoch_loss / num_batches as f64,
            loss_d: 0.0,
            source_train_acc: correct as f64 / data.len() as f64,
            target_test_acc: None,
        });
    }
    Ok(trace)
}

/// Fraction of samples whose predicted label (lowest-index argmax of the
/// posterior) equals the ground truth.
pub fn evaluate_accuracy(model: &DannModel, set: &LabeledDataset) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Precondition("cannot evaluate on an empty set".into()));
    }
    let mut correct = 0usize;
    for s in &set.samples {
        if model.predict_label(&s.x)? == s.y {
            correct += 1;
        }
    }
    Ok(correct as f64 / set.len() as f64)
}
